import logging
import os
import sys


def setup_logger(level: str = None):
    """Configure global logging settings"""
    level_name = (level or os.getenv("KAM_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )


# Initialize logger when module is imported
setup_logger()
