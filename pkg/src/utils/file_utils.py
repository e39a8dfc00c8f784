import logging
from pathlib import Path

import pandas as pd

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


class FileUtils:
    @staticmethod
    def ensure_directory(path: Path) -> bool:
        """Ensure directory exists and is writable"""
        try:
            path.mkdir(parents=True, exist_ok=True)

            # Test write permissions by creating a temporary file
            test_file = path / '.write_test'
            try:
                test_file.touch()
                test_file.unlink()
                return True
            except Exception as e:
                logger.error(f"Directory is not writable: {e}")
                return False
        except Exception as e:
            logger.error(f"Could not create/verify directory {path}: {e}")
            return False

    @staticmethod
    def run_directory(base: Path, command: str, config_hash: str) -> Path:
        """
        Directory for one run, named by the content hash of its resolved config.

        Args:
            base: Output root (the CLI ``--out`` flag)
            command: Subcommand name, used as a prefix
            config_hash: Hex digest of the resolved configuration

        Returns:
            Path: The created run directory
        """
        run_dir = Path(base).resolve() / f"{command}-{config_hash[:16]}"
        if not FileUtils.ensure_directory(run_dir):
            raise OSError(f"Run directory {run_dir} is not writable")
        logger.debug(f"Using run directory: {run_dir}")
        return run_dir

    @staticmethod
    def write_csv(frame: pd.DataFrame, path: Path) -> Path:
        """Write a table with a fixed float format so reruns are byte-identical"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path
