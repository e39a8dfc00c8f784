import json
import logging
from pathlib import Path

import numpy as np

# Get logger for this module
logger = logging.getLogger(__name__)


def to_jsonable(value):
    """Convert numpy scalars/arrays and complex numbers into plain JSON values"""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": float(value.real), "im": float(value.imag)}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class TraceWriter:
    @staticmethod
    def write_jsonl(records: list, output_path: str) -> str:
        """
        Write one JSON object per line (the per-step KAM trace).

        Args:
            records: Sequence of dicts
            output_path: Destination file

        Returns:
            str: Path to the written file
        """
        output_path = Path(output_path).resolve()
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, 'w') as f:
            for record in records:
                f.write(json.dumps(to_jsonable(record), sort_keys=True))
                f.write("\n")
        logger.info(f"Wrote {len(records)} trace records to {output_path}")
        return str(output_path)

    @staticmethod
    def read_jsonl(input_path: str) -> list:
        """Read a JSON-lines trace back into a list of dicts"""
        input_path = Path(input_path).resolve()
        with open(input_path, 'r') as f:
            records = [json.loads(line) for line in f if line.strip()]
        logger.debug(f"Loaded {len(records)} trace records from {input_path}")
        return records

    @staticmethod
    def write_json(payload: dict, output_path: str) -> str:
        """Write a manifest or diagnostics object with sorted keys and no timestamps"""
        output_path = Path(output_path).resolve()
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, 'w') as f:
            json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Successfully wrote {output_path.name} to {output_path.parent}")
        return str(output_path)
