import os
import json
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from dotenv import load_dotenv, find_dotenv

# Configure logging
logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised when a configuration key is unknown or its value cannot be parsed"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


# Declared keys with their defaults; the type of the default is the type of the key.
DEFAULTS = {
    "model.preset": "twist-1-1",
    "model.epsilon": 1e-6,
    "model.t": 0.1,
    "model.drift": 0.0,
    "model.xi": [],
    "kam.gamma": 0.05,
    "kam.tau": 0.0,
    "kam.nbar": 0,
    "kam.nbar_max": 4,
    "kam.L": 2,
    "kam.K0": 10,
    "kam.s0": 0.5,
    "kam.r0": 1.0,
    "kam.k_max": 0,
    "kam.stop_eps": 1e-13,
    "kam.max_steps": 12,
    "kam.eta_max": 1.0,
    "kam.drop_tol": 1e-16,
    "kam.track_remainder": False,
    "sympmap.newton_tol": 1e-13,
    "sympmap.newton_max_iter": 50,
    "iterate.z0": [],
    "iterate.steps": 1000,
    "measure.gammas": [0.02, 0.03, 0.05, 0.08, 0.12, 0.2],
    "measure.t": 1.0,
    "measure.tau": 2.0,
    "measure.grid_res": 2048,
    "measure.k_max": 32,
    "measure.v_max": 0,
    "measure.mc_samples": 4096,
    "verify.n_phi": 64,
    "verify.orbit_steps": 2000,
    "verify.eps_grid": [0.0, 1e-7, 1e-6, 1e-5, 1e-4],
    "verify.t_grid": [0.1],
    "verify.xi_samples": 8,
    "verify.residual_tol": 1e-8,
    "scheme.t_ladder": [0.1, 0.05, 0.025],
    "scheme.epsilon": 1e-3,
    "run.seed": 42,
    "run.threads": 1,
}

ENV_PREFIX = "KAM_"


class ConfigManager:
    _instance = None
    _initialized = False

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(ConfigManager, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if not self._initialized:
            # Load .env file without clearing existing environment variables
            load_dotenv(find_dotenv(usecwd=True), override=True)
            self._file_config = {}
            self._runtime_config = {}
            self._initialized = True
            logger.debug("ConfigManager initialized")

    @classmethod
    def reset(cls):
        """Drop the singleton so the next construction starts from defaults"""
        cls._instance = None
        cls._initialized = False

    def load_file(self, path: str):
        """Load a TOML (or JSON) config file; nested tables become dotted keys"""
        path = Path(path)
        logger.debug(f"Loading config file: {path}")
        try:
            text = path.read_text()
            raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (OSError, ValueError, tomllib.TOMLDecodeError) as e:
            logger.error(f"Could not read config file {path}: {str(e)}")
            raise ConfigError(str(path), f"unreadable config file ({str(e)})")

        for key, value in self._flatten(raw).items():
            self._file_config[key] = self._coerce(key, value)
        logger.info(f"Loaded {len(self._file_config)} keys from {path}")

    def set_config(self, key: str, value):
        """Set a configuration value that takes precedence over file and .env"""
        self._runtime_config[key] = self._coerce(key, value)
        logger.debug(f"Config set: {key}={self._runtime_config[key]}")

    def get_config(self, key: str, default=None):
        """Get configuration value: runtime > file > environment > defaults"""
        if key in self._runtime_config:
            return self._runtime_config[key]
        if key in self._file_config:
            return self._file_config[key]
        env_value = os.getenv(self._env_name(key))
        if env_value is not None and key in DEFAULTS:
            return self._coerce(key, env_value)
        return DEFAULTS.get(key, default)

    def update_from_overrides(self, overrides: list):
        """Apply repeated ``key=value`` overrides (the CLI ``--set`` flag)"""
        logger.debug("Updating settings from overrides")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like key=value")
            key, value = item.split("=", 1)
            self.set_config(key.strip(), value.strip())
        # Print configuration snapshot after update
        self.print_config_snapshot()

    def get_all_configs(self) -> dict:
        """Get all resolved configurations as a flat dotted-key dict"""
        return {key: self.get_config(key) for key in sorted(DEFAULTS)}

    def get_config_snapshot(self) -> dict:
        """Get a snapshot of all configurations organized by section"""
        snapshot = {}
        for key, value in self.get_all_configs().items():
            section, name = key.split(".", 1)
            snapshot.setdefault(section, {})[name] = value
        return snapshot

    def print_config_snapshot(self):
        """Print a formatted snapshot of all configurations"""
        snapshot = self.get_config_snapshot()
        logger.debug("\n=== Configuration Snapshot ===")
        logger.debug(json.dumps(snapshot, indent=2))
        logger.debug("============================\n")

    def content_hash(self, extra: dict = None) -> str:
        """sha256 of the canonical JSON snapshot (plus command-specific extras)"""
        payload = {"config": self.get_config_snapshot(), "extra": extra or {}}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _flatten(self, table: dict, prefix: str = "") -> dict:
        flat = {}
        for key, value in table.items():
            dotted = f"{prefix}{key}"
            if isinstance(value, dict):
                flat.update(self._flatten(value, f"{dotted}."))
            else:
                flat[dotted] = value
        return flat

    def _env_name(self, key: str) -> str:
        return ENV_PREFIX + key.replace(".", "_").upper()

    def _coerce(self, key: str, value):
        """Convert value to the declared type of key"""
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                if isinstance(value, bool):
                    return value
                text = str(value).strip().lower()
                if text in ("true", "1", "yes"):
                    return True
                if text in ("false", "0", "no"):
                    return False
                raise ValueError(f"not a boolean: {value!r}")
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(f"not an integer: {value!r}")
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                if isinstance(value, str):
                    value = json.loads(value) if value.strip().startswith("[") else [
                        float(part) for part in value.split(",") if part.strip()
                    ]
                return [float(item) for item in value]
            return str(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(key, f"invalid value {value!r} ({str(e)})")
