"""Tests for services.config_manager: precedence, coercion and the content hash."""

import pytest

from services.config_manager import DEFAULTS, ConfigError, ConfigManager


def _write(tmp_path, text: str, name: str = "run.toml"):
    """Write a config file and return its path."""
    path = tmp_path / name
    path.write_text(text)
    return path


class TestResolution:
    def test_defaults(self):
        """Unset keys resolve to their declared defaults."""
        config = ConfigManager()
        assert config.get_config("model.preset") == "twist-1-1"
        assert config.get_config("kam.L") == 2
        assert config.get_config("kam.gamma") == DEFAULTS["kam.gamma"]

    def test_singleton(self):
        """Construction returns the same instance until reset."""
        assert ConfigManager() is ConfigManager()

    def test_file_over_environment(self, tmp_path, monkeypatch):
        """A config file wins over KAM_* environment variables."""
        monkeypatch.setenv("KAM_MODEL_EPSILON", "1e-4")
        config = ConfigManager()
        assert config.get_config("model.epsilon") == pytest.approx(1e-4)
        config.load_file(_write(tmp_path, "[model]\nepsilon = 1e-5\n"))
        assert config.get_config("model.epsilon") == pytest.approx(1e-5)

    def test_runtime_over_file(self, tmp_path):
        """--set overrides win over the file."""
        config = ConfigManager()
        config.load_file(_write(tmp_path, "[kam]\nmax_steps = 5\n"))
        config.update_from_overrides(["kam.max_steps=7"])
        assert config.get_config("kam.max_steps") == 7

    def test_json_file(self, tmp_path):
        """JSON files are read through the same flattening."""
        config = ConfigManager()
        config.load_file(_write(tmp_path, '{"model": {"xi": [0.4]}}', "run.json"))
        assert config.get_config("model.xi") == [0.4]


class TestCoercion:
    def test_list_from_comma_string(self):
        """List keys accept comma-separated strings."""
        config = ConfigManager()
        config.set_config("measure.gammas", "0.1, 0.2")
        assert config.get_config("measure.gammas") == [0.1, 0.2]

    def test_list_from_json_string(self):
        config = ConfigManager()
        config.set_config("verify.t_grid", "[0.05, 0.1]")
        assert config.get_config("verify.t_grid") == [0.05, 0.1]

    def test_bool(self):
        config = ConfigManager()
        config.set_config("kam.track_remainder", "yes")
        assert config.get_config("kam.track_remainder") is True

    def test_non_integer_rejected(self):
        """A fractional value for an integer key is a ConfigError naming the key."""
        with pytest.raises(ConfigError) as info:
            ConfigManager().set_config("kam.L", 2.5)
        assert info.value.key == "kam.L"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ConfigManager().set_config("kam.nonexistent", 1)

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            ConfigManager().update_from_overrides(["kam.L"])

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager().load_file(_write(tmp_path, "[kam\nL = 2"))


class TestSnapshot:
    def test_sections(self):
        """The snapshot groups every declared key under its section."""
        snapshot = ConfigManager().get_config_snapshot()
        assert set(snapshot) == {key.split(".")[0] for key in DEFAULTS}
        assert snapshot["kam"]["K0"] == 10

    def test_hash_tracks_content(self):
        """The hash is stable for equal configs and changes with any value."""
        config = ConfigManager()
        first = config.content_hash({"command": "kam-run"})
        assert config.content_hash({"command": "kam-run"}) == first
        assert config.content_hash({"command": "iterate-map"}) != first
        config.set_config("model.t", 0.05)
        assert config.content_hash({"command": "kam-run"}) != first
