"""
Tests for configuration loader functionality.
"""
import pytest
import yaml
import tempfile
import os
from pathlib import Path
from src.core.config_loader import ConfigLoader, SolverConfig, THREADS_ENV, resolve_threads


@pytest.fixture
def sample_config():
    """Sample configuration for testing."""
    return {
        "S": [-1, 0, 1],
        "K_normal": 3,
        "L_angle": 2,
        "eps": 1e-4,
        "gamma": 1e-2,
        "kam": {"sigma": 2, "max_steps": 6},
        "measure": {"n_samples": 512, "sweep": {"parameter": "gamma", "start": 1e-3, "stop": 1e-1, "num": 4}},
    }


@pytest.fixture
def config_file(sample_config):
    """Create a temporary config file."""
    with tempfile.NamedTemporaryFile(mode='w', suffix='.yml', delete=False) as f:
        yaml.dump(sample_config, f)
    yield f.name
    os.unlink(f.name)


class TestConfigLoader:
    """Test cases for ConfigLoader."""

    def test_load_valid_config(self, config_file, sample_config):
        loader = ConfigLoader()
        config = loader.load_config(config_file)

        assert isinstance(config, SolverConfig)
        assert config.S == sample_config["S"]
        assert config.kam.sigma == 2
        assert config.measure.sweep.num == 4
        assert loader.get_config() is config

    def test_defaults_are_filled(self, config_file):
        config = ConfigLoader().load_config(config_file)

        assert config.tau == 7.0
        assert config.angle_grid == 5
        assert config.kam.s0 == 2
        assert config.measure.L_max == 2
        assert config.perturbation.grid_size % 2 == 0
        assert config.perturbation.grid_size >= 4 * (config.K_normal + 1)

    def test_load_nonexistent_file(self):
        loader = ConfigLoader()

        with pytest.raises(FileNotFoundError):
            loader.load_config("nonexistent.yml")

    def test_invalid_yaml(self):
        with tempfile.NamedTemporaryFile(mode='w', suffix='.yml', delete=False) as f:
            f.write("S: [0, 1\nK_normal: 3")
            f.flush()

            loader = ConfigLoader()
            with pytest.raises(ValueError, match="Invalid YAML"):
                loader.load_config(f.name)

        os.unlink(f.name)

    @pytest.mark.parametrize("override,message", [
        ({"S": [0, 1]}, "symmetric"),
        ({"S": [-1, 1]}, "contain 0"),
        ({"gamma": 0.3}, "gamma"),
        ({"eps": -1.0}, "eps"),
        ({"K_normal": 1}, "K_normal"),
        ({"angle_grid": 6}, "angle_grid"),
        ({"omega": [1.0, 2.0]}, "omega"),
        ({"measure": {"linkage_exponent": 0.3}}, "linkage_exponent"),
        ({"kam": {"sigma": 1}}, "sigma"),
        ({"nash_moser": {"chi": 2.0}}, "chi"),
    ])
    def test_invalid_values(self, sample_config, override, message):
        sample_config.update(override)
        loader = ConfigLoader()

        with pytest.raises(ValueError, match="Configuration validation error") as excinfo:
            loader.load_dict(sample_config)
        assert message in str(excinfo.value)

    def test_validate_config(self, sample_config):
        loader = ConfigLoader()

        assert loader.validate_config(sample_config) is True

        invalid_config = sample_config.copy()
        del invalid_config["gamma"]
        assert loader.validate_config(invalid_config) is False

    def test_accessors_need_a_config(self):
        loader = ConfigLoader()

        with pytest.raises(ValueError, match="not loaded"):
            loader.get_kam_config()
        with pytest.raises(ValueError, match="No configuration loaded"):
            loader.effective_config()

    def test_export_round_trip(self, config_file):
        loader = ConfigLoader()
        config = loader.load_config(config_file)

        with tempfile.NamedTemporaryFile(mode='w', suffix='.yml', delete=False) as f:
            out = f.name
        loader.export_config(out)
        reloaded = ConfigLoader().load_config(out)
        os.unlink(out)

        assert reloaded.model_dump() == config.model_dump()

    def test_nash_moser_constants(self, sample_config):
        config = ConfigLoader().load_dict(sample_config)
        nm = config.nash_moser

        assert nm.eta1 == 7
        assert nm.beta1 == 14
        assert nm.alpha1 == pytest.approx(8.0 / 3.0)


@pytest.mark.parametrize("name", sorted(
    p.name for p in (Path(__file__).resolve().parents[1] / "configs" / "examples").glob("*.yml")
))
def test_example_configs_load(name):
    path = Path(__file__).resolve().parents[1] / "configs" / "examples" / name
    config = ConfigLoader().load_config(str(path))
    assert 0 in config.S


class TestThreads:
    """Test cases for the thread cap resolution."""

    def test_cli_flag_wins(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "6")
        assert resolve_threads(3) == 3

    def test_environment_then_config(self, monkeypatch, sample_config):
        sample_config["runtime"] = {"threads": 5}
        config = SolverConfig(**sample_config)

        monkeypatch.setenv(THREADS_ENV, "2")
        assert resolve_threads(None, config) == 2
        monkeypatch.delenv(THREADS_ENV)
        assert resolve_threads(None, config) == 5
        assert resolve_threads(None) == 1


if __name__ == "__main__":
    pytest.main([__file__])
