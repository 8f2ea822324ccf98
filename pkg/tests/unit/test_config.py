import os
import tempfile

import pytest
import yaml
from pydantic import ValidationError

from gradfield.config import RunConfig, load_config, parse_config_text


class TestLoadConfig:
    def test_yaml_fixture(self):
        # Arrange
        fpath = "tests/fixtures/run_config.yaml"

        # Act
        cfg = load_config(fpath)

        # Assert
        assert cfg.seed == 7
        assert cfg.threads == 2
        assert cfg.mcmc.n_retained == 20
        assert cfg.priors.pinned() == {"phi_x": 1.05}
        assert (cfg.sensitivity.grid.nx, cfg.sensitivity.grid.ny) == (3, 2)
        assert cfg.inputs.data == os.path.abspath("tests/fixtures/obs_small.csv")

    def test_flat_file_matches_yaml(self):
        # Act
        from_yaml = load_config("tests/fixtures/run_config.yaml")
        from_flat = load_config("tests/fixtures/run_config.cfg")

        # Assert
        assert from_flat == from_yaml

    def test_directions_are_normalized(self):
        # Act
        cfg = load_config("tests/fixtures/run_config.cfg")

        # Assert
        u = cfg.sensitivity.directions[1]
        assert u.u1**2 + u.u2**2 == pytest.approx(1.0, abs=1e-15)

    def test_defaults_without_file(self):
        # Act
        cfg = load_config(None)

        # Assert
        assert cfg.mcmc.n_retained == 2000
        assert cfg.simulate.n_full == 2000
        assert cfg.simulate.n_obs == 200
        assert cfg.sensitivity.grid.window == (6.5, 8.5, 5.5, 7.5)

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_config("tests/fixtures/no_such_config.yaml")

    def test_json_is_accepted(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "run.json")
            with open(path, "w") as handle:
                handle.write('{"seed": 3, "mcmc": {"iterations": 50, "burn_in": 10, "thin": 1}}')

            # Act
            cfg = load_config(path)

            # Assert
            assert cfg.seed == 3
            assert cfg.mcmc.n_retained == 40


class TestValidation:
    def test_subset_larger_than_full_rejected(self):
        with pytest.raises(ValidationError, match="n_obs"):
            parse_config_text("simulate.n_full = 100\nsimulate.n_obs = 200\n")

    def test_missing_input_path_rejected(self):
        with pytest.raises(FileNotFoundError):
            parse_config_text("inputs.data = missing.csv\n", base_dir="tests/fixtures")

    def test_unknown_parameter_pinned(self):
        with pytest.raises(ValidationError):
            parse_config_text(yaml.safe_dump({"priors": {"fixed": {"gamma": 1.0}}}))

    def test_malformed_flat_line(self):
        with pytest.raises(ValueError):
            parse_config_text("seed = 1\nthis is not a setting\n")

    def test_conflicting_flat_keys(self):
        with pytest.raises(ValueError, match="conflicts"):
            parse_config_text("mcmc = 1\nmcmc.thin = 2\n")

    def test_seed_range(self):
        with pytest.raises(ValidationError):
            RunConfig(seed=-1)
