import json
import os
import tempfile

import numpy as np
import pytest

from gradfield.gradient import PredictionTargets, composition_sample
from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.io import (
    GRADIENT_COLUMNS,
    read_chain,
    read_dataset,
    read_lgcp_chain,
    read_pattern,
    read_surface,
    validate_filepath,
    write_chain,
    write_dataset,
    write_gradient_draws,
    write_lgcp_chain,
    write_pattern,
    write_surface,
)
from gradfield.lgcp import LgcpChain, LgcpSample, PointPattern
from gradfield.model import Dataset, McmcConfig, PosteriorChain
from tests.conftest import create_pattern_events


class TestValidateFilepath:
    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            validate_filepath("tests/fixtures/does_not_exist.csv")

    def test_directory(self):
        with pytest.raises(IsADirectoryError):
            validate_filepath("tests/fixtures")


class TestDatasetFiles:
    def test_values_survive_exactly(self, small_data):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "obs.csv")

            # Act
            write_dataset(path, small_data)
            back = read_dataset(path)

            # Assert
            np.testing.assert_array_equal(back.locations, small_data.locations)
            np.testing.assert_array_equal(back.x, small_data.x)
            np.testing.assert_array_equal(back.y, small_data.y)

    def test_covariate_only_file(self, small_data):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "x.csv")
            write_dataset(path, Dataset(locations=small_data.locations, x=small_data.x))

            # Act
            back = read_dataset(path)

            # Assert
            assert back.y is None

    def test_missing_columns_rejected(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "bad.csv")
            with open(path, "w") as handle:
                handle.write("s1,x\n0,1\n1,2\n2,3\n")

            # Act & Assert
            with pytest.raises(ValueError, match="s2"):
                read_dataset(path)


class TestChainFiles:
    def test_chain_with_sidecar(self, truth_chain):
        # Arrange
        chain = truth_chain.model_copy(
            update={
                "config": McmcConfig(iterations=30, burn_in=18, thin=2, seed=4),
                "seed": 4,
                "acceptance": {"x": 0.4},
            }
        )

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "chain.csv")

            # Act
            write_chain(path, chain)
            back = read_chain(path)
            with open(os.path.join(directory, "chain.json")) as handle:
                meta = json.load(handle)

            # Assert
            np.testing.assert_array_equal(back.as_array(), chain.as_array())
            assert back.config.burn_in == 18
            assert back.acceptance == {"x": 0.4}
            assert meta["seed"] == 4

    def test_iteration_column(self, truths):
        # Arrange
        chain = PosteriorChain(samples=[truths] * 3, config=McmcConfig(iterations=16, burn_in=10, thin=2))

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "chain.csv")

            # Act
            write_chain(path, chain)
            with open(path) as handle:
                rows = handle.read().splitlines()

            # Assert
            assert rows[0].startswith("iter,alpha0")
            assert [row.split(",")[0] for row in rows[1:]] == ["12", "14", "16"]


class TestGradientDraws:
    def test_one_row_per_draw_and_target(self, truth_chain, small_data):
        # Arrange
        targets = PredictionTargets.at([[1.0, 1.5], [3.0, 2.0]], level=False)
        result = composition_sample(truth_chain, small_data, targets, seed=1)

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "gradients.csv")

            # Act
            write_gradient_draws(path, result)
            with open(path) as handle:
                rows = handle.read().splitlines()

            # Assert
            assert rows[0] == ",".join(GRADIENT_COLUMNS)
            assert len(rows) == 1 + len(truth_chain) * 2
            # levels were not requested
            assert rows[1].split(",")[3:5] == ["", ""]


class TestSurfaceFiles:
    def test_grid_header_and_missing_cells(self):
        # Arrange
        grid = GridSpec(window=(6.5, 8.5, 5.5, 7.5), nx=2, ny=2)
        surface = SurfaceGrid(grid=grid, values=[0.1, np.nan, -2.5, 1 / 3], label="posterior median")

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "surface.csv")

            # Act
            write_surface(path, surface)
            back = read_surface(path)

            # Assert
            assert back.grid == grid
            assert back.label == "posterior median"
            np.testing.assert_array_equal(back.missing, surface.missing)
            np.testing.assert_array_equal(back.values[~back.missing], surface.values[~surface.missing])

    def test_header_required(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "surface.csv")
            with open(path, "w") as handle:
                handle.write("s1,s2,value\n0,0,1\n")

            # Act & Assert
            with pytest.raises(ValueError, match="grid header"):
                read_surface(path)


class TestPatternFiles:
    def test_window_from_header(self):
        # Arrange
        window = (0.0, 10.0, 0.0, 5.0)
        pattern = PointPattern(events=create_pattern_events(25, window), window=window)

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "pattern.csv")

            # Act
            write_pattern(path, pattern)
            back = read_pattern(path)

            # Assert
            assert back.window == window
            np.testing.assert_array_equal(back.events, pattern.events)

    def test_window_required(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "pattern.csv")
            with open(path, "w") as handle:
                handle.write("s1,s2\n0.5,0.5\n")

            # Act & Assert
            with pytest.raises(ValueError, match="window"):
                read_pattern(path)

            assert read_pattern(path, window=(0.0, 1.0, 0.0, 1.0)).n == 1


class TestLgcpChainFiles:
    @pytest.fixture
    def chain(self):
        grid = GridSpec(window=(0.0, 2.0, 0.0, 2.0), nx=2, ny=2)
        samples = [
            LgcpSample(beta0=-1.0, beta1=0.3 * k, sigma2_z=0.5 + k, w=np.arange(4.0) / (k + 3))
            for k in range(3)
        ]
        return LgcpChain(samples=samples, grid=grid, phi_z=0.7, config=McmcConfig(iterations=8, burn_in=5, thin=1))

    def test_fields_survive(self, chain):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "lgcp_chain.csv")
            field_path = os.path.join(directory, "lgcp_field.csv")

            # Act
            write_lgcp_chain(path, chain, field_path)
            back = read_lgcp_chain(path, field_path)

            # Assert
            np.testing.assert_array_equal(back.as_array(), chain.as_array())
            np.testing.assert_array_equal(back.fields(), chain.fields())
            assert back.grid == chain.grid
            assert back.phi_z == 0.7

    def test_thinned_fields_cannot_be_reloaded(self, chain):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "lgcp_chain.csv")
            field_path = os.path.join(directory, "lgcp_field.csv")
            write_lgcp_chain(path, chain, field_path, field_thin=2)

            # Act & Assert
            with pytest.raises(ValueError, match="thinned"):
                read_lgcp_chain(path, field_path)
