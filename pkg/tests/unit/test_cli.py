import json
import os
import tempfile

import pandas as pd
from typer.testing import CliRunner

import gradfield.kernel
from gradfield.checksum import read_manifest
from gradfield.cli import app

runner = CliRunner()


def _write_config(directory: str, lines) -> str:
    path = os.path.join(directory, "run.cfg")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
    return path


def _rows(path: str) -> int:
    return len(pd.read_csv(path, comment="#"))


class TestSimulate:
    def test_default_sizes_and_identical_reruns(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            first = os.path.join(directory, "a")
            second = os.path.join(directory, "b")

            # Act
            result_a = runner.invoke(app, ["simulate", "--seed", "5", "--out", first])
            result_b = runner.invoke(app, ["simulate", "--seed", "5", "--out", second])

            # Assert
            assert result_a.exit_code == 0, result_a.output
            assert result_b.exit_code == 0, result_b.output
            assert _rows(os.path.join(first, "full.csv")) == 2000
            assert _rows(os.path.join(first, "obs.csv")) == 200

            for name in ("full.csv", "obs.csv", "manifest.json"):
                with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                    assert a.read() == b.read(), name

            manifest = read_manifest(first)
            assert manifest.command == "simulate"
            assert [e.path for e in manifest.files] == ["full.csv", "obs.csv"]

    def test_different_seed_changes_output(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            config = _write_config(directory, ["simulate.n_full = 50", "simulate.n_obs = 10"])

            # Act
            runner.invoke(app, ["simulate", "--config", config, "--seed", "1", "--out", os.path.join(directory, "a")])
            runner.invoke(app, ["simulate", "--config", config, "--seed", "2", "--out", os.path.join(directory, "b")])

            # Assert
            with open(os.path.join(directory, "a", "obs.csv")) as a, open(os.path.join(directory, "b", "obs.csv")) as b:
                assert a.read() != b.read()

    def test_missing_config_file(self):
        # Act
        result = runner.invoke(app, ["simulate", "--config", "tests/fixtures/no_such_config.yaml"])

        # Assert
        assert result.exit_code == 2


class TestGpPipeline:
    def test_fit_then_surfaces(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            fixture = "tests/fixtures/run_config.yaml"

            # Act
            fit = runner.invoke(app, ["fit-gp", "--config", fixture, "--out", directory])

            config = _write_config(
                directory,
                [
                    "seed = 7",
                    "sensitivity.grid.window = [1.0, 3.0, 1.0, 3.0]",
                    "sensitivity.grid.nx = 3",
                    "sensitivity.grid.ny = 2",
                    "sensitivity.directions = [[1, 0], [0.8508, -0.5255]]",
                    f"inputs.data = {os.path.abspath('tests/fixtures/obs_small.csv')}",
                    "inputs.chain = chain.csv",
                ],
            )
            sens = runner.invoke(app, ["sensitivity", "--config", config, "--out", directory, "--threads", "2"])
            disc = runner.invoke(app, ["discrepancy", "--config", config, "--out", directory])
            grads = runner.invoke(app, ["gradients", "--config", config, "--out", directory])

            # Assert
            assert fit.exit_code == 0, fit.output
            assert sens.exit_code == 0, sens.output
            assert disc.exit_code == 0, disc.output
            assert grads.exit_code == 0, grads.output

            assert _rows(os.path.join(directory, "chain.csv")) == 20
            with open(os.path.join(directory, "chain.json")) as handle:
                assert json.load(handle)["seed"] == 7

            for name in ("sensitivity_0", "sensitivity_1", "discrepancy"):
                assert _rows(os.path.join(directory, f"{name}.csv")) == 6
                assert os.path.isfile(os.path.join(directory, f"{name}.ppm"))

            assert _rows(os.path.join(directory, "gradients.csv")) == 20 * 6
            assert read_manifest(directory).command == "gradients"

    def test_grid_outside_data_window_rejected(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            runner.invoke(app, ["fit-gp", "--config", "tests/fixtures/run_config.yaml", "--out", directory])
            config = _write_config(
                directory,
                [
                    "sensitivity.grid.window = [6.5, 8.5, 5.5, 7.5]",
                    f"inputs.data = {os.path.abspath('tests/fixtures/obs_small.csv')}",
                    "inputs.chain = chain.csv",
                ],
            )

            # Act
            result = runner.invoke(app, ["sensitivity", "--config", config, "--out", directory])

            # Assert
            assert result.exit_code == 2


class TestLgcpPipeline:
    def test_simulate_fit_and_intensity_sensitivity(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            sim_dir = os.path.join(directory, "sim")
            fit_dir = os.path.join(directory, "fit")
            simulate_config = _write_config(
                directory,
                [
                    "simulate.kind = lgcp",
                    "simulate.lgcp.grid = {window: [0, 20, 0, 20], nx: 8, ny: 8}",
                    "simulate.lgcp.beta0 = 0.0",
                    "simulate.lgcp.phi_z = 0.5",
                    "simulate.lgcp.covariate.phi_x = 0.3",
                    "simulate.lgcp.n_covariate_obs = 30",
                ],
            )

            # Act
            sim = runner.invoke(app, ["simulate", "--config", simulate_config, "--seed", "3", "--out", sim_dir])

            fit_config = _write_config(
                directory,
                [
                    "seed = 4",
                    "mcmc.iterations = 40",
                    "mcmc.burn_in = 20",
                    "mcmc.thin = 1",
                    "lgcp.grid = {window: [0, 20, 0, 20], nx: 4, ny: 4}",
                    "lgcp.phi_z = 0.5",
                    "inputs.pattern = sim/pattern.csv",
                    "inputs.covariate_grid = sim/covariate_grid.csv",
                ],
            )
            fit = runner.invoke(app, ["fit-lgcp", "--config", fit_config, "--out", fit_dir])

            sens_config = _write_config(
                directory,
                [
                    "seed = 4",
                    "sensitivity.grid = null",
                    "sensitivity.directions = [[0.8508, -0.5255]]",
                    "inputs.lgcp_chain = fit/lgcp_chain.csv",
                    "inputs.lgcp_field = fit/lgcp_field.csv",
                    "inputs.covariate_chain = fit/covariate_chain.csv",
                    "inputs.covariate_grid = fit/covariate_fit_grid.csv",
                ],
            )
            sens = runner.invoke(app, ["sensitivity", "--model", "lgcp", "--config", sens_config, "--out", fit_dir])

            # Assert
            assert sim.exit_code == 0, sim.output
            assert fit.exit_code == 0, fit.output
            assert sens.exit_code == 0, sens.output

            for name in ("pattern.csv", "covariate_grid.csv", "covariate_obs.csv", "intensity.csv"):
                assert os.path.isfile(os.path.join(sim_dir, name))

            assert _rows(os.path.join(fit_dir, "lgcp_chain.csv")) == 20
            assert _rows(os.path.join(fit_dir, "lgcp_field.csv")) == 20 * 16
            assert _rows(os.path.join(fit_dir, "intensity.csv")) == 16
            # interior vertices of the 4 x 4 fit grid
            assert _rows(os.path.join(fit_dir, "sensitivity_0.csv")) == 9

    def test_window_mismatch_rejected(self):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            sim_dir = os.path.join(directory, "sim")
            runner.invoke(
                app,
                [
                    "simulate",
                    "--config",
                    _write_config(directory, ["simulate.kind = lgcp", "simulate.lgcp.grid = {window: [0, 20, 0, 20], nx: 4, ny: 4}"]),
                    "--out",
                    sim_dir,
                ],
            )
            config = _write_config(
                directory,
                ["inputs.pattern = sim/pattern.csv", "inputs.covariate_grid = sim/covariate_grid.csv"],
            )

            # Act
            result = runner.invoke(app, ["fit-lgcp", "--config", config, "--out", directory])

            # Assert
            assert result.exit_code == 2


class TestValidate:
    def test_selected_checks_pass(self):
        with tempfile.TemporaryDirectory() as directory:
            # Act
            result = runner.invoke(
                app,
                ["validate", "--check", "local_block_entries", "--check", "angle_density_uniform_limit", "--out", directory],
            )

            # Assert
            assert result.exit_code == 0, result.output
            with open(os.path.join(directory, "validation.json")) as handle:
                report = json.load(handle)
            assert [r["name"] for r in report["checks"]] == ["local_block_entries", "angle_density_uniform_limit"]

    def test_sign_error_in_kernel_gradient_fails(self, monkeypatch):
        # Arrange
        correct = gradfield.kernel.grad_matern32
        monkeypatch.setattr(gradfield.kernel, "grad_matern32", lambda d, p: -correct(d, p))

        with tempfile.TemporaryDirectory() as directory:
            # Act
            result = runner.invoke(app, ["validate", "--check", "kernel_gradient_fd", "--out", directory])

            # Assert
            assert result.exit_code == 1
            assert "kernel_gradient_fd" in result.output

    def test_unknown_check_rejected(self):
        with tempfile.TemporaryDirectory() as directory:
            # Act
            result = runner.invoke(app, ["validate", "--check", "no_such_check", "--out", directory])

            # Assert
            assert result.exit_code == 2
