import logging
import os
from functools import partial
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
import rich
import typer
from pydantic import ValidationError
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from gradfield.checksum import write_manifest
from gradfield.config import RunConfig, load_config
from gradfield.errors import NonIdentifiableError
from gradfield.gradient import CompositionResult, PredictionTargets, composition_sample
from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.heatmap import surface_heatmap
from gradfield.io import (
    read_chain,
    read_dataset,
    read_lgcp_chain,
    read_pattern,
    read_surface,
    write_chain,
    write_dataset,
    write_gradient_draws,
    write_lgcp_chain,
    write_pattern,
    write_surface,
)
from gradfield.lgcp import (
    covariate_surface,
    fit_lgcp,
    intensity_composition,
    intensity_discrepancy_surface,
    intensity_gradient_surface,
    intensity_surface,
    minimum_contrast_fit,
    simulate_covariate,
    simulate_lgcp,
)
from gradfield.model import Dataset, PosteriorChain, fit_mcmc, simulate_bivariate_gp, uniform_locations
from gradfield.processes import discrepancy_surface, sensitivity_surface
from gradfield.utils import derive_seeds, make_rng
from gradfield.validation import run_validation

CONFIG_HELP = (
    "Path to a YAML/JSON file or a flat 'key = value' file with dotted keys "
    "such as 'mcmc.iterations = 10500', 'sensitivity.directions = [[1, 0]]' "
    "or 'inputs.data = obs.csv'. Relative input paths resolve against the file."
)

app = typer.Typer(
    help="Gradient-based sensitivity and discrepancy surfaces for spatial regressions.",
    no_args_is_help=True,
)

ConfigOption = typer.Option(None, "--config", help=CONFIG_HELP)
SeedOption = typer.Option(None, "--seed", help="Master seed. Overrides the config file.")
OutOption = typer.Option(None, "--out", help="Output directory. Overrides the config file.")
ThreadsOption = typer.Option(
    None,
    "--threads",
    envvar="GRADFIELD_THREADS",
    help="Worker threads for composition sampling.",
)
VerboseOption = typer.Option(False, "--verbose/--quiet", help="Show progress bars and info logs.")
ModelOption = typer.Option("gp", "--model", help="Surface model: 'gp' for the bivariate process, 'lgcp' for the Cox process.")


class Run:
    """Resolved settings of one command plus the files it wrote."""

    def __init__(self, command: str, cfg: RunConfig, verbose: bool):
        self.command = command
        self.cfg = cfg
        self.verbose = verbose
        self.files: List[str] = []
        os.makedirs(cfg.out, exist_ok=True)

    def path(self, name: str) -> str:
        path = os.path.join(self.cfg.out, name)
        self.files.append(path)
        return path

    def add(self, path: str):
        self.files.append(path)

    def finish(self):
        write_manifest(
            self.cfg.out,
            [f for f in self.files if os.path.exists(f)],
            command=self.command,
            seed=self.cfg.seed,
            config=self.cfg.model_dump(mode="json", exclude={"out", "threads"}),
        )
        rich.print(f"[green]✓[/green] {self.command}: wrote {len(self.files)} files to {self.cfg.out}")


def _configure_logging(verbose: bool):
    logger = logging.getLogger("gradfield")
    logger.setLevel(logging.INFO if verbose else logging.WARNING)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(RichHandler(show_path=False))


def _start(
    command: str,
    config_path: Optional[str],
    seed: Optional[int],
    out: Optional[str],
    threads: Optional[int],
    verbose: bool,
) -> Run:
    """Loads the configuration, applies the command-line overrides and prepares the output directory."""

    _configure_logging(verbose)

    try:
        cfg = load_config(config_path)
        overrides = {k: v for k, v in {"seed": seed, "out": out, "threads": threads}.items() if v is not None}
        cfg = RunConfig(**{**cfg.model_dump(), **overrides})
    except (FileNotFoundError, IsADirectoryError) as e:
        raise typer.BadParameter(str(e))
    except ValidationError as e:
        raise typer.BadParameter(f"Invalid configuration:\n{e}")

    return Run(command, cfg, verbose)


def _require(value: Optional[str], key: str) -> str:
    if value is None:
        raise typer.BadParameter(f"The configuration must set '{key}'.")
    return value


def _panel(title: str, lines: List[str]):
    rich.print(Panel("\n".join(lines), title=f"[bold]{title}[/bold]", expand=False))


def _inside(inner: Tuple[float, ...], outer: Tuple[float, ...]) -> bool:
    return outer[0] <= inner[0] and inner[1] <= outer[1] and outer[2] <= inner[2] and inner[3] <= outer[3]


def _data_window(data: Dataset) -> Tuple[float, float, float, float]:
    lo, hi = data.locations.min(axis=0), data.locations.max(axis=0)
    return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))


def _covariate_on(grid: GridSpec, surface: SurfaceGrid) -> SurfaceGrid:
    """The covariate at the centroids of `grid`, interpolated when the grids differ."""

    if surface.grid == grid:
        return surface

    values = surface.interpolate(grid.centroids)
    if np.isnan(values).any():
        raise typer.BadParameter("The covariate grid does not cover the Cox process grid.")
    return SurfaceGrid(grid=grid, values=values, label=surface.label)


@app.command()
def simulate(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
):
    """
    Simulates a bivariate process realization and its observed subset, or a Cox process pattern.

    With simulate.kind = gp, writes full.csv (simulate.n_full sites) and
    obs.csv (a random subset of simulate.n_obs sites). With simulate.kind =
    lgcp, writes pattern.csv, covariate_grid.csv, covariate_obs.csv and
    intensity.csv.
    """

    run = _start("simulate", config_path, seed, out, threads, verbose)
    sim = run.cfg.simulate
    seeds = derive_seeds(run.cfg.seed, 3)

    if sim.kind == "gp":
        _panel("Simulate", [f"Sites: {sim.n_full} ({sim.n_obs} observed)", f"Window: {sim.window}", f"Seed: {run.cfg.seed}"])

        locations = uniform_locations(sim.n_full, sim.window, make_rng(seeds[0]))
        full = simulate_bivariate_gp(locations, sim.theta, seed=seeds[1])
        subset = np.sort(make_rng(seeds[2]).choice(sim.n_full, size=sim.n_obs, replace=False))

        write_dataset(run.path("full.csv"), full)
        write_dataset(run.path("obs.csv"), full.subset(subset))
    else:
        cox = sim.lgcp
        _panel("Simulate", [f"Cox process on {cox.grid.nx} x {cox.grid.ny} cells", f"Window: {cox.grid.window}", f"Seed: {run.cfg.seed}"])

        x_grid, x_data = simulate_covariate(cox.grid, cox.covariate, seeds[0], n_obs=cox.n_covariate_obs)
        realization = simulate_lgcp(
            cox.grid, x_grid, cox.beta0, cox.beta1, cox.sigma2_z, cox.phi_z, seed=seeds[1]
        )
        logging.getLogger("gradfield").info(
            "Simulated %d events (expected %.1f)", realization.pattern.n, realization.expected_count
        )

        write_pattern(run.path("pattern.csv"), realization.pattern)
        write_surface(run.path("covariate_grid.csv"), x_grid)
        write_surface(run.path("intensity.csv"), realization.intensity)
        if x_data is not None:
            write_dataset(run.path("covariate_obs.csv"), x_data)

    run.finish()


def _chain_table(chain: PosteriorChain) -> Table:
    table = Table(title="Posterior summary")
    table.add_column("Parameter")
    for column in ("0.025", "mean", "0.975"):
        table.add_column(column, justify="right")

    summary = chain.summary()
    for name, row in summary.iterrows():
        table.add_row(str(name), *(f"{v:.4f}" for v in row))
    return table


@app.command("fit-gp")
def fit_gp(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
):
    """
    Fits the bivariate process to inputs.data by adaptive Metropolis.

    A dataset without a y column fits the covariate alone and writes
    covariate_chain.csv; otherwise writes chain.csv. Each chain has a JSON
    sidecar with its settings and acceptance rates.
    """

    run = _start("fit-gp", config_path, seed, out, threads, verbose)
    data = read_dataset(_require(run.cfg.inputs.data, "inputs.data"))

    chain = fit_mcmc(data, run.cfg.priors, run.cfg.mcmc_for(run.cfg.seed), verbose=verbose)
    name = "covariate_chain.csv" if chain.x_only else "chain.csv"
    write_chain(run.path(name), chain)
    run.add(os.path.splitext(run.files[-1])[0] + ".json")

    rich.print(_chain_table(chain))
    run.finish()


@app.command("fit-lgcp")
def fit_lgcp_command(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
):
    """
    Fits the Cox process to inputs.pattern on lgcp.grid.

    The covariate comes from inputs.covariate_grid, or is kriged from the
    scattered observations in inputs.covariate using inputs.covariate_chain
    (fitted here when absent). With lgcp.phi_z unset the latent decay is
    estimated by minimum contrast. Writes lgcp_chain.csv, lgcp_field.csv,
    covariate_chain.csv, covariate_fit_grid.csv and the posterior median
    intensity surfaces with heatmaps.
    """

    run = _start("fit-lgcp", config_path, seed, out, threads, verbose)
    cfg = run.cfg
    grid = cfg.lgcp.grid
    seeds = derive_seeds(cfg.seed, 2)

    pattern = read_pattern(_require(cfg.inputs.pattern, "inputs.pattern"))
    if tuple(grid.window) != tuple(pattern.window):
        raise typer.BadParameter(f"lgcp.grid window {grid.window} differs from the pattern window {pattern.window}.")

    x_chain = read_chain(cfg.inputs.covariate_chain) if cfg.inputs.covariate_chain else None
    if cfg.inputs.covariate_grid:
        x_grid = _covariate_on(grid, read_surface(cfg.inputs.covariate_grid))
        x_data = Dataset(locations=grid.centroids, x=x_grid.values)
    elif cfg.inputs.covariate:
        x_data = read_dataset(cfg.inputs.covariate)
        x_grid = None
    else:
        raise typer.BadParameter("The configuration must set 'inputs.covariate_grid' or 'inputs.covariate'.")

    if x_chain is None:
        x_chain = fit_mcmc(
            Dataset(locations=x_data.locations, x=x_data.x),
            cfg.priors,
            cfg.mcmc_for(seeds[0]),
            verbose=verbose,
        )
    write_chain(run.path("covariate_chain.csv"), x_chain)
    run.add(os.path.join(cfg.out, "covariate_chain.json"))

    if x_grid is None:
        x_grid = covariate_surface(x_chain, x_data, grid)
    write_surface(run.path("covariate_fit_grid.csv"), x_grid)

    phi_z = cfg.lgcp.phi_z
    if phi_z is None:
        try:
            estimate = minimum_contrast_fit(pattern, bounds=cfg.lgcp.phi_bounds)
        except NonIdentifiableError as e:
            raise typer.BadParameter(f"{e} Set lgcp.phi_z explicitly.")
        phi_z = estimate.phi
        with open(run.path("mincontrast.json"), "w") as handle:
            handle.write(estimate.model_dump_json(indent=2) + "\n")

    _panel(
        "Cox process fit",
        [f"Events: {pattern.n}", f"Grid: {grid.nx} x {grid.ny}", f"phi_z: {phi_z:.4g}", f"Seed: {cfg.seed}"],
    )

    chain = fit_lgcp(pattern, x_grid, grid, phi_z, cfg.lgcp.priors, cfg.mcmc_for(seeds[1]), verbose=verbose)
    write_lgcp_chain(
        run.path("lgcp_chain.csv"), chain, field_path=run.path("lgcp_field.csv"), field_thin=cfg.lgcp.field_thin
    )
    run.add(os.path.join(cfg.out, "lgcp_chain.json"))

    surfaces = intensity_surface(chain, x_grid)
    write_surface(run.path("intensity.csv"), surfaces.intensity)
    write_surface(run.path("log_intensity.csv"), surfaces.log_intensity)
    surface_heatmap(surfaces.intensity, run.path("intensity.ppm"), ramp="sequential", scale=8)

    lo, hi = chain.credible_interval("beta1")
    rich.print(f"beta1 95% interval: [{lo:.4f}, {hi:.4f}]")
    run.finish()


class Composition(NamedTuple):
    """Composition draws over a target grid and the surface builders bound to them."""

    result: CompositionResult
    grid: GridSpec
    sensitivity: Callable[..., SurfaceGrid]
    discrepancy: Callable[[], SurfaceGrid]


def _gp_composition(run: Run) -> Composition:
    cfg = run.cfg
    data = read_dataset(_require(cfg.inputs.data, "inputs.data"))
    chain = read_chain(_require(cfg.inputs.chain, "inputs.chain")).thinned(cfg.sensitivity.max_draws)

    grid = cfg.sensitivity.grid
    if grid is None:
        raise typer.BadParameter("The configuration must set 'sensitivity.grid' for the gp model.")
    if not _inside(grid.window, _data_window(data)):
        raise typer.BadParameter(f"sensitivity.grid window {grid.window} leaves the data window {_data_window(data)}.")

    targets = PredictionTargets.at(grid.centroids, offset_coincident=True)
    _panel("Composition sampling", [f"Posterior draws: {len(chain)}", f"Targets: {len(targets)}", f"Threads: {cfg.threads}"])

    result = composition_sample(
        chain,
        data,
        targets,
        seed=cfg.seed,
        n_workers=cfg.threads,
        mean_only=cfg.sensitivity.mean_only,
        verbose=run.verbose,
    )
    return Composition(
        result,
        grid,
        partial(sensitivity_surface, result, grid),
        partial(discrepancy_surface, result, grid),
    )


def _lgcp_composition(run: Run) -> Composition:
    cfg = run.cfg
    chain = read_lgcp_chain(
        _require(cfg.inputs.lgcp_chain, "inputs.lgcp_chain"),
        _require(cfg.inputs.lgcp_field, "inputs.lgcp_field"),
    )
    x_chain = read_chain(_require(cfg.inputs.covariate_chain, "inputs.covariate_chain"))
    x_grid = _covariate_on(chain.grid, read_surface(_require(cfg.inputs.covariate_grid, "inputs.covariate_grid")))

    targets = cfg.sensitivity.grid or chain.grid.staggered()
    if not _inside(targets.window, chain.grid.window):
        raise typer.BadParameter(f"sensitivity.grid window {targets.window} leaves the Cox process window {chain.grid.window}.")

    _panel("Composition sampling", [f"Cox process draws: {len(chain)}", f"Targets: {targets.n_cells}", f"Threads: {cfg.threads}"])

    result = intensity_composition(
        chain,
        x_chain,
        x_grid,
        targets,
        seed=cfg.seed,
        n_workers=cfg.threads,
        mean_only=cfg.sensitivity.mean_only,
        max_draws=cfg.sensitivity.max_draws,
        verbose=run.verbose,
    )
    return Composition(
        result,
        targets,
        partial(intensity_gradient_surface, chain, x_chain, x_grid, targets=targets, result=result),
        partial(intensity_discrepancy_surface, chain, x_chain, x_grid, targets=targets, result=result),
    )


def _composition(run: Run, model: str) -> Composition:
    if model == "gp":
        return _gp_composition(run)
    elif model == "lgcp":
        return _lgcp_composition(run)
    raise typer.BadParameter(f"Unknown model '{model}'; use 'gp' or 'lgcp'.")


@app.command()
def gradients(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
    model: str = ModelOption,
):
    """Writes joint posterior draws of levels and gradients at the target centroids to gradients.csv."""

    run = _start("gradients", config_path, seed, out, threads, verbose)
    composition = _composition(run, model)
    write_gradient_draws(run.path("gradients.csv"), composition.result)
    run.finish()


@app.command()
def sensitivity(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
    model: str = ModelOption,
):
    """
    Posterior median sensitivity surfaces, one per configured direction.

    For the gp model the ratio is D_u Y / D_u X; for the lgcp model it is
    D_u lambda / D_u X. Writes sensitivity_<i>.csv and sensitivity_<i>.ppm.
    """

    run = _start("sensitivity", config_path, seed, out, threads, verbose)
    composition = _composition(run, model)

    table = Table(title="Sensitivity surfaces")
    for column in ("Direction", "Median of cells", "Negative cells", "Missing cells"):
        table.add_column(column)

    for i, u in enumerate(run.cfg.sensitivity.directions):
        surface = composition.sensitivity(u)

        write_surface(run.path(f"sensitivity_{i}.csv"), surface)
        surface_heatmap(surface, run.path(f"sensitivity_{i}.ppm"), ramp="diverging", scale=8)

        table.add_row(
            f"({u.u1:.4f}, {u.u2:.4f})",
            f"{np.nanmedian(surface.values):.4f}",
            f"{surface.fraction(lambda v: v < 0):.1%}",
            str(int(surface.missing.sum())),
        )

    rich.print(table)
    run.finish()


@app.command()
def discrepancy(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
    model: str = ModelOption,
):
    """Posterior median angular discrepancy surface, written to discrepancy.csv and discrepancy.ppm."""

    run = _start("discrepancy", config_path, seed, out, threads, verbose)
    composition = _composition(run, model)
    surface = composition.discrepancy()

    write_surface(run.path("discrepancy.csv"), surface)
    surface_heatmap(surface, run.path("discrepancy.ppm"), ramp="sequential", limits=(0.0, 2.0), scale=8)
    rich.print(f"Median discrepancy over cells: {np.nanmedian(surface.values):.4f}")
    run.finish()


@app.command()
def mincontrast(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
):
    """Estimates the latent decay of inputs.pattern by K-function minimum contrast; writes mincontrast.json."""

    run = _start("mincontrast", config_path, seed, out, threads, verbose)
    pattern = read_pattern(_require(run.cfg.inputs.pattern, "inputs.pattern"))

    try:
        estimate = minimum_contrast_fit(pattern, bounds=run.cfg.lgcp.phi_bounds)
    except NonIdentifiableError as e:
        rich.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(code=1)

    with open(run.path("mincontrast.json"), "w") as handle:
        handle.write(estimate.model_dump_json(indent=2) + "\n")

    rich.print(f"phi_z = {estimate.phi:.4f}, sigma2 = {estimate.sigma2:.4f}")
    run.finish()


@app.command()
def validate(
    config_path: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    verbose: bool = VerboseOption,
    check: Optional[List[str]] = typer.Option(None, "--check", help="Run only the named checks."),
):
    """Runs the numerical self-checks, writes validation.json and exits nonzero on any failure."""

    run = _start("validate", config_path, seed, out, threads, verbose)

    try:
        report = run_validation(names=check or None, seed=run.cfg.seed)
    except KeyError as e:
        raise typer.BadParameter(str(e))

    rich.print(report.to_table())
    report.write_json(run.path("validation.json"))
    run.finish()

    if not report.passed:
        rich.print(f"[red]✗ Failed checks: {', '.join(report.failed)}[/red]")
        raise typer.Exit(code=1)


if __name__ == "__main__":
    app()
