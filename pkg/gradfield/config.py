"""
Run configuration for the command-line driver.

A configuration file is either YAML (JSON is a subset) with one mapping per
section, or flat text with one dotted `key = value` per line:

    # comments start with '#'
    seed = 7
    mcmc.iterations = 10500
    sensitivity.directions = [[1, 0], [0, 1]]
    inputs.data = obs.csv

Values on the right-hand side are parsed as YAML scalars or flow sequences.
Relative input paths are resolved against the directory of the file.
"""

import os
import re
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from gradfield.grid import GridSpec
from gradfield.kernel import UnitVector
from gradfield.lgcp import LgcpPriors
from gradfield.model import McmcConfig, PriorSpec, ThetaSample

_FLAT_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")

SIMULATION_TRUTHS = ThetaSample(
    alpha0=0.0,
    beta0=0.0,
    beta1=0.5,
    sigma2_x=1.0,
    sigma2_y=1.0,
    phi_x=1.05,
    phi_y=1.05,
)


class LgcpSimulation(BaseModel):
    """Cox process simulation settings, with a synthetic covariate on the same grid."""

    grid: GridSpec = GridSpec(window=(0.0, 100.0, 0.0, 100.0), nx=40, ny=40)
    beta0: float = -3.0
    beta1: float = -0.26
    sigma2_z: float = Field(0.5, gt=0)
    phi_z: float = Field(0.1, gt=0)
    covariate: ThetaSample = ThetaSample(alpha0=0.0, sigma2_x=1.0, phi_x=0.05)
    n_covariate_obs: int = Field(200, ge=0)


class SimulateSection(BaseModel):
    kind: Literal["gp", "lgcp"] = "gp"
    n_full: int = Field(2000, ge=3)
    n_obs: int = Field(200, ge=3)
    window: Tuple[float, float, float, float] = (0.0, 10.0, 0.0, 10.0)
    theta: ThetaSample = SIMULATION_TRUTHS
    lgcp: LgcpSimulation = LgcpSimulation()

    @model_validator(mode="after")
    def _check_subset(self):
        if self.n_obs > self.n_full:
            raise ValueError(f"n_obs ({self.n_obs}) cannot exceed n_full ({self.n_full}).")
        return self


class LgcpSection(BaseModel):
    """
    Cox process fitting settings.

    Attributes:
        grid (GridSpec): Likelihood grid; its window must equal the pattern's.
        phi_z (Optional[float]): Fixed latent decay. None runs minimum contrast.
        phi_bounds (Tuple[float, float]): Search interval for minimum contrast.
        priors (LgcpPriors): Priors of beta0, beta1 and sigma2_z.
        field_thin (int): Keep every n-th latent field in the field dump.
        max_draws (Optional[int]): Thin the chain for intensity gradient surfaces.
    """

    grid: GridSpec = GridSpec(window=(0.0, 100.0, 0.0, 100.0), nx=20, ny=20)
    phi_z: Optional[float] = Field(None, gt=0)
    phi_bounds: Tuple[float, float] = (0.01, 2.0)
    priors: LgcpPriors = LgcpPriors()
    field_thin: int = Field(1, ge=1)
    max_draws: Optional[int] = Field(None, ge=1)


class SensitivitySection(BaseModel):
    """
    Target grid and directions of the sensitivity and discrepancy surfaces.

    With `grid` unset, Cox process surfaces use the interior vertices of the
    fit grid.
    """

    grid: Optional[GridSpec] = GridSpec(window=(6.5, 8.5, 5.5, 7.5), nx=11, ny=11)
    directions: List[UnitVector] = [UnitVector(u1=1.0, u2=0.0), UnitVector(u1=0.0, u2=1.0)]
    statistic: Literal["median"] = "median"
    max_draws: Optional[int] = Field(None, ge=1)
    mean_only: bool = False


class InputPaths(BaseModel):
    """Files the commands read. Every path that is set must exist."""

    data: Optional[str] = None
    chain: Optional[str] = None
    pattern: Optional[str] = None
    covariate: Optional[str] = None
    covariate_chain: Optional[str] = None
    covariate_grid: Optional[str] = None
    lgcp_chain: Optional[str] = None
    lgcp_field: Optional[str] = None

    @field_validator("*")
    @classmethod
    def _check_exists(cls, value):
        if value is not None and not os.path.exists(value):
            raise FileNotFoundError(f"Filepath {value} does not exist.")
        return value


class RunConfig(BaseModel):
    seed: int = Field(0, ge=0, lt=2**64)
    out: str = "out"
    threads: int = Field(1, ge=1)
    simulate: SimulateSection = SimulateSection()
    mcmc: McmcConfig = McmcConfig()
    priors: PriorSpec = PriorSpec()
    lgcp: LgcpSection = LgcpSection()
    sensitivity: SensitivitySection = SensitivitySection()
    inputs: InputPaths = InputPaths()

    def mcmc_for(self, seed: int) -> McmcConfig:
        return self.mcmc.model_copy(update={"seed": seed})


def _parse_flat(text: str) -> Dict[str, Any]:
    """Expands dotted `key = value` lines into a nested mapping."""

    nested: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue

        match = _FLAT_LINE.match(line)
        if match is None:
            raise ValueError(f"Line {number} is not of the form 'key = value': {line!r}")

        key, raw = match.groups()
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"Key {key} on line {number} conflicts with an earlier value.")

        node[leaf] = yaml.safe_load(raw) if raw else None

    return nested


def _is_flat(text: str) -> bool:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]
    return bool(lines) and all(_FLAT_LINE.match(ln) for ln in lines)


def _resolve_inputs(raw: Dict[str, Any], base_dir: str):
    inputs = raw.get("inputs") or {}
    for key, value in inputs.items():
        if isinstance(value, str) and not os.path.isabs(value):
            inputs[key] = os.path.normpath(os.path.join(base_dir, value))


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    raw = _parse_flat(text) if _is_flat(text) else (yaml.safe_load(text) or {})
    if not isinstance(raw, dict):
        raise ValueError("A configuration file must hold a mapping.")

    _resolve_inputs(raw, base_dir)
    return RunConfig(**raw)


def load_config(path: Optional[str]) -> RunConfig:
    """
    Parses a configuration file and returns a RunConfig instance.

    Args:
        path (Optional[str]): Path to a YAML/JSON or flat `key = value` file.
            None gives the defaults.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        FileNotFoundError: If the file or an input path it names is missing.
        pydantic.ValidationError: If a value is invalid.
    """

    if path is None:
        return RunConfig()

    if not os.path.isfile(path):
        raise FileNotFoundError(f"Filepath {path} does not exist.")

    with open(path) as handle:
        text = handle.read()

    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))
