"""CSV and JSON readers and writers for datasets, chains, draws, surfaces and patterns.

Tables are written by pandas with shortest round-trip float formatting and
read back with round-trip precision. Comment lines start with `#`.
"""

import json
import os
import re
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from gradfield.gradient import CompositionResult
from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.lgcp import LGCP_PARAM_NAMES, LgcpChain, LgcpSample, PointPattern
from gradfield.model import PARAM_NAMES, Dataset, McmcConfig, PosteriorChain, ThetaSample

GRADIENT_COLUMNS = ["theta_index", "s1", "s2", "y", "x", "dy1", "dy2", "dx1", "dx2"]
_GRID_HEADER = re.compile(
    r"#\s*grid xmin=(\S+) xmax=(\S+) ymin=(\S+) ymax=(\S+) nx=(\d+) ny=(\d+)"
)


def validate_filepath(path: str):
    """
    Validates that `path` exists and is a file.

    Raises:
        FileNotFoundError: If the path does not exist.
        IsADirectoryError: If the path is a directory.
    """

    if not os.path.exists(path):
        raise FileNotFoundError(f"Filepath {path} does not exist.")
    elif not os.path.isfile(path):
        raise IsADirectoryError(f"Filepath {path} is a directory.")


def _read_table(path: str) -> pd.DataFrame:
    validate_filepath(path)
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def _write_table(path: str, frame: pd.DataFrame, comments: Optional[List[str]] = None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as handle:
        for line in comments or []:
            handle.write(f"# {line}\n")
        frame.to_csv(handle, index=False, na_rep="", lineterminator="\n")


def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def _write_json(path: str, payload: Dict):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_dataset(path: str, data: Dataset):
    frame = pd.DataFrame({"s1": data.locations[:, 0], "s2": data.locations[:, 1], "x": data.x})
    if data.y is not None:
        frame["y"] = data.y
    _write_table(path, frame)


def read_dataset(path: str) -> Dataset:
    """Reads `s1,s2,x[,y]`; a missing `y` column gives a covariate-only dataset."""

    frame = _read_table(path)
    missing = {"s1", "s2", "x"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path} lacks columns {sorted(missing)}.")

    return Dataset(
        locations=frame[["s1", "s2"]].to_numpy(),
        x=frame["x"].to_numpy(),
        y=frame["y"].to_numpy() if "y" in frame.columns else None,
    )


def _iterations(config: McmcConfig, n: int) -> np.ndarray:
    return config.burn_in + config.thin * np.arange(1, n + 1)


def write_chain(path: str, chain: PosteriorChain):
    """Writes `iter,alpha0,...,phi_y` and a JSON sidecar with config, seed and acceptance."""

    frame = pd.DataFrame(chain.as_array(), columns=list(PARAM_NAMES))
    frame.insert(0, "iter", _iterations(chain.config, len(chain)))
    _write_table(path, frame)

    _write_json(
        _sidecar_path(path),
        {
            "config": chain.config.model_dump(),
            "seed": chain.seed,
            "acceptance": chain.acceptance,
            "x_only": chain.x_only,
        },
    )


def read_chain(path: str) -> PosteriorChain:
    frame = _read_table(path)
    samples = [ThetaSample(**row) for row in frame[list(PARAM_NAMES)].to_dict("records")]

    meta = {}
    if os.path.exists(_sidecar_path(path)):
        with open(_sidecar_path(path)) as handle:
            meta = json.load(handle)

    return PosteriorChain(samples=samples, **meta)


def write_gradient_draws(path: str, result: CompositionResult):
    """Writes one row per draw and target; components not requested are empty."""

    frames = []
    for draw in result:
        frames.append(
            pd.DataFrame(
                {
                    "theta_index": draw.theta_index,
                    "s1": draw.locations[:, 0],
                    "s2": draw.locations[:, 1],
                    "y": draw.y,
                    "x": draw.x,
                    "dy1": draw.grad_y[:, 0],
                    "dy2": draw.grad_y[:, 1],
                    "dx1": draw.grad_x[:, 0],
                    "dx2": draw.grad_x[:, 1],
                }
            )
        )

    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=GRADIENT_COLUMNS)
    comments = [f"failed theta indices: {result.failed}"] if result.failed else None
    _write_table(path, frame[GRADIENT_COLUMNS], comments)


def write_surface(path: str, surface: SurfaceGrid):
    """Writes `s1,s2,value` under a grid header comment; missing cells are empty."""

    comments = [surface.grid.header()]
    if surface.label:
        comments.append(f"label {surface.label}")
    _write_table(path, surface.to_frame(), comments)


def _read_comments(path: str) -> List[str]:
    lines = []
    with open(path) as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            lines.append(line.rstrip("\n"))
    return lines


def read_surface(path: str) -> SurfaceGrid:
    validate_filepath(path)
    comments = _read_comments(path)

    grid, label = None, ""
    for line in comments:
        match = _GRID_HEADER.match(line)
        if match:
            xmin, xmax, ymin, ymax = (float(v) for v in match.groups()[:4])
            grid = GridSpec(window=(xmin, xmax, ymin, ymax), nx=int(match[5]), ny=int(match[6]))
        elif line.startswith("# label "):
            label = line[len("# label ") :]

    if grid is None:
        raise ValueError(f"{path} has no grid header comment.")

    frame = _read_table(path)
    return SurfaceGrid(grid=grid, values=frame["value"].to_numpy(dtype=float), label=label)


def write_pattern(path: str, pattern: PointPattern):
    xmin, xmax, ymin, ymax = pattern.window
    frame = pd.DataFrame({"s1": pattern.events[:, 0], "s2": pattern.events[:, 1]})
    _write_table(path, frame, [f"window xmin={xmin!r} xmax={xmax!r} ymin={ymin!r} ymax={ymax!r}"])


def read_pattern(path: str, window: Optional[Tuple[float, float, float, float]] = None) -> PointPattern:
    """Reads `s1,s2`; the window comes from the argument or the file's header comment."""

    validate_filepath(path)
    if window is None:
        for line in _read_comments(path):
            match = re.match(r"#\s*window xmin=(\S+) xmax=(\S+) ymin=(\S+) ymax=(\S+)", line)
            if match:
                window = tuple(float(v) for v in match.groups())
    if window is None:
        raise ValueError(f"No window given for the pattern in {path}.")

    frame = _read_table(path)
    return PointPattern(events=frame[["s1", "s2"]].to_numpy(), window=window)


def write_lgcp_chain(path: str, chain: LgcpChain, field_path: Optional[str] = None, field_thin: int = 1):
    """
    Writes `iter,beta0,beta1,sigma2_z`, a JSON sidecar and optionally the latent
    fields as `iter,cell,w`, keeping every `field_thin`-th draw.
    """

    iterations = _iterations(chain.config, len(chain))
    frame = pd.DataFrame(chain.as_array(), columns=list(LGCP_PARAM_NAMES))
    frame.insert(0, "iter", iterations)
    _write_table(path, frame)

    _write_json(
        _sidecar_path(path),
        {
            "config": chain.config.model_dump(),
            "seed": chain.seed,
            "acceptance": chain.acceptance,
            "phi_z": chain.phi_z,
            "grid": chain.grid.model_dump(),
            "field_thin": field_thin,
        },
    )

    if field_path is not None:
        keep = np.arange(0, len(chain), field_thin)
        n_cells = chain.grid.n_cells
        fields = chain.fields()[keep] if len(chain) else np.zeros((0, n_cells))
        dump = pd.DataFrame(
            {
                "iter": np.repeat(iterations[keep], n_cells),
                "cell": np.tile(np.arange(n_cells), len(keep)),
                "w": fields.ravel(),
            }
        )
        _write_table(field_path, dump)


def read_lgcp_chain(path: str, field_path: str) -> LgcpChain:
    """Reads a Cox process chain whose field dump holds every retained draw."""

    frame = _read_table(path)
    validate_filepath(_sidecar_path(path))
    with open(_sidecar_path(path)) as handle:
        meta = json.load(handle)

    if meta.get("field_thin", 1) != 1:
        raise ValueError(f"{field_path} is thinned; every draw's field is needed.")

    grid = GridSpec(**meta["grid"])
    fields = _read_table(field_path)["w"].to_numpy().reshape(len(frame), grid.n_cells)

    samples = [
        LgcpSample(beta0=row["beta0"], beta1=row["beta1"], sigma2_z=row["sigma2_z"], w=w)
        for row, w in zip(frame.to_dict("records"), fields)
    ]
    return LgcpChain(
        samples=samples,
        grid=grid,
        phi_z=meta["phi_z"],
        acceptance=meta.get("acceptance", {}),
        config=McmcConfig(**meta["config"]),
        seed=meta.get("seed", 0),
    )
