from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.interpolate import RegularGridInterpolator

from gradfield.errors import DomainError
from gradfield.utils import as_points, split_window


class GridSpec(BaseModel):
    """
    A rectangular lattice of nx by ny equal cells tiling a window.

    Cells are numbered row-major from the lower-left corner: cell
    `iy * nx + ix` spans column `ix` and row `iy`.

    Attributes:
        window (Tuple[float, float, float, float]): (xmin, xmax, ymin, ymax).
        nx (int): Number of cells along the first coordinate.
        ny (int): Number of cells along the second coordinate.
    """

    model_config = ConfigDict(frozen=True)

    window: Tuple[float, float, float, float]
    nx: int = Field(..., ge=1)
    ny: int = Field(..., ge=1)

    @field_validator("window", mode="before")
    @classmethod
    def _check_window(cls, value):
        return tuple(split_window(value))

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_size(self) -> Tuple[float, float]:
        xmin, xmax, ymin, ymax = self.window
        return (xmax - xmin) / self.nx, (ymax - ymin) / self.ny

    @property
    def cell_area(self) -> float:
        dx, dy = self.cell_size
        return dx * dy

    @property
    def origin(self) -> Tuple[float, float]:
        return self.window[0], self.window[2]

    @property
    def x_centers(self) -> np.ndarray:
        dx, _ = self.cell_size
        return self.window[0] + dx * (np.arange(self.nx) + 0.5)

    @property
    def y_centers(self) -> np.ndarray:
        _, dy = self.cell_size
        return self.window[2] + dy * (np.arange(self.ny) + 0.5)

    @property
    def centroids(self) -> np.ndarray:
        """Cell centroids of shape (n_cells, 2) in cell order."""

        xx, yy = np.meshgrid(self.x_centers, self.y_centers)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def contains(self, points) -> np.ndarray:
        pts = as_points(points)
        xmin, xmax, ymin, ymax = self.window
        return (
            (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
        )

    def cell_of(self, points) -> np.ndarray:
        """
        Cell index of each point. Points on the upper boundary fall in the last cell.

        Raises:
            DomainError: If any point lies outside the window.
        """

        pts = as_points(points)
        if not np.all(self.contains(pts)):
            raise DomainError("Points lie outside the grid window.")

        dx, dy = self.cell_size
        ix = np.clip(((pts[:, 0] - self.window[0]) / dx).astype(int), 0, self.nx - 1)
        iy = np.clip(((pts[:, 1] - self.window[2]) / dy).astype(int), 0, self.ny - 1)
        return iy * self.nx + ix

    def counts(self, points) -> np.ndarray:
        return np.bincount(self.cell_of(points), minlength=self.n_cells)

    def staggered(self) -> "GridSpec":
        """
        The grid whose centroids are the interior vertices of this grid.

        Gradient targets sit there so they never coincide with the centroids
        the field is conditioned on.
        """

        if self.nx < 2 or self.ny < 2:
            raise DomainError("A staggered grid needs at least 2 cells per axis.")

        dx, dy = self.cell_size
        xmin, xmax, ymin, ymax = self.window
        return GridSpec(
            window=(xmin + dx / 2, xmax - dx / 2, ymin + dy / 2, ymax - dy / 2),
            nx=self.nx - 1,
            ny=self.ny - 1,
        )

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(window=self.window, nx=self.nx * factor, ny=self.ny * factor)

    def header(self) -> str:
        xmin, xmax, ymin, ymax = self.window
        return f"grid xmin={xmin!r} xmax={xmax!r} ymin={ymin!r} ymax={ymax!r} nx={self.nx} ny={self.ny}"


class SurfaceGrid(BaseModel):
    """
    One value per cell of a grid, with NaN marking missing cells.

    Attributes:
        grid (GridSpec): The lattice.
        values (np.ndarray): Values in cell order.
        label (str): Statistic the values hold, e.g. "posterior median".
        n_missing (Optional[np.ndarray]): Per-cell count of draws excluded as missing.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    grid: GridSpec
    values: np.ndarray
    label: str = ""
    n_missing: Optional[np.ndarray] = None

    @field_validator("values", mode="before")
    @classmethod
    def _cast_values(cls, value):
        arr = np.asarray(value, dtype=float).ravel()
        if np.any(np.isinf(arr)):
            raise ValueError("Surface values must be finite or NaN.")
        return arr

    @model_validator(mode="after")
    def _check_size(self):
        if len(self.values) != self.grid.n_cells:
            raise ValueError(
                f"Expected {self.grid.n_cells} values for a {self.grid.nx} x {self.grid.ny} grid, "
                f"got {len(self.values)}."
            )
        return self

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def as_matrix(self) -> np.ndarray:
        """Values as an (ny, nx) array with the first row at the lowest y."""
        return self.values.reshape(self.grid.ny, self.grid.nx)

    def to_frame(self) -> pd.DataFrame:
        centroids = self.grid.centroids
        return pd.DataFrame({"s1": centroids[:, 0], "s2": centroids[:, 1], "value": self.values})

    def fraction(self, predicate) -> float:
        """Share of non-missing cells whose value satisfies `predicate`."""

        present = self.values[~self.missing]
        if present.size == 0:
            return float("nan")
        return float(np.mean(predicate(present)))

    def interpolate(self, points) -> np.ndarray:
        """Bilinear interpolation between centroids; NaN outside their hull."""

        interp = RegularGridInterpolator(
            (self.grid.y_centers, self.grid.x_centers),
            self.as_matrix(),
            method="linear",
            bounds_error=False,
            fill_value=np.nan,
        )
        pts = as_points(points)
        return interp(pts[:, ::-1])

    def map(self, func, label: Optional[str] = None) -> "SurfaceGrid":
        return SurfaceGrid(grid=self.grid, values=func(self.values), label=label or self.label)
