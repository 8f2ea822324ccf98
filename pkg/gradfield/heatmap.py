"""Color heatmaps of grid surfaces, written as binary PPM or PNG."""

import logging
import os
from typing import Literal, Optional, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimg  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402
from pydantic import BaseModel, ConfigDict, field_validator  # noqa: E402

from gradfield.grid import SurfaceGrid  # noqa: E402

logger = logging.getLogger(__name__)

MISSING_RGB = (128, 128, 128)
RAMPS = {"diverging": "RdBu_r", "sequential": "viridis"}


class HeatmapImage(BaseModel):
    """
    RGB raster of a surface, top row first.

    Attributes:
        pixels (np.ndarray): uint8 array of shape (rows, cols, 3).
        ramp (str): "diverging" or "sequential".
        vmin (float): Value mapped to the low end of the ramp.
        vmax (float): Value mapped to the high end of the ramp.
        scale (int): Pixels per grid cell along each axis.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pixels: np.ndarray
    ramp: Literal["diverging", "sequential"]
    vmin: float
    vmax: float
    scale: int = 1

    @field_validator("pixels", mode="before")
    @classmethod
    def _check_pixels(cls, value):
        value = np.asarray(value)
        if value.ndim != 3 or value.shape[2] != 3:
            raise ValueError(f"Pixels must have shape (rows, cols, 3), got {value.shape}.")
        return value.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]

    @classmethod
    def from_surface(
        cls,
        surface: SurfaceGrid,
        ramp: Literal["diverging", "sequential"] = "diverging",
        limits: Optional[Tuple[float, float]] = None,
        scale: int = 1,
    ) -> "HeatmapImage":
        """
        Colors each cell of `surface`.

        A diverging ramp is centered on zero with symmetric limits. A sequential
        ramp spans `limits` or the finite data range. Missing cells are gray.
        Rows are flipped so the northmost row comes first.
        """

        matrix = surface.as_matrix()
        finite = matrix[np.isfinite(matrix)]

        if limits is not None:
            vmin, vmax = limits
        elif finite.size == 0:
            vmin, vmax = -1.0, 1.0
        elif ramp == "diverging":
            bound = float(np.max(np.abs(finite))) or 1.0
            vmin, vmax = -bound, bound
        else:
            vmin, vmax = float(finite.min()), float(finite.max())
            if vmin == vmax:
                vmin, vmax = vmin - 0.5, vmax + 0.5

        cmap = colormaps[RAMPS[ramp]]
        norm = Normalize(vmin=vmin, vmax=vmax, clip=True)

        rgba = cmap(norm(np.nan_to_num(matrix, nan=vmin)))
        pixels = np.round(rgba[..., :3] * 255).astype(np.uint8)
        pixels[~np.isfinite(matrix)] = MISSING_RGB

        pixels = pixels[::-1]
        if scale > 1:
            pixels = np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)

        return cls(pixels=pixels, ramp=ramp, vmin=vmin, vmax=vmax, scale=scale)

    def write_ppm(self, path: str):
        """Writes a binary P6 image with the value range, ramp and scale in header comments."""

        rows, cols = self.shape
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(b"P6\n")
            handle.write(f"# min {self.vmin!r}\n# max {self.vmax!r}\n# ramp {self.ramp}\n# scale {self.scale}\n".encode())
            handle.write(f"{cols} {rows}\n255\n".encode())
            handle.write(np.ascontiguousarray(self.pixels).tobytes())

        logger.debug(f"Wrote {cols}x{rows} heatmap to {path}")

    def write_png(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        mpimg.imsave(path, self.pixels)


def read_ppm(path: str) -> HeatmapImage:
    """Reads a P6 image written by `HeatmapImage.write_ppm`."""

    with open(path, "rb") as handle:
        content = handle.read()

    tokens, comments, pos = [], {}, 0
    while len(tokens) < 4:
        end = content.index(b"\n", pos)
        line = content[pos:end].decode()
        pos = end + 1
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            comments[key] = value
        else:
            tokens.extend(line.split())

    if tokens[0] != "P6":
        raise ValueError(f"{path} is not a binary PPM image.")

    cols, rows = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(content[pos:], dtype=np.uint8).reshape(rows, cols, 3)

    return HeatmapImage(
        pixels=pixels,
        ramp=comments.get("ramp", "diverging"),
        vmin=float(comments["min"]),
        vmax=float(comments["max"]),
        scale=int(comments.get("scale", 1)),
    )


def surface_heatmap(surface: SurfaceGrid, path: str, **kwargs) -> HeatmapImage:
    """Renders `surface` and writes it as PPM or PNG by file extension."""

    image = HeatmapImage.from_surface(surface, **kwargs)
    if path.lower().endswith(".png"):
        image.write_png(path)
    else:
        image.write_ppm(path)
    return image
