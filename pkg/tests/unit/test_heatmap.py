import os
import tempfile

import numpy as np
import pytest

from gradfield.grid import GridSpec, SurfaceGrid
from gradfield.heatmap import MISSING_RGB, HeatmapImage, read_ppm, surface_heatmap


@pytest.fixture
def surface():
    grid = GridSpec(window=(0.0, 3.0, 0.0, 2.0), nx=3, ny=2)
    return SurfaceGrid(grid=grid, values=[-1.0, 0.0, 2.0, np.nan, 0.5, -0.5])


class TestHeatmapImage:
    def test_shape_follows_scale(self, surface):
        # Act
        image = HeatmapImage.from_surface(surface, scale=4)

        # Assert
        assert image.shape == (8, 12)

    def test_diverging_limits_are_symmetric(self, surface):
        # Act
        image = HeatmapImage.from_surface(surface, ramp="diverging")

        # Assert
        assert (image.vmin, image.vmax) == (-2.0, 2.0)

    def test_sequential_limits(self, surface):
        # Act
        spanned = HeatmapImage.from_surface(surface, ramp="sequential")
        fixed = HeatmapImage.from_surface(surface, ramp="sequential", limits=(0.0, 2.0))

        # Assert
        assert (spanned.vmin, spanned.vmax) == (-1.0, 2.0)
        assert (fixed.vmin, fixed.vmax) == (0.0, 2.0)

    def test_missing_cells_are_gray_and_north_is_up(self, surface):
        # Act
        image = HeatmapImage.from_surface(surface)

        # Assert
        # cell 3 is the first cell of the top row, drawn first
        assert tuple(image.pixels[0, 0]) == MISSING_RGB
        assert tuple(image.pixels[1, 0]) != MISSING_RGB

    def test_bad_pixel_shape_rejected(self):
        with pytest.raises(ValueError):
            HeatmapImage(pixels=np.zeros((2, 2)), ramp="diverging", vmin=0.0, vmax=1.0)


class TestHeatmapFiles:
    def test_ppm_written_and_read_back(self, surface):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "surface.ppm")

            # Act
            image = surface_heatmap(surface, path, scale=2)
            back = read_ppm(path)

            # Assert
            np.testing.assert_array_equal(back.pixels, image.pixels)
            assert (back.vmin, back.vmax) == (image.vmin, image.vmax)
            assert (back.ramp, back.scale) == ("diverging", 2)
            assert back.shape == (2 * back.scale, 3 * back.scale)
            with open(path, "rb") as handle:
                assert handle.read(3) == b"P6\n"

    def test_png_by_extension(self, surface):
        with tempfile.TemporaryDirectory() as directory:
            # Arrange
            path = os.path.join(directory, "surface.png")

            # Act
            surface_heatmap(surface, path)

            # Assert
            with open(path, "rb") as handle:
                assert handle.read(8) == b"\x89PNG\r\n\x1a\n"
