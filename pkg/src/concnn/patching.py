"""Slicing processed section images into square patch grids.

A source raster is center-cropped to the largest patch-aligned region, then
cut into non-overlapping patches in row-major grid order (top-left patch
first, scanning left to right). PPL, XPL and CI rasters from the same
section share dimensions, so slicing them at the same patch size yields
position-aligned triples.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import RasterImage, save_raster


@dataclass
class PatchGrid:
    """Non-overlapping patches of one raster, plus enough metadata to invert.

    ``patches`` has shape (rows * cols, patch_size, patch_size, channels)
    and patch i sits at grid position (i // cols, i % cols).
    """

    patches: np.ndarray
    rows: int
    cols: int
    patch_size: int
    crop_offset: tuple[int, int]
    role: str
    normalized: bool
    equalized: bool

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def patch_image(self, index: int) -> RasterImage:
        """Wrap one patch back up as a standalone raster."""
        if not 0 <= index < self.count:
            raise IndexError(f"patch index {index} outside grid of {self.count}")
        return RasterImage(self.patches[index], self.role, self.normalized, self.equalized)


def slice_grid(image: RasterImage, patch_size: int) -> PatchGrid:
    """Center-crop to a patch-aligned region and cut into a patch grid."""
    if patch_size < 1:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    h, w = image.height, image.width
    rows, cols = h // patch_size, w // patch_size
    if rows == 0 or cols == 0:
        raise ValueError(f"patch size {patch_size} exceeds image extent {h}x{w}")
    top = (h - rows * patch_size) // 2
    left = (w - cols * patch_size) // 2
    cropped = image.pixels[top : top + rows * patch_size, left : left + cols * patch_size]
    c = image.channels
    patches = (
        cropped.reshape(rows, patch_size, cols, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size, patch_size, c)
        .copy()
    )
    return PatchGrid(
        patches=patches,
        rows=rows,
        cols=cols,
        patch_size=patch_size,
        crop_offset=(top, left),
        role=image.role,
        normalized=image.normalized,
        equalized=image.equalized,
    )


def reassemble(grid: PatchGrid) -> RasterImage:
    """Stitch a patch grid back into the cropped source region."""
    p, c = grid.patch_size, grid.patches.shape[3]
    pixels = (
        grid.patches.reshape(grid.rows, grid.cols, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.rows * p, grid.cols * p, c)
        .copy()
    )
    return RasterImage(pixels, grid.role, grid.normalized, grid.equalized)


def aligned_triples(
    ppl: RasterImage, xpl: RasterImage, ci: RasterImage, patch_size: int
) -> tuple[PatchGrid, PatchGrid, PatchGrid]:
    """Slice the three per-section rasters on one shared grid.

    Patch i of each grid covers the same source pixels, which is what lets
    the three network branches vote on a common patch identity.
    """
    shapes = {img.pixels.shape[:2] for img in (ppl, xpl, ci)}
    if len(shapes) != 1:
        raise ValueError(f"section rasters disagree on extent: {sorted(shapes)}")
    return slice_grid(ppl, patch_size), slice_grid(xpl, patch_size), slice_grid(ci, patch_size)


def export_patches(grid: PatchGrid, directory: str | Path, prefix: str) -> list[Path]:
    """Write every patch as ``<prefix>_r<row>c<col>.ppm``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(grid.count):
        r, c = divmod(i, grid.cols)
        path = directory / f"{prefix}_r{r:03d}c{c:03d}.ppm"
        save_raster(grid.patch_image(i), path)
        paths.append(path)
    return paths
