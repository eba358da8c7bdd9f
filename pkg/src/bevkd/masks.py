"""Rasterize object ellipses onto a BEV grid and turn them into distillation weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .geometry import EllipseParams, ObjectBox, compute_tkd_ellipse, rakd_ellipse

if TYPE_CHECKING:
    from .config import DistillConfig

# Cells beyond this many radii from the ellipse center are left at zero;
# exp(-0.5 * 6**2) ~ 1.5e-8.
CULL_SIGMAS = 6.0


@dataclass(frozen=True)
class GridSpec:
    """Metric layout of an H x W BEV grid.

    Cell ``(j, k)`` (row ``j`` on the H axis, column ``k`` on the W axis) has its
    center at ``(x0 + k * cell_size, y0 + j * cell_size)``.
    """

    height: int
    width: int
    x0: float
    y0: float
    cell_size: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not (math.isfinite(self.x0) and math.isfinite(self.y0) and math.isfinite(self.cell_size)):
            raise ValueError("grid origin and cell size must be finite")

    @classmethod
    def centered(cls, height: int, width: int, cell_size: float) -> "GridSpec":
        """Grid whose cell centers are symmetric about the ego origin."""
        return cls(height, width, -0.5 * (width - 1) * cell_size, -0.5 * (height - 1) * cell_size, cell_size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def origin(self) -> tuple[float, float]:
        return (self.x0, self.y0)

    def cell_center(self, j: int, k: int) -> tuple[float, float]:
        return (self.x0 + k * self.cell_size, self.y0 + j * self.cell_size)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(H, W)``."""
        xs = self.x0 + np.arange(self.width) * self.cell_size
        ys = self.y0 + np.arange(self.height) * self.cell_size
        return np.meshgrid(xs, ys)


@dataclass(frozen=True, eq=False)
class MaskGrid:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"mask shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def support(self) -> np.ndarray:
        return self.values != 0


def _axis_window(offset0: float, cell: float, n: int, reach: float) -> tuple[int, int]:
    # indices i with |offset0 + i * cell| <= reach, clipped to [0, n)
    lo = math.ceil((-reach - offset0) / cell)
    hi = math.floor((reach - offset0) / cell) + 1
    return max(lo, 0), min(hi, n)


def rasterize_object_mask(ellipse: EllipseParams, grid: GridSpec, cull: bool = True) -> MaskGrid:
    """Evaluate the ellipse's Gaussian at every cell center.

    With ``cull`` only the axis-aligned window within ``CULL_SIGMAS`` major
    radii of the center is evaluated; everything else stays exactly zero.
    """
    values = np.zeros(grid.shape)
    # offsets are anchored at the grid origin so a common translation of grid
    # and ellipse only touches this one subtraction
    ox = grid.x0 - ellipse.cx
    oy = grid.y0 - ellipse.cy
    if cull:
        reach = CULL_SIGMAS * max(ellipse.r_major, ellipse.r_minor)
        k0, k1 = _axis_window(ox, grid.cell_size, grid.width, reach)
        j0, j1 = _axis_window(oy, grid.cell_size, grid.height, reach)
        if k0 >= k1 or j0 >= j1:
            return MaskGrid(grid, values)
    else:
        j0, j1, k0, k1 = 0, grid.height, 0, grid.width
    dx = ox + np.arange(k0, k1) * grid.cell_size
    dy = oy + np.arange(j0, j1) * grid.cell_size
    c = math.cos(ellipse.heading)
    s = math.sin(ellipse.heading)
    xr = c * dx[None, :] - s * dy[:, None]
    yr = s * dx[None, :] + c * dy[:, None]
    q = (xr / ellipse.r_major) ** 2 + (yr / ellipse.r_minor) ** 2
    values[j0:j1, k0:k1] = np.exp(-0.5 * q)
    return MaskGrid(grid, values)


def merge_max(masks: Sequence[MaskGrid]) -> MaskGrid:
    if len(masks) == 0:
        raise ValueError("merge_max needs at least one mask")
    grid = masks[0].grid
    for m in masks[1:]:
        if m.grid != grid:
            raise ValueError(f"grid mismatch in merge_max: {m.grid} != {grid}")
    out = masks[0].values.copy()
    for m in masks[1:]:
        np.maximum(out, m.values, out=out)
    return MaskGrid(grid, out)


def threshold_mask(merged: MaskGrid, tau: float) -> MaskGrid:
    """Keep values strictly greater than ``tau``; zero the rest."""
    values = np.where(merged.values > tau, merged.values, 0.0)
    return MaskGrid(merged.grid, values)


def _build(ellipses: Iterable[EllipseParams], grid: GridSpec, tau: float) -> MaskGrid:
    rasters = [rasterize_object_mask(e, grid) for e in ellipses]
    if not rasters:
        return MaskGrid(grid, np.zeros(grid.shape))
    return threshold_mask(merge_max(rasters), tau)


def build_rakd_mask(boxes: Sequence[ObjectBox], grid: GridSpec, cfg: DistillConfig) -> MaskGrid:
    return _build((rakd_ellipse(b, cfg) for b in boxes), grid, cfg.tau)


def build_tkd_mask(boxes: Sequence[ObjectBox], grid: GridSpec, cfg: DistillConfig) -> MaskGrid:
    return _build((compute_tkd_ellipse(b, cfg) for b in boxes), grid, cfg.tau)
