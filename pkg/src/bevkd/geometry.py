"""Closed-form kernels for BEV object ellipses.

Heading convention: the world-to-box rotation is applied exactly as

    [x']   [cos h  -sin h] [x - px]
    [y'] = [sin h   cos h] [y - py]

so the box's length (major) axis points along ``(cos h, -sin h)`` in the
world frame. :func:`length_axis` returns that direction; the scene
generator uses it so velocities run along the box body.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .config import DistillConfig

MIN_BOX_DIM = 1e-3
BETA_CAP = 0.999


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi). In-range values are returned untouched."""
    if -math.pi <= theta < math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    # fmod can land exactly on +pi after the shift
    return -math.pi if wrapped >= math.pi else wrapped


@dataclass(frozen=True)
class ObjectBox:
    """Ground-truth object projected to BEV (meters, radians, m/s)."""

    cx: float
    cy: float
    heading: float
    length: float
    width: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        values = (self.cx, self.cy, self.heading, self.length, self.width, self.vx, self.vy)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"ObjectBox fields must be finite, got {values}")
        if self.length < MIN_BOX_DIM or self.width < MIN_BOX_DIM:
            raise ValueError(
                f"box dimensions must be >= {MIN_BOX_DIM} m, got length={self.length}, width={self.width}"
            )
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    @property
    def velocity(self) -> tuple[float, float]:
        return (self.vx, self.vy)

    def speed_sq(self) -> float:
        return self.vx * self.vx + self.vy * self.vy


@dataclass(frozen=True)
class EllipseParams:
    cx: float
    cy: float
    heading: float
    r_major: float
    r_minor: float

    def __post_init__(self):
        if not (self.r_major > 0 and self.r_minor > 0):
            raise ValueError(f"ellipse radii must be positive, got {self.r_major}, {self.r_minor}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.heading, self.r_major, self.r_minor)):
            raise ValueError("ellipse parameters must be finite")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)


def length_axis(heading: float) -> tuple[float, float]:
    """World-frame unit vector of the box's length axis under the rotation above."""
    return (math.cos(heading), -math.sin(heading))


def rotate_into_box_frame(point, center, heading):
    """Return ``R(heading) @ (point - center)``.

    Works on scalars or broadcastable numpy arrays; ``point`` and ``center``
    are ``(x, y)`` pairs.
    """
    dx = point[0] - center[0]
    dy = point[1] - center[1]
    c = math.cos(heading)
    s = math.sin(heading)
    return (c * dx - s * dy, s * dx + c * dy)


def normalized_ego_distance(center, r_max: float, cap: float = BETA_CAP) -> float:
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    return min(math.hypot(center[0], center[1]) / r_max, cap)


def compute_rakd_radii(box: ObjectBox, beta: float, cfg: DistillConfig) -> tuple[float, float]:
    """Range-dependent radii ``r = size * (alpha / size) ** beta`` for both axes."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if cfg.alpha_l <= 0 or cfg.alpha_w <= 0:
        raise ValueError("alpha_l and alpha_w must be positive")
    r1 = box.length * (cfg.alpha_l / box.length) ** beta
    r2 = box.width * (cfg.alpha_w / box.width) ** beta
    return r1, r2


def rakd_ellipse(box: ObjectBox, cfg: DistillConfig) -> EllipseParams:
    beta = normalized_ego_distance(box.center, cfg.r_max)
    r1, r2 = compute_rakd_radii(box, beta, cfg)
    return EllipseParams(box.cx, box.cy, box.heading, r1, r2)


def compute_tkd_ellipse(box: ObjectBox, cfg: DistillConfig) -> EllipseParams:
    """Ellipse shifted back along the motion so it covers the recent trajectory.

    Objects whose squared speed does not exceed ``tau_v`` keep their own
    center and (length, width) radii.
    """
    if cfg.t_s <= 0:
        raise ValueError("t_s must be positive")
    if box.speed_sq() > cfg.tau_v:
        half = 0.5 * cfg.t_s
        px = box.cx - half * box.vx
        py = box.cy - half * box.vy
    else:
        px, py = box.cx, box.cy
    shift = math.hypot(px - box.cx, py - box.cy)
    return EllipseParams(px, py, box.heading, box.length + shift, box.width)


def eval_elliptical_gaussian(point, ellipse: EllipseParams):
    xr, yr = rotate_into_box_frame(point, ellipse.center, ellipse.heading)
    q = (xr / ellipse.r_major) ** 2 + (yr / ellipse.r_minor) ** 2
    if isinstance(q, np.ndarray):
        return np.exp(-0.5 * q)
    return math.exp(-0.5 * q)
