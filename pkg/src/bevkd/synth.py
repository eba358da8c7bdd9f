"""Synthetic BEV scenes and modality-flavoured feature renders.

The teacher sees every object as a sharp isotropic bump. The student sees
the same objects smeared along the ego ray (depth-like) and across it
(angular, growing with range), plus additive noise. ``align_history`` is a
fixed linear stand-in for a learned temporal aggregation network: a
uniform average over frames followed by a box blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ObjectBox, length_axis
from .masks import GridSpec


@dataclass(frozen=True)
class SceneFrame:
    timestamp: float
    boxes: tuple[ObjectBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


@dataclass(frozen=True)
class UncertaintyModel:
    range_sigma: float = 0.0
    azimuth_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("range_sigma", "azimuth_sigma", "noise_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be >= 0, got {v}")


def generate_scene(
    seed: int,
    n_objects: int,
    bounds: float = 50.0,
    speed_range: tuple[float, float] = (0.0, 12.0),
    static_fraction: float = 0.3,
    timestamp: float = 0.0,
) -> SceneFrame:
    """Seeded random scene; centers lie in ``[-bounds, bounds]^2``.

    Roughly ``static_fraction`` of the objects are parked (zero velocity); the
    rest move along their length axis with a speed drawn from ``speed_range``.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_objects):
        cx, cy = rng.uniform(-bounds, bounds, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(3.5, 5.5)
        width = rng.uniform(1.6, 2.2)
        moving = rng.uniform() >= static_fraction
        speed = rng.uniform(*speed_range)
        if moving:
            ax, ay = length_axis(heading)
            vx, vy = speed * ax, speed * ay
        else:
            vx = vy = 0.0
        boxes.append(ObjectBox(float(cx), float(cy), float(heading), float(length), float(width),
                               float(vx), float(vy)))
    return SceneFrame(timestamp, tuple(boxes))


def propagate_scene(frame: SceneFrame, dt: float, n_frames: int) -> list[SceneFrame]:
    """Constant-velocity history ending at ``frame``, ordered oldest to newest."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = []
    for m in range(n_frames - 1, 0, -1):
        back = m * dt
        boxes = tuple(replace(b, cx=b.cx - back * b.vx, cy=b.cy - back * b.vy) for b in frame.boxes)
        frames.append(SceneFrame(frame.timestamp - back, boxes))
    frames.append(frame)
    return frames


def channel_pattern(index: int, channels: int) -> np.ndarray:
    """Deterministic per-object channel signature with peak value exactly 1."""
    rng = np.random.default_rng([index, channels])
    pattern = rng.uniform(-1.0, 1.0, size=channels)
    pattern[rng.integers(channels)] = 1.0
    return pattern


def _bump(box: ObjectBox, grid: GridSpec, sigma_range: float, sigma_azimuth: float) -> np.ndarray:
    ox = grid.x0 - box.cx
    oy = grid.y0 - box.cy
    dx = (ox + np.arange(grid.width) * grid.cell_size)[None, :]
    dy = (oy + np.arange(grid.height) * grid.cell_size)[:, None]
    if sigma_range == sigma_azimuth:
        return np.exp(-0.5 * (dx * dx + dy * dy) / (sigma_range * sigma_range))
    rng_ = math.hypot(box.cx, box.cy)
    ux, uy = (box.cx / rng_, box.cy / rng_) if rng_ > 0 else (1.0, 0.0)
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return np.exp(-0.5 * ((along / sigma_range) ** 2 + (across / sigma_azimuth) ** 2))


def _render(frame: SceneFrame, grid: GridSpec, channels: int, model: UncertaintyModel | None) -> np.ndarray:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    out = np.zeros((channels, grid.height, grid.width))
    base = grid.cell_size
    for i, box in enumerate(frame.boxes):
        if model is None:
            s_r = s_a = base
        else:
            s_r = math.sqrt(base * base + model.range_sigma ** 2)
            s_a = math.sqrt(base * base + (model.azimuth_sigma * math.hypot(box.cx, box.cy)) ** 2)
        out += channel_pattern(i, channels)[:, None, None] * _bump(box, grid, s_r, s_a)[None]
    return out


def render_teacher_features(frame: SceneFrame, grid: GridSpec, channels: int) -> np.ndarray:
    """Isotropic Gaussian bump (sigma = one cell) per object, scaled by its channel pattern."""
    return _render(frame, grid, channels, None)


def render_student_features(
    frame: SceneFrame, grid: GridSpec, channels: int, model: UncertaintyModel, seed: int
) -> np.ndarray:
    out = _render(frame, grid, channels, model)
    if model.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out += rng.normal(0.0, model.noise_sigma, size=out.shape)
    return out


def _check_history(history) -> np.ndarray:
    if len(history) == 0:
        raise ValueError("align_history needs at least one frame")
    arrays = [np.asarray(h, dtype=float) for h in history]
    shape = arrays[0].shape
    if len(shape) != 3 or any(a.shape != shape for a in arrays):
        raise ValueError(f"history frames must share one (C, H, W) shape, got {[a.shape for a in arrays]}")
    return np.stack(arrays)


def _box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window with zero padding.

    Written as a sum of shifted slices rather than running sums so cells whose
    window holds only zeros come out exactly zero. The window is symmetric,
    so this operator is its own adjoint.
    """
    if radius == 0:
        return x.copy()
    size = 2 * radius + 1
    h, w = x.shape[-2:]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(radius, radius), (radius, radius)])
    acc = np.zeros_like(x)
    for dj in range(size):
        for dk in range(size):
            acc += padded[..., dj:dj + h, dk:dk + w]
    return acc / (size * size)


def align_history(history, kernel_radius: int = 1) -> np.ndarray:
    """Average the frames (oldest first) and box-blur the result spatially."""
    if kernel_radius < 0:
        raise ValueError("kernel_radius must be >= 0")
    stack = _check_history(history)
    return _box_blur(stack.mean(axis=0), kernel_radius)


def align_history_backward(grad_out, n_frames: int, kernel_radius: int = 1) -> list[np.ndarray]:
    """Gradient of :func:`align_history` w.r.t. each input frame."""
    g = _box_blur(np.asarray(grad_out, dtype=float), kernel_radius) / n_frames
    return [g.copy() for _ in range(n_frames)]
