"""Distillation losses with analytic gradients w.r.t. the student features.

Feature grids are ``(C, H, W)`` arrays. All reductions go through numpy's
``sum`` on fixed-shape arrays, so results repeat exactly run to run.
Teacher inputs are treated as constants and never receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .masks import MaskGrid

if TYPE_CHECKING:
    from .config import DistillConfig

K_MAX_DEFAULT = 512

LEVELS = ("low", "high")
SOURCES = ("teacher", "student", "student_projected", "student_aligned")


@dataclass(eq=False)
class FeatureGrid:
    """A dense ``C x H x W`` feature tensor with provenance tags."""

    data: np.ndarray
    level: str = "low"
    source: str = "student"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError(f"feature grid must be 3-D (C, H, W), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature grid contains non-finite values")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(eq=False)
class AffinityMap:
    """``K x K`` cosine-similarity matrix.

    ``unit`` and ``norms`` cache the normalized vectors and their original
    lengths so a loss can back-propagate to the underlying features.
    """

    values: np.ndarray
    unit: np.ndarray | None = None
    norms: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class LossValue:
    value: float
    grad: np.ndarray
    n_active: int = 0

    def report(self, name: str) -> dict:
        return {
            "loss_name": name,
            "value": float(self.value),
            "n_active_cells": int(self.n_active),
            "grad_norm": float(np.sqrt(np.sum(self.grad * self.grad))),
        }


@dataclass(eq=False)
class TotalLoss:
    """Weighted sum of the distillation terms.

    The three terms differentiate w.r.t. different student tensors, so the
    weighted gradients are kept per term in ``grads``.
    """

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    terms: dict[str, float] = field(default_factory=dict)


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _check_pair(teacher: np.ndarray, student: np.ndarray, mask: MaskGrid | np.ndarray) -> np.ndarray:
    if teacher.ndim != 3 or teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} must share (C, H, W)")
    w = mask.values if isinstance(mask, MaskGrid) else _arr(mask)
    if w.shape != teacher.shape[1:]:
        raise ValueError(f"mask shape {w.shape} does not match feature plane {teacher.shape[1:]}")
    return w


def channel_project(student, weights, bias) -> np.ndarray:
    """Per-cell affine map over channels (a 1x1 convolution)."""
    x = _arr(student)
    w = _arr(weights)
    b = _arr(bias)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ValueError(f"shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def channel_project_backward(student, weights, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`channel_project`."""
    x = _arr(student)
    w = _arr(weights)
    g = _arr(grad_out)
    grad_in = np.einsum("oc,ohw->chw", w, g)
    grad_w = np.einsum("ohw,chw->oc", g, x)
    grad_b = g.sum(axis=(1, 2))
    return grad_in, grad_w, grad_b


def rakd_loss(teacher, student_proj, w_ra: MaskGrid | np.ndarray, squared: bool = False) -> LossValue:
    """Mask-weighted per-cell channel distance, averaged over active cells.

    The distance is the plain Euclidean norm unless ``squared``. At cells with
    zero difference the norm's subgradient is taken as 0. An all-zero mask
    gives a zero loss.
    """
    t = _arr(teacher)
    s = _arr(student_proj)
    w = _check_pair(t, s, w_ra)
    n = int(np.count_nonzero(w))
    if n == 0:
        return LossValue(0.0, np.zeros_like(s), 0)
    diff = t - s
    if squared:
        per_cell = np.sum(diff * diff, axis=0)
        value = float(np.sum(w * per_cell)) / n
        grad = (-2.0 / n) * w[None] * diff
        return LossValue(value, grad, n)
    norm = np.sqrt(np.sum(diff * diff, axis=0))
    value = float(np.sum(w * norm)) / n
    safe = np.where(norm > 0, norm, 1.0)
    coef = np.where(norm > 0, w / safe, 0.0)
    grad = (-1.0 / n) * coef[None] * diff
    return LossValue(value, grad, n)


def tkd_loss(teacher, student_aligned, w_t: MaskGrid | np.ndarray) -> LossValue:
    """Mask-weighted squared channel distance, averaged over active cells."""
    return rakd_loss(teacher, student_aligned, w_t, squared=True)


def select_confident_positions(cls_scores, tau_cls: float, k_max: int = K_MAX_DEFAULT) -> np.ndarray:
    """Cells whose best class score exceeds ``tau_cls``.

    Returns a ``(K, 2)`` int array of ``(row, col)`` in row-major order. When
    more than ``k_max`` cells qualify, the highest-scoring ``k_max`` are kept
    (earlier row-major cells win ties).
    """
    scores = _arr(cls_scores)
    if scores.ndim == 2:
        scores = scores[None]
    conf = scores.max(axis=0).ravel()
    idx = np.flatnonzero(conf > tau_cls)
    if idx.size > k_max:
        order = np.argsort(-conf[idx], kind="stable")[:k_max]
        idx = np.sort(idx[order])
    rows, cols = np.divmod(idx, scores.shape[2])
    return np.stack([rows, cols], axis=1).astype(np.int64)


def gather_vectors(features, positions) -> np.ndarray:
    """``(K, C)`` matrix of feature vectors at the given ``(row, col)`` cells."""
    f = _arr(features)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    return f[:, pos[:, 0], pos[:, 1]].T


def affinity_from_vectors(vectors) -> AffinityMap:
    v = _arr(vectors)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("affinity map needs at least one feature vector")
    norms = np.sqrt(np.sum(v * v, axis=1))
    nonzero = norms > 0
    unit = np.zeros_like(v)
    unit[nonzero] = v[nonzero] / norms[nonzero, None]
    sim = unit @ unit.T
    # exact unit diagonal, also for zero-norm vectors
    np.fill_diagonal(sim, 1.0)
    np.clip(sim, -1.0, 1.0, out=sim)
    return AffinityMap(sim, unit, norms)


def affinity_map(features, positions) -> AffinityMap:
    """Cosine similarities between the feature vectors at ``positions``.

    Raises ``ValueError`` when no positions are given.
    """
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    if pos.shape[0] == 0:
        raise ValueError("empty selection: no positions for the affinity map")
    return affinity_from_vectors(gather_vectors(features, pos))


def rdkd_loss(s_teacher: AffinityMap, s_student: AffinityMap) -> LossValue:
    """Mean absolute difference of two affinity maps.

    ``grad`` is w.r.t. the ``K`` student feature vectors (shape ``(K, C)``)
    when ``s_student`` carries them, otherwise w.r.t. the student matrix.
    """
    a = s_teacher.values
    b = s_student.values
    if a.shape != b.shape:
        raise ValueError(f"affinity size mismatch: {a.shape} vs {b.shape}")
    k = a.shape[0]
    if k == 0:
        return LossValue(0.0, np.zeros((0, 0)), 0)
    diff = a - b
    value = float(np.sum(np.abs(diff))) / (k * k)
    g_sim = -np.sign(diff) / (k * k)
    np.fill_diagonal(g_sim, 0.0)
    if s_student.unit is None:
        return LossValue(value, g_sim, k)
    u = s_student.unit
    g_unit = (g_sim + g_sim.T) @ u
    # project out the radial part and undo the normalization
    radial = np.sum(g_unit * u, axis=1, keepdims=True)
    norms = s_student.norms
    safe = np.where(norms > 0, norms, 1.0)
    g_vec = np.where((norms > 0)[:, None], (g_unit - radial * u) / safe[:, None], 0.0)
    return LossValue(value, g_vec, k)


def rdkd_loss_grid(teacher_high, student_high, positions) -> LossValue:
    """RDKD loss with the gradient scattered back onto the ``(C, H, W)`` student grid."""
    t = _arr(teacher_high)
    s = _arr(student_high)
    if t.ndim != 3 or t.shape[1:] != s.shape[1:]:
        raise ValueError(f"teacher {t.shape} and student {s.shape} must share (H, W)")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(s)
    if pos.shape[0] == 0:
        return LossValue(0.0, grad, 0)
    lv = rdkd_loss(affinity_map(t, pos), affinity_map(s, pos))
    # positions are unique, so plain fancy-index assignment is a scatter
    grad[:, pos[:, 0], pos[:, 1]] = lv.grad.T
    return LossValue(lv.value, grad, lv.n_active)


def total_loss(l_det: float, l_ra: LossValue, l_t: LossValue, l_rd: LossValue, cfg: DistillConfig) -> TotalLoss:
    weights = {"ra": cfg.lambda_ra, "t": cfg.lambda_t, "rd": cfg.lambda_rd}
    parts = {"ra": l_ra, "t": l_t, "rd": l_rd}
    if any(v < 0 for v in weights.values()):
        raise ValueError("loss weights must be non-negative")
    value = float(l_det)
    for name in ("ra", "t", "rd"):
        value += weights[name] * parts[name].value
    return TotalLoss(
        value=value,
        grads={name: weights[name] * parts[name].grad for name in parts},
        terms={"det": float(l_det), **{name: parts[name].value for name in parts}},
    )


def loss_report_json(lv: LossValue, name: str) -> str:
    return json.dumps(lv.report(name), sort_keys=True)
