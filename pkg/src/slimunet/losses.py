"""Segmentation losses: BCE, soft Dice, soft Jaccard and their sums.

``y_p`` are predicted probabilities, ``y_t`` binary targets of the same
shape. Values are computed in float64. Dice/Jaccard sums run over the whole
batch by default (``reduction="batch"``); ``reduction="image"`` computes one
value per leading-axis item and averages them. BCE is always a mean over
pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_EPSILON = 1e-7
LOSS_KINDS = ("L_D", "L_DJ", "L_DJB")
_ALIASES = {"d": "L_D", "dj": "L_DJ", "djb": "L_DJB"}


def _check(y_p, y_t):
    y_p = np.asarray(y_p, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    if y_p.shape != y_t.shape:
        raise ValueError(f"shape mismatch: prediction {y_p.shape} vs target {y_t.shape}")
    return y_p, y_t


def _sum_axes(y, reduction):
    if reduction == "batch":
        return None
    if reduction == "image":
        return tuple(range(1, y.ndim)) if y.ndim > 1 else None
    raise ValueError(f"reduction must be 'batch' or 'image', got {reduction!r}")


def bce_loss(y_p, y_t, eps: float = BCE_EPSILON) -> float:
    """Mean binary cross-entropy with ``y_p`` clamped to ``[eps, 1 - eps]``."""
    y_p, y_t = _check(y_p, y_t)
    p = np.clip(y_p, eps, 1 - eps)
    return float(np.mean(-y_t * np.log(p) - (1 - y_t) * np.log(1 - p)))


def bce_grad(y_p, y_t, eps: float = BCE_EPSILON) -> np.ndarray:
    y_p, y_t = _check(y_p, y_t)
    p = np.clip(y_p, eps, 1 - eps)
    g = (-y_t / p + (1 - y_t) / (1 - p)) / y_p.size
    # the clamp is flat outside [eps, 1 - eps]
    return np.where((y_p >= eps) & (y_p <= 1 - eps), g, 0.0)


def dice_loss(y_p, y_t, s: float = 1.0, reduction: str = "batch") -> float:
    """``1 - (2 sum(t p) + s) / (sum t + sum p + s)``."""
    y_p, y_t = _check(y_p, y_t)
    axes = _sum_axes(y_p, reduction)
    inter = np.sum(y_t * y_p, axis=axes)
    denom = np.sum(y_t, axis=axes) + np.sum(y_p, axis=axes) + s
    return float(np.mean(1 - (2 * inter + s) / denom))


def dice_grad(y_p, y_t, s: float = 1.0, reduction: str = "batch") -> np.ndarray:
    y_p, y_t = _check(y_p, y_t)
    axes = _sum_axes(y_p, reduction)
    inter = np.sum(y_t * y_p, axis=axes, keepdims=axes is not None)
    denom = np.sum(y_t, axis=axes, keepdims=axes is not None) + np.sum(
        y_p, axis=axes, keepdims=axes is not None) + s
    g = -(2 * y_t * denom - (2 * inter + s)) / denom**2
    if axes is not None:
        g = g / y_p.shape[0]
    return g


def jaccard_loss(y_p, y_t, s: float = 1.0, reduction: str = "batch") -> float:
    """``1 - (sum(t p) + s) / (sum t + sum p - sum(t p) + s)``."""
    y_p, y_t = _check(y_p, y_t)
    axes = _sum_axes(y_p, reduction)
    inter = np.sum(y_t * y_p, axis=axes)
    union = np.sum(y_t, axis=axes) + np.sum(y_p, axis=axes) - inter
    return float(np.mean(1 - (inter + s) / (union + s)))


def jaccard_grad(y_p, y_t, s: float = 1.0, reduction: str = "batch") -> np.ndarray:
    y_p, y_t = _check(y_p, y_t)
    axes = _sum_axes(y_p, reduction)
    kd = axes is not None
    inter = np.sum(y_t * y_p, axis=axes, keepdims=kd)
    union = np.sum(y_t, axis=axes, keepdims=kd) + np.sum(y_p, axis=axes, keepdims=kd) - inter
    g = -(y_t * (union + s) - (inter + s) * (1 - y_t)) / (union + s) ** 2
    if kd:
        g = g / y_p.shape[0]
    return g


@dataclass(frozen=True)
class LossSpec:
    kind: str = "L_DJB"
    smoothing: float = 1.0
    reduction: str = "batch"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind) if isinstance(self.kind, str) else self.kind
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of d, dj, djb")
        object.__setattr__(self, "kind", kind)
        if not self.smoothing > 0:
            raise ValueError("smoothing constant must be strictly positive")
        if self.reduction not in ("batch", "image"):
            raise ValueError(f"reduction must be 'batch' or 'image', got {self.reduction!r}")

    @property
    def short_name(self) -> str:
        return self.kind[2:].lower()


def composite_loss(spec: LossSpec, y_p, y_t) -> tuple[float, np.ndarray]:
    """Loss value and gradient w.r.t. ``y_p`` for ``L_D``, ``L_DJ`` or ``L_DJB``."""
    s, red = spec.smoothing, spec.reduction
    value = dice_loss(y_p, y_t, s, red)
    grad = dice_grad(y_p, y_t, s, red)
    if spec.kind in ("L_DJ", "L_DJB"):
        value += jaccard_loss(y_p, y_t, s, red)
        grad = grad + jaccard_grad(y_p, y_t, s, red)
    if spec.kind == "L_DJB":
        value += bce_loss(y_p, y_t)
        grad = grad + bce_grad(y_p, y_t)
    return value, grad
