"""Training objectives: grounding (smooth-L1 + GIoU + BCE), navigation,
human attention, and their weighted multi-task sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DiffValue, ShapeError

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    kappa1: float = 1.0
    kappa2: float = 3.0
    kappa3: float = 1.5
    lambda1: float = 0.2
    lambda2: float = 0.1
    lambda3: float = 0.25

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    @property
    def kappas(self) -> tuple[float, float, float]:
        return (self.kappa1, self.kappa2, self.kappa3)

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class GroundingTarget:
    c: int
    box: np.ndarray  # (x, y, w, h) centre format; meaningful only when c == 1

    def __post_init__(self):
        self.c = int(self.c)
        self.box = np.asarray(self.box, dtype=float).reshape(4)


@dataclass
class GroundingPrediction:
    c_hat: DiffValue  # (T, 1), or (1,) for a single step
    b_hat: DiffValue  # (T, 4), or (4,)


def smooth_l1(b_hat, b, beta: float = 1.0) -> DiffValue:
    """Mean over the 4 coordinates of the Huber-style smooth-L1 penalty."""
    delta = nx.as_value(b_hat) - nx.as_value(b)
    mag = nx.abs_(delta)
    inner = mag.values < beta
    quad = nx.scale(nx.square(delta), 0.5 / beta)
    lin = mag - 0.5 * beta
    return nx.mean(nx.where(inner, quad, lin))


def _corners(box: DiffValue):
    x, y, w, h = (box[..., i] for i in range(4))
    hw, hh = nx.scale(w, 0.5), nx.scale(h, 0.5)
    return x - hw, y - hh, x + hw, y + hh


def giou_loss(b_hat, b) -> DiffValue:
    """1 - GIoU for centre-format axis-aligned boxes; lies in [0, 2]."""
    b_hat, b = nx.as_value(b_hat), nx.as_value(b)
    for box in (b_hat, b):
        if np.any(box.values[..., 2:] <= 0):
            raise ValueError("GIoU is undefined for a zero-area box")
    ax1, ay1, ax2, ay2 = _corners(b_hat)
    bx1, by1, bx2, by2 = _corners(b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = nx.relu(nx.minimum(ax2, bx2) - nx.maximum(ax1, bx1))
    ih = nx.relu(nx.minimum(ay2, by2) - nx.maximum(ay1, by1))
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (nx.maximum(ax2, bx2) - nx.minimum(ax1, bx1)) * (nx.maximum(ay2, by2) - nx.minimum(ay1, by1))
    giou = inter / union - (enclose - union) / enclose
    return nx.mean(1.0 - giou)


def bce(c_hat, c) -> DiffValue:
    """Binary cross-entropy, averaged over elements; predictions clamped to [1e-7, 1-1e-7]."""
    p = nx.clamp(nx.as_value(c_hat), BCE_CLAMP, 1.0 - BCE_CLAMP)
    c = np.asarray(c, dtype=float)
    if c.shape != p.shape and c.size != p.size:
        raise ShapeError(f"bce: prediction {p.shape} vs label {c.shape}")
    c = c.reshape(p.shape)
    pos = nx.log(p) * c
    neg = nx.log(1.0 - p) * (1.0 - c)
    return -nx.mean(pos + neg)


def _as_list(x, kind):
    return [x] if isinstance(x, kind) else list(x)


def grounding_loss(pred: GroundingPrediction, target, weights: LossWeights = LossWeights()) -> DiffValue:
    """Grounding loss averaged over steps.

    ``target`` is one :class:`GroundingTarget` or a list with one per row of
    ``pred``; box terms only count for steps whose target is in view.
    """
    targets = _as_list(target, GroundingTarget)
    t = len(targets)
    c_hat = nx.reshape(pred.c_hat, (t, 1))
    b_hat = nx.reshape(pred.b_hat, (t, 4))
    k1, k2, k3 = weights.kappas
    c = np.array([[g.c] for g in targets], dtype=float)
    loss = nx.scale(bce(c_hat, c), k3)
    pos = np.nonzero(c[:, 0] == 1)[0]
    if len(pos) == 0:
        return loss
    boxes = np.stack([targets[i].box for i in pos])
    b = b_hat[pos]
    box = nx.scale(smooth_l1(b, boxes), k1) + nx.scale(giou_loss(b, boxes), k2)
    return loss + nx.scale(box, len(pos) / t)


def nav_loss(displacement: DiffValue, stop_prob: DiffValue, oracle, max_step: float) -> DiffValue:
    """MSE on max_step-normalised displacement plus BCE on the stop flag.

    ``oracle`` is one :class:`Action` or a list with one per row.
    """
    oracles = [oracle] if hasattr(oracle, "dx") else list(oracle)
    t = len(oracles)
    target = np.array([[a.dx, a.dy, a.dz] for a in oracles]) / max_step
    stops = np.array([[1.0 if a.stop else 0.0] for a in oracles])
    err = nx.scale(nx.reshape(displacement, (t, 3)), 1.0 / max_step) - target
    return nx.mean(nx.square(err)) + bce(nx.reshape(stop_prob, (t, 1)), stops)


def hap_loss(pred: DiffValue, mask) -> DiffValue:
    """Per-cell BCE between predicted attention and the binary target mask."""
    mask = np.asarray(mask, dtype=float)
    if mask.shape != pred.shape:
        raise ShapeError(f"attention map {pred.shape} vs mask {mask.shape}")
    return bce(pred, mask)


def total_loss(nav, hap, gr, weights: LossWeights = LossWeights()):
    """Weighted multi-task sum; works on DiffValues and plain floats alike."""
    l1, l2, l3 = weights.lambdas
    return nav * l1 + hap * l2 + gr * l3
