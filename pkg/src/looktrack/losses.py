"""Training objectives of the sequential tracker and the grid network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Tensor

SQRT_SMOOTHING = 1e-12


@dataclass(frozen=True)
class Eq1Params:
    """Weights of the combined classification / ellipse objective."""

    lambda1: float = 0.5
    lambda2: float = 0.35
    lambda3: float = 0.15
    alpha: float = 0.95
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Eq1Params":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**data)


def clamp_prob(p: Tensor) -> Tensor:
    return ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(p, p_pred, alpha: float = 0.95, gamma: float = 2.0) -> Tensor:
    """Balanced focal loss, elementwise.

    FL = -p a (1-q)^g log q - q^g (1-p)(1-a) log(1-q), with q clamped.
    """
    p = ad.as_tensor(p)
    q = clamp_prob(ad.as_tensor(p_pred))
    one_minus_q = 1.0 - q
    pos = p * alpha * ad.power(one_minus_q, gamma) * ad.log(q)
    neg = ad.power(q, gamma) * (1.0 - p) * (1.0 - alpha) * ad.log(one_minus_q)
    return -(pos + neg)


def eq1_loss(
    p,
    p_pred: Tensor | None,
    center: Tensor | None,
    axes: Tensor | None,
    target: np.ndarray | None,
    params: Eq1Params = Eq1Params(),
) -> Tensor:
    """Mean sequential-tracker loss over a batch.

    ``p`` (n,) labels; ``p_pred`` (n,) probabilities or None when the
    classification head is inactive (length-2 inputs); ``center``/``axes``
    (n, 2) ellipse outputs and ``target`` (n, 2) true next points, or None
    when the regression head is inactive (full-length inputs).  Rows of
    ``target`` may be NaN only where the label is 0.
    """
    labels = np.asarray(p, dtype=np.float64).reshape(-1)
    n = len(labels)
    total = Tensor(np.zeros(n))
    if p_pred is not None:
        weight = np.maximum(params.lambda1, 1.0 - labels)
        total = total + weight * focal_loss(labels, p_pred.reshape(n), params.alpha, params.gamma)
    if center is not None:
        if target is None:
            raise ValueError("regression head active but no next points given")
        target = np.asarray(target, dtype=np.float64).reshape(n, 2)
        missing = np.isnan(target).any(axis=1)
        if (missing & (labels == 1)).any():
            raise ValueError("true candidate without a next point")
        target = np.where(missing[:, None], 0.0, target)
        r1, r2 = axes[:, 0], axes[:, 1]
        u = (target[:, 0] - center[:, 0]) / r1
        v = (target[:, 1] - center[:, 1]) / r2
        dist = ad.sqrt(u * u + v * v + SQRT_SMOOTHING)
        regression = params.lambda2 * dist + params.lambda3 * (r1 * r2)
        total = total + labels * regression
    return total.mean()


def eq1_single(p: int, p_pred: float | None, ellipse: tuple | None, next_point: tuple | None,
               params: Eq1Params = Eq1Params()) -> float:
    """Scalar convenience wrapper: ``ellipse`` is (x', y', R1, R2)."""
    q = None if p_pred is None else Tensor([p_pred])
    center = axes = None
    target = None
    if ellipse is not None:
        center = Tensor([[ellipse[0], ellipse[1]]])
        axes = Tensor([[ellipse[2], ellipse[3]]])
        target = np.array([next_point if next_point is not None else (np.nan, np.nan)], dtype=float)
    return eq1_loss([p], q, center, axes, target, params).item()


def eq2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Grid loss: mean cell cross-entropy plus masked squared shift error.

    ``pred`` and ``target`` are (..., h, w, 2(d-1)+1) with the confidence
    in channel 0.  The squared-error sum runs over all shift channels and
    is divided by the number of anchor cells (at least 1).
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    t_conf = target[..., 0]
    q = clamp_prob(pred[..., 0])
    ce = -(t_conf * ad.log(q) + (1.0 - t_conf) * ad.log(1.0 - q))
    n_cells = int(np.prod(t_conf.shape[-2:]))
    if pred.ndim > 3:
        n_cells *= int(np.prod(t_conf.shape[:-2]))
    mask = t_conf[..., None]
    nz = max(1, int(np.count_nonzero(t_conf)))
    resid = pred[..., 1:] * mask - target[..., 1:]
    return ce.sum() * (1.0 / n_cells) + (resid * resid).sum() * (1.0 / nz)
