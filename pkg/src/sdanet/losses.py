"""Coarse attention loss, fine map loss (Euclidean + relative count), and MAE/MSE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .tensor import Tensor, add, mul, scale, square, sub_const, sum_all, sum_per_sample


@dataclass
class LossConfig:
    alpha: float = 0.01
    eps: float = 1e-4
    m_norm: float = 32.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not self.m_norm > 0:
            raise ValueError(f"m_norm must be > 0, got {self.m_norm}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    l_att: Tensor
    l_e: Tensor
    l_c: Tensor
    l_map: Tensor
    total: Tensor
    objective: Tensor  # what gets differentiated; ``total`` unless the fine head is ablated

    def as_dict(self) -> dict:
        return {k: getattr(self, k).item() for k in ("l_att", "l_e", "l_c", "l_map", "total")}


def _gt_array(d_gt, like: Tensor) -> np.ndarray:
    """Bring ground truth to the prediction's ``(N, 1, H, W)`` shape."""
    if hasattr(d_gt, "grid"):
        d_gt = d_gt.grid
    if isinstance(d_gt, (list, tuple)):
        d_gt = np.stack([getattr(d, "grid", d) for d in d_gt])
    arr = np.asarray(d_gt, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != like.shape:
        raise ValueError(f"ground truth shape {arr.shape} does not match prediction {like.shape}")
    return arr


def loss_att(d_coarse: Tensor, d_gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """Squared error of the coarse map scaled by ``1/m_norm``, averaged over the batch."""
    gt = _gt_array(d_gt, d_coarse)
    n = d_coarse.shape[0]
    return scale(sum_all(square(sub_const(d_coarse, gt))), 1.0 / (cfg.m_norm * n))


def loss_map(d_fine: Tensor, d_gt, cfg: LossConfig = LossConfig()) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns ``(l_e, l_c, l_map)`` with counts taken as full-map sums."""
    gt = _gt_array(d_gt, d_fine)
    n = d_fine.shape[0]
    l_e = scale(sum_all(square(sub_const(d_fine, gt))), 1.0 / n)
    counts = gt.sum(axis=(1, 2, 3), keepdims=True)
    # sign flip inside the square: (C_hat - C) instead of (C - C_hat)
    rel = _scale_per_sample(sub_const(sum_per_sample(d_fine), counts), 1.0 / (counts + cfg.eps))
    l_c = scale(sum_all(square(rel)), 1.0 / n)
    l_map = add(l_e, scale(l_c, cfg.alpha))
    return l_e, l_c, l_map


def _scale_per_sample(x: Tensor, factors: np.ndarray) -> Tensor:
    return mul(x, Tensor(np.asarray(factors, dtype=np.float64).reshape(x.shape)))


def total_loss(outputs, d_gt, cfg: LossConfig = LossConfig(), refine: bool = True) -> LossBreakdown:
    """Full loss breakdown.

    When ``refine`` is False the fine head does not exist (``D_F`` aliases
    ``D_C``); all components are still reported, but only ``l_att`` is
    optimised.
    """
    l_att = loss_att(outputs.D_C, d_gt, cfg)
    l_e, l_c, l_map = loss_map(outputs.D_F, d_gt, cfg)
    total = add(l_att, l_map)
    return LossBreakdown(l_att, l_e, l_c, l_map, total, total if refine else l_att)


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    mae: float
    mse: float  # root of the mean squared count error
    n: int

    def to_dict(self):
        return asdict(self)


def evaluate_metrics(pairs: Iterable[Sequence[float]]) -> Metrics:
    """MAE and root-mean-square count error over ``(predicted, true)`` pairs."""
    pairs = [(float(p), float(t)) for p, t in pairs]
    if not pairs:
        raise ValueError("evaluate_metrics needs at least one (predicted, true) pair")
    n = len(pairs)
    errors = [t - p for p, t in pairs]
    abs_sum = sum(abs(e) for e in errors)
    sq_sum = sum(e * e for e in errors)
    return Metrics(mae=abs_sum / n, mse=math.sqrt(sq_sum / n), n=n)
