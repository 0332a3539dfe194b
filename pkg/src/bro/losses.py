"""Training losses and the Dice metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prototypes import PredictionMap
from .tensor_core import DimensionError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    reg: float
    adv: float
    beta: float
    total: float


def _cross_entropy(pred: PredictionMap, truth: np.ndarray) -> float:
    truth = np.asarray(truth).astype(bool)
    if truth.shape != pred.prob_fg.shape:
        raise DimensionError(f"prediction {pred.prob_fg.shape} and mask {truth.shape} differ")
    p_fg = np.clip(pred.prob_fg, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_bg = np.clip(pred.prob_bg, PROB_CLAMP, 1.0 - PROB_CLAMP)
    picked = np.where(truth, np.log(p_fg), np.log(p_bg))
    return float(-picked.mean())


def _cross_entropy_grad(pred: PredictionMap, truth: np.ndarray) -> np.ndarray:
    """d loss / d prob_fg, with prob_bg = 1 - prob_fg; zero where the clamp is active."""
    truth = np.asarray(truth).astype(bool)
    n = truth.size
    p_fg, p_bg = pred.prob_fg, pred.prob_bg
    live_fg = (p_fg > PROB_CLAMP) & (p_fg < 1.0 - PROB_CLAMP)
    live_bg = (p_bg > PROB_CLAMP) & (p_bg < 1.0 - PROB_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(truth, np.where(live_fg, -1.0 / p_fg, 0.0), np.where(live_bg, 1.0 / p_bg, 0.0))
    return g / n


def seg_loss(pred: PredictionMap, truth: np.ndarray) -> float:
    """Pixel-averaged two-class cross-entropy of the query prediction."""
    return _cross_entropy(pred, truth)


def reg_loss(pred_support: PredictionMap, support_truth: np.ndarray) -> float:
    """Alignment term: the same cross-entropy, on the support prediction."""
    return _cross_entropy(pred_support, support_truth)


seg_loss_grad = _cross_entropy_grad
reg_loss_grad = _cross_entropy_grad


def total_loss(seg: float, reg: float, adv: float, beta: float) -> LossBreakdown:
    return LossBreakdown(seg, reg, adv, beta, seg + reg + beta * adv)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 100.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom * 100.0
