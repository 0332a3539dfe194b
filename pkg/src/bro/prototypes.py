"""Prototype extraction and cosine-similarity segmentation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor_core import DegenerateInputError, DimensionError

DEFAULT_KAPPA = 20.0


@dataclass(frozen=True)
class Prototype:
    vector: np.ndarray
    kind: str = "foreground"
    origin: str = "global_map"
    # pixels pooled into the vector; kept so gradients can be routed back
    region: np.ndarray | None = None


@dataclass(frozen=True)
class PredictionMap:
    prob_fg: np.ndarray
    prob_bg: np.ndarray


def _check_mask(f: np.ndarray, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m).astype(bool)
    if f.ndim != 3 or m.shape != f.shape[1:]:
        raise DimensionError(f"mask {m.shape} does not match feature map {f.shape}")
    return m


def masked_avg_pool(
    f: np.ndarray, m: np.ndarray, kind: str = "foreground", origin: str = "global_map"
) -> Prototype:
    f = np.asarray(f, dtype=np.float64)
    m = _check_mask(f, m)
    count = int(m.sum())
    if count == 0:
        raise DegenerateInputError("masked average pooling over an empty region")
    vec = f[:, m].sum(axis=1) / count
    return Prototype(vec, kind, origin, m)


def masked_avg_pool_vjp(shape: tuple[int, ...], proto: Prototype, grad: np.ndarray) -> np.ndarray:
    """Gradient of the pooled vector with respect to the feature map."""
    out = np.zeros(shape)
    region = proto.region
    out[:, region] = (np.asarray(grad)[:, None] / region.sum())
    return out


def grid_local_prototypes(
    f: np.ndarray,
    m: np.ndarray,
    cell: int,
    min_pixels: int = 1,
    kind: str = "foreground",
) -> list[Prototype]:
    """Masked pooling inside each ``cell`` x ``cell`` tile of the map.

    Tiles with fewer than ``min_pixels`` masked pixels are skipped; if every
    tile is skipped the global masked mean is returned instead.
    """
    if cell < 1:
        raise ValueError("cell size must be at least 1")
    f = np.asarray(f, dtype=np.float64)
    m = _check_mask(f, m)
    if not m.any():
        return []
    _, h, w = f.shape
    protos = []
    for top in range(0, h, cell):
        for left in range(0, w, cell):
            tile = np.zeros_like(m)
            tile[top:top + cell, left:left + cell] = m[top:top + cell, left:left + cell]
            if tile.sum() >= min_pixels:
                protos.append(masked_avg_pool(f, tile, kind, "grid_local"))
    if not protos:
        protos.append(masked_avg_pool(f, m, kind, "global_map"))
    return protos


def _cosine_parts(f_q: np.ndarray, p: np.ndarray):
    p_norm = float(np.linalg.norm(p))
    if p_norm == 0.0:
        raise DegenerateInputError("prototype has zero norm")
    x_norm = np.sqrt(np.sum(f_q * f_q, axis=0))
    safe = np.where(x_norm > 0.0, x_norm, 1.0)
    dots = np.tensordot(p, f_q, axes=(0, 0))
    cos = np.where(x_norm > 0.0, dots / (safe * p_norm), 0.0)
    return cos, x_norm, safe, p_norm


def cosine_map(f_q: np.ndarray, p, kappa: float = DEFAULT_KAPPA) -> np.ndarray:
    """Per-pixel ``kappa * cos(f_q[:, h, w], p)``; zero-norm pixels score 0."""
    vec = p.vector if isinstance(p, Prototype) else np.asarray(p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_q.ndim != 3 or vec.shape != (f_q.shape[0],):
        raise DimensionError(f"prototype {vec.shape} does not match feature map {f_q.shape}")
    return kappa * _cosine_parts(f_q, vec)[0]


def cosine_map_vjp(
    f_q: np.ndarray, p: np.ndarray, kappa: float = DEFAULT_KAPPA
) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    f_q = np.asarray(f_q, dtype=np.float64)
    cos, x_norm, safe, p_norm = _cosine_parts(f_q, p)
    live = x_norm > 0.0

    def pullback(grad: np.ndarray):
        g = kappa * np.where(live, grad, 0.0)
        # d cos / d x = p/(|x||p|) - cos x/|x|^2 ; d cos / d p = x/(|x||p|) - cos p/|p|^2
        w = g / (safe * p_norm)
        d_f = p[:, None, None] * w[None] - f_q * (g * cos / safe**2)[None]
        d_p = np.tensordot(f_q, w, axes=((1, 2), (0, 1))) - p * float(np.sum(g * cos)) / p_norm**2
        return d_f, d_p

    return kappa * cos, pullback


def predict(fg_maps: Sequence[np.ndarray], bg_map: np.ndarray, reduction: str = "max") -> PredictionMap:
    return predict_vjp(fg_maps, bg_map, reduction)[0]


def predict_vjp(fg_maps: Sequence[np.ndarray], bg_map: np.ndarray, reduction: str = "max"):
    """Two-way softmax over (foreground score, background score).

    The foreground score is the per-pixel max over ``fg_maps`` or, with
    ``reduction="softmax"``, their softmax-weighted sum. The pullback maps
    d(prob_fg) to (list of d fg_map, d bg_map).
    """
    if len(fg_maps) == 0:
        raise ValueError("predict needs at least one foreground map")
    stack = np.stack([np.asarray(x, dtype=np.float64) for x in fg_maps])
    bg = np.asarray(bg_map, dtype=np.float64)
    if reduction == "max":
        idx = np.argmax(stack, axis=0)
        fg = np.take_along_axis(stack, idx[None], axis=0)[0]
        weights = None
    elif reduction == "softmax":
        weights = np.exp(stack - stack.max(axis=0, keepdims=True))
        weights /= weights.sum(axis=0, keepdims=True)
        fg = np.sum(weights * stack, axis=0)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = fg - bg
    prob_fg = 0.5 * (1.0 + np.tanh(0.5 * diff))
    prob_bg = 0.5 * (1.0 - np.tanh(0.5 * diff))
    pred = PredictionMap(prob_fg, prob_bg)

    def pullback(d_prob_fg: np.ndarray):
        d_diff = np.asarray(d_prob_fg) * prob_fg * prob_bg
        if weights is None:
            d_stack = np.zeros_like(stack)
            np.put_along_axis(d_stack, idx[None], d_diff[None], axis=0)
        else:
            d_stack = weights * (1.0 + stack - fg[None]) * d_diff[None]
        return list(d_stack), -d_diff

    return pred, pullback
