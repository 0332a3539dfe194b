"""Feature similarity calibration: support/query cross-attention with a
residual connection.

With ``Us``, ``Uq`` the (H*W, D) pixel-row views of the support and query
maps::

    A   = softmax_rows(Us @ Uq.T)
    out = (A @ Us) / (||Us||_F * ||Uq||_F) + Us
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor_core import (
    DegenerateInputError,
    DimensionError,
    frobenius_norm,
    regroup,
    softmax_rows,
    softmax_rows_vjp,
)


@dataclass(frozen=True)
class CalibratedFeature:
    values: np.ndarray
    source_shape: tuple[int, int, int]
    attention: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


Pullback = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def calibrate_vjp(f_s: np.ndarray, f_q: np.ndarray) -> tuple[CalibratedFeature, Pullback]:
    """Forward pass plus a pullback mapping d(out) to (d f_s, d f_q)."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_s.ndim != 3 or f_s.shape != f_q.shape:
        raise DimensionError(f"support {f_s.shape} and query {f_q.shape} maps must match")
    shape = f_s.shape
    us = regroup(f_s, "to_pixel_rows")
    uq = regroup(f_q, "to_pixel_rows")
    ns = frobenius_norm(us)
    nq = frobenius_norm(uq)
    if ns == 0.0 or nq == 0.0:
        raise DegenerateInputError("feature map has zero Frobenius norm")

    attn = softmax_rows(us @ uq.T)
    mixed = attn @ us
    scale = 1.0 / (ns * nq)
    out = mixed * scale + us
    result = CalibratedFeature(regroup(out, "inverse", shape, source="pixel_rows"), shape, attn)

    def pullback(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = regroup(np.asarray(grad, dtype=np.float64), "to_pixel_rows")
        d_us = g.copy()
        d_mixed = g * scale
        d_scale = float(np.sum(g * mixed))
        d_attn = d_mixed @ us.T
        d_us += attn.T @ d_mixed
        d_logits = softmax_rows_vjp(attn, d_attn)
        d_us += d_logits @ uq
        d_uq = d_logits.T @ us
        # scale = 1/(ns*nq): d scale / d ns = -scale/ns, d ns / d us = us/ns
        d_us -= d_scale * scale / ns**2 * us
        d_uq -= d_scale * scale / nq**2 * uq
        return (
            regroup(d_us, "inverse", shape, source="pixel_rows"),
            regroup(d_uq, "inverse", shape, source="pixel_rows"),
        )

    return result, pullback


def calibrate(f_s: np.ndarray, f_q: np.ndarray) -> CalibratedFeature:
    return calibrate_vjp(f_s, f_q)[0]
