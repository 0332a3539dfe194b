"""Hierarchical channel-adversarial attention.

Channels of the calibrated support map are packed into groups of ``N``
neighbours, a group-by-group Gram matrix gives the coarse similarity, the
trainable Mean-Offset matrix refines it, and the resulting row-stochastic
weights mix the groups into the background-fused feature map.
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

OFFSET_EPS = 1e-8
NORM_PLACEMENTS = ("inside", "outside")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelGroups:
    g: np.ndarray
    group_size: int
    source_shape: tuple[int, int, int]

    @property
    def n_groups(self) -> int:
        return self.g.shape[0]


@dataclass
class MeanOffset:
    """Trainable similarity offset; mutated only by the trainer between steps."""

    b_delta: np.ndarray
    alpha: float = 0.2

    @classmethod
    def zeros(cls, n_groups: int, alpha: float = 0.2) -> "MeanOffset":
        return cls(np.zeros((n_groups, n_groups)), alpha)

    def __post_init__(self) -> None:
        self.b_delta = np.asarray(self.b_delta, dtype=np.float64)
        if self.b_delta.ndim != 2 or self.b_delta.shape[0] != self.b_delta.shape[1]:
            raise DimensionError(f"offset must be square, got {self.b_delta.shape}")


@dataclass(frozen=True)
class FineSimilarity:
    b_f: np.ndarray
    b_c: np.ndarray


def channel_groups(f: np.ndarray, n: int) -> ChannelGroups:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"expected a D x H x W map, got {f.shape}")
    d = f.shape[0]
    if n < 1 or d % n:
        raise ConfigurationError(f"group size N={n} does not divide channel count D={d}")
    # row-major reshape of the (D, H*W) channel rows concatenates neighbours
    g = regroup(f, "to_channel_rows").reshape(d // n, -1)
    return ChannelGroups(g, n, f.shape)


def coarse_similarity(groups: ChannelGroups) -> np.ndarray:
    g = groups.g
    return g @ g.T


def _scale(g_norm: float, offset: MeanOffset | None) -> float:
    if g_norm <= 0.0:
        raise DegenerateInputError("channel groups have zero norm")
    if offset is None:
        return g_norm**2
    return g_norm**2 * max(frobenius_norm(offset.b_delta), OFFSET_EPS)


def fine_similarity_vjp(
    b_c: np.ndarray,
    offset: MeanOffset | None,
    g_norm: float,
    norm_placement: str = "inside",
) -> tuple[FineSimilarity, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None, float]]]:
    """Mean-Offset refinement of ``b_c``.

    ``offset=None`` drops the offset and its norm from the expression, which
    leaves plain self-cross attention. The pullback maps d(B_f) to
    (d B_c, d B_delta or None, d g_norm).
    """
    if norm_placement not in NORM_PLACEMENTS:
        raise ConfigurationError(f"norm_placement must be one of {NORM_PLACEMENTS}")
    b_c = np.asarray(b_c, dtype=np.float64)
    if offset is not None and offset.b_delta.shape != b_c.shape:
        raise DimensionError(f"offset {offset.b_delta.shape} does not match B_c {b_c.shape}")
    s = _scale(g_norm, offset)
    logits = b_c + offset.alpha * offset.b_delta if offset is not None else b_c
    if norm_placement == "inside":
        probs = softmax_rows(logits / s)
        b_f = probs
    else:
        probs = softmax_rows(logits)
        b_f = probs / s

    def pullback(grad: np.ndarray):
        grad = np.asarray(grad, dtype=np.float64)
        if norm_placement == "inside":
            d_z = softmax_rows_vjp(probs, grad)
            d_logits = d_z / s
            d_s = -float(np.sum(d_z * logits)) / s**2
        else:
            d_logits = softmax_rows_vjp(probs, grad / s)
            d_s = -float(np.sum(grad * probs)) / s**2
        if offset is None:
            return d_logits, None, d_s * 2.0 * g_norm
        b_norm = frobenius_norm(offset.b_delta)
        d_bdelta = offset.alpha * d_logits
        if b_norm > OFFSET_EPS:
            d_bdelta = d_bdelta + d_s * g_norm**2 * offset.b_delta / b_norm
        d_gnorm = d_s * 2.0 * g_norm * max(b_norm, OFFSET_EPS)
        return d_logits, d_bdelta, d_gnorm

    return FineSimilarity(b_f, b_c), pullback


def fine_similarity(
    b_c: np.ndarray,
    offset: MeanOffset | None,
    g_norm: float,
    norm_placement: str = "inside",
) -> FineSimilarity:
    return fine_similarity_vjp(b_c, offset, g_norm, norm_placement)[0]


def fuse(sim: FineSimilarity, groups: ChannelGroups) -> np.ndarray:
    b_f = sim.b_f if isinstance(sim, FineSimilarity) else np.asarray(sim)
    if b_f.shape != (groups.n_groups, groups.n_groups):
        raise DimensionError(f"B_f {b_f.shape} does not match {groups.n_groups} groups")
    mixed = b_f @ groups.g
    d = groups.source_shape[0]
    return regroup(mixed.reshape(d, -1), "inverse", groups.source_shape)


def adversarial_loss(sim) -> float:
    """Squared Frobenius distance of B_f from the identity."""
    b_f = sim.b_f if isinstance(sim, FineSimilarity) else np.asarray(sim, dtype=np.float64)
    if b_f.ndim != 2 or b_f.shape[0] != b_f.shape[1]:
        raise DimensionError(f"adversarial loss needs a square matrix, got {b_f.shape}")
    return float(np.sum(np.square(b_f - np.eye(b_f.shape[0]))))


def adversarial_loss_grad(b_f: np.ndarray) -> np.ndarray:
    return 2.0 * (b_f - np.eye(b_f.shape[0]))


@dataclass(frozen=True)
class HicaOutput:
    fused: np.ndarray
    similarity: FineSimilarity
    groups: ChannelGroups


def hica_vjp(
    f: np.ndarray,
    offset: MeanOffset | None,
    group_size: int,
    norm_placement: str = "inside",
):
    """Full attention block on a D x H x W map.

    Returns the output and a pullback taking (d fused, d B_f) and giving
    (d f, d B_delta or None).
    """
    groups = channel_groups(f, group_size)
    g = groups.g
    b_c = coarse_similarity(groups)
    g_norm = frobenius_norm(g)
    sim, sim_pullback = fine_similarity_vjp(b_c, offset, g_norm, norm_placement)
    fused = fuse(sim, groups)

    def pullback(d_fused: np.ndarray, d_bf: np.ndarray | None = None):
        d_mixed = np.asarray(d_fused, dtype=np.float64).reshape(g.shape)
        d_g = sim.b_f.T @ d_mixed
        d_sim = d_mixed @ g.T
        if d_bf is not None:
            d_sim = d_sim + d_bf
        d_bc, d_bdelta, d_gnorm = sim_pullback(d_sim)
        d_g += (d_bc + d_bc.T) @ g
        d_g += d_gnorm * g / g_norm
        return d_g.reshape(groups.source_shape), d_bdelta

    return HicaOutput(fused, sim, groups), pullback
