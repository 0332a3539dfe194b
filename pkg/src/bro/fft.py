"""Iterative radix-2 FFT with a Bluestein chirp-z fallback for other lengths.

Transforms act on the last axis and are vectorised over the leading ones.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    out = x[..., _bit_reversal(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[-1]


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << (2 * n - 2).bit_length()
    k = np.arange(n)
    # n^2 reduced mod 2n keeps the chirp phase accurate for large n
    chirp = np.exp(1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * np.conj(chirp)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = chirp
    b[m - n + 1:] = chirp[1:][::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * np.conj(chirp)


def fft(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cannot transform an empty axis")
    if n == 1:
        return x.astype(np.complex128)
    return _fft_pow2(x) if _is_pow2(n) else _bluestein(x)


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT over the last two axes."""
    rows = fft(np.asarray(x))
    return np.swapaxes(fft(np.swapaxes(rows, -1, -2)), -1, -2)

