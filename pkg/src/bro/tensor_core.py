"""Dense float64 tensor helpers, closed-form vector-Jacobian products and the
finite-difference gradient oracle used to check them.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C order.
Every function here is pure; inputs are never modified.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Callable

import numpy as np

MAGIC = b"BROT"
FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input hits a guarded singularity (zero norm, empty region, ...)."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad @ b.T, a.T @ grad


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Pull ``grad`` back through a row softmax whose result is ``out``."""
    return out * (grad - np.sum(grad * out, axis=-1, keepdims=True))


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def frobenius_norm_vjp(m: np.ndarray, grad: float) -> np.ndarray:
    n = frobenius_norm(m)
    if n == 0.0:
        return np.zeros_like(m)
    return grad * m / n


def regroup(
    t: np.ndarray,
    mode: str,
    shape: tuple[int, int, int] | None = None,
    source: str = "channel_rows",
) -> np.ndarray:
    """Switch a D x H x W feature map between its matrix views.

    ``to_pixel_rows`` gives (H*W, D), ``to_channel_rows`` gives (D, H*W).
    ``inverse`` restores D x H x W from the view named by ``source`` and
    needs the original ``shape``.
    """
    t = np.asarray(t, dtype=np.float64)
    if mode in ("to_pixel_rows", "to_channel_rows"):
        if t.ndim != 3:
            raise DimensionError(f"{mode} needs a D x H x W tensor, got {t.shape}")
        rows = t.reshape(t.shape[0], -1)
        return np.ascontiguousarray(rows.T) if mode == "to_pixel_rows" else rows.copy()
    if mode == "inverse":
        if shape is None or len(shape) != 3:
            raise DimensionError("inverse regroup needs the original (D, H, W) shape")
        d, h, w = shape
        if source == "channel_rows" and t.shape == (d, h * w):
            return t.reshape(d, h, w).copy()
        if source == "pixel_rows" and t.shape == (h * w, d):
            return np.ascontiguousarray(t.T).reshape(d, h, w)
        raise DimensionError(f"cannot restore {source} matrix {t.shape} to {tuple(shape)}")
    raise ValueError(f"unknown regroup mode {mode!r}")


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ||a-b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# binary file format: "BROT", u8 version, u32 rank, rank x u64 extents, f64 data (all little-endian)

def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<BI", FORMAT_VERSION, t.ndim))
    fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fh.write(t.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    header = fh.read(5)
    if len(header) != 5:
        raise ValueError("truncated tensor header")
    version, rank = struct.unpack("<BI", header)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ValueError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise ValueError("truncated tensor data")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
