"""Three-layer 3x3 convolutional feature extractor with hand-written backward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STRIDES = (2, 2, 1)
RELU = (True, True, False)
WIDTHS = (8, 16)


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, ho, wo))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols


def conv2d_vjp(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, need_input_grad: bool = True):
    """3x3 convolution with zero padding 1; x is (C, H, W), w is (O, C, 3, 3)."""
    c, h, wd = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo).reshape(c * 9, ho * wo)
    wmat = w.reshape(w.shape[0], -1)
    out = (wmat @ cols + b[:, None]).reshape(w.shape[0], ho, wo)

    def pullback(grad: np.ndarray):
        g = grad.reshape(w.shape[0], -1)
        d_w = (g @ cols.T).reshape(w.shape)
        d_b = g.sum(axis=1)
        if not need_input_grad:
            return None, d_w, d_b
        d_cols = (wmat.T @ g).reshape(c, 3, 3, ho, wo)
        d_xp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                d_xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += d_cols[:, i, j]
        return d_xp[:, 1:-1, 1:-1], d_w, d_b

    return out, pullback


@dataclass
class Encoder:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    strides: tuple[int, ...] = field(default=STRIDES)

    @classmethod
    def init(cls, feature_dim: int = 32, seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        chans = (1, *WIDTHS, feature_dim)
        weights, biases = [], []
        for cin, cout in zip(chans[:-1], chans[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            weights.append(rng.standard_normal((cout, cin, 3, 3)) * std)
            biases.append(np.zeros(cout))
        return cls(weights, biases)

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc.w{i}"] = w
            out[f"enc.b{i}"] = b
        return out

    def forward_vjp(self, image: np.ndarray):
        """Feature map for a 2-D image plus a pullback to parameter gradients."""
        x = np.asarray(image, dtype=np.float64)[None]
        pullbacks = []
        for k, (w, b, s) in enumerate(zip(self.weights, self.biases, self.strides)):
            x, pb = conv2d_vjp(x, w, b, s, need_input_grad=k > 0)
            active = None
            if RELU[k]:
                active = x > 0.0
                x = np.where(active, x, 0.0)
            pullbacks.append((pb, active))

        def pullback(grad: np.ndarray) -> dict[str, np.ndarray]:
            grads = {}
            g = grad
            for k in reversed(range(len(pullbacks))):
                pb, active = pullbacks[k]
                if active is not None:
                    g = np.where(active, g, 0.0)
                g, d_w, d_b = pb(g)
                grads[f"enc.w{k}"] = d_w
                grads[f"enc.b{k}"] = d_b
            return grads

        return x, pullback

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.forward_vjp(image)[0]
