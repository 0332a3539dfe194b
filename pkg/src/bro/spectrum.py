"""Frequency-spectrum entropy of greyscale images and group comparison.

Each image's 2-D DFT magnitude is normalised into a distribution whose
Shannon entropy summarises how spread its frequency content is; a normal
density is then fitted to the entropies of a group of images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .episodes import PhantomSpec, derive_seed, phantom_generate
from .fft import fft2
from .tensor_core import DegenerateInputError


class DegenerateFitError(ValueError):
    pass


def magnitude_spectrum(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise ValueError(f"need an H x W image with H, W >= 2, got {image.shape}")
    return np.abs(fft2(image))


def spectral_entropy(
    spectrum: np.ndarray,
    base: str = "e",
    include_dc: bool = True,
    power: bool = False,
) -> float:
    """Shannon entropy of the spectrum normalised to sum to one.

    ``power`` squares the magnitudes first; ``include_dc=False`` drops bin
    (0, 0); ``base`` is ``"e"`` (nats) or ``"2"`` (bits).
    """
    s = np.array(spectrum, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("spectrum must be nonnegative")
    if power:
        s = s * s
    if not include_dc:
        s.flat[0] = 0.0
    total = s.sum()
    if total <= 0.0:
        raise DegenerateInputError("spectrum is identically zero")
    p = s[s > 0] / total
    h = float(-np.sum(p * np.log(p)))
    if base == "e":
        return h
    if base == "2":
        return h / math.log(2.0)
    raise ValueError(f"unknown log base {base!r}")


def fit_normal(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DegenerateFitError(f"need at least 2 values to fit, got {v.size}")
    std = float(np.std(v, ddof=1))
    if std == 0.0:
        raise DegenerateFitError("values have zero variance")
    return float(np.mean(v)), std


def normal_pdf(x, mean: float, std: float) -> np.ndarray:
    z = (np.asarray(x, dtype=np.float64) - mean) / std
    return np.exp(-0.5 * z * z) / (std * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class SpectrumReport:
    per_image_entropy: tuple[float, ...]
    fitted_mean: float
    fitted_std: float
    group_label: str = ""

    def pdf_curve(self, n: int = 200, width: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
        xs = np.linspace(self.fitted_mean - width * self.fitted_std, self.fitted_mean + width * self.fitted_std, n)
        return xs, normal_pdf(xs, self.fitted_mean, self.fitted_std)


class GroupComparison(NamedTuple):
    a: SpectrumReport
    b: SpectrumReport
    order: str  # "A", "B" or "equal"


def report_for(images: Sequence[np.ndarray], label: str = "", **entropy_opts) -> SpectrumReport:
    ents = tuple(spectral_entropy(magnitude_spectrum(im), **entropy_opts) for im in images)
    mean, std = fit_normal(ents)
    return SpectrumReport(ents, mean, std, label)


def ordering(a: SpectrumReport, b: SpectrumReport, tol: float = 1e-12) -> str:
    if abs(a.fitted_mean - b.fitted_mean) <= tol:
        return "equal"
    return "A" if a.fitted_mean > b.fitted_mean else "B"


def compare_groups(group_a, group_b, **entropy_opts) -> GroupComparison:
    if len(group_a) < 2 or len(group_b) < 2:
        raise DegenerateFitError("each group needs at least 2 images")
    ra = report_for(group_a, "A", **entropy_opts)
    rb = report_for(group_b, "B", **entropy_opts)
    return GroupComparison(ra, rb, ordering(ra, rb))


# ----------------------------------------------------------- synthetic corpora

def broadband_image(seed: int, size: int = 64) -> np.ndarray:
    """White noise overlaid with random hard-edged rectangles."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, (size, size)) * 0.5
    for _ in range(int(rng.integers(4, 10))):
        y0, x0 = rng.integers(0, size - 4, size=2)
        hh, ww = rng.integers(3, size // 2, size=2)
        img[y0:y0 + hh, x0:x0 + ww] += rng.uniform(-0.4, 0.4)
    return np.clip(img, 0.0, 1.0)


def lowpass_image(seed: int, size: int = 64) -> np.ndarray:
    """A smoothed organ phantom, standing in for a medical slice."""
    ph = phantom_generate(seed, PhantomSpec(noise=0.0), size, size)
    return ndimage.gaussian_filter(ph.image, 1.0)


def demo_corpora(n: int = 50, size: int = 64, seed: int = 0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    broad = [broadband_image(derive_seed(seed, 0, i), size) for i in range(n)]
    low = [lowpass_image(derive_seed(seed, 1, i), size) for i in range(n)]
    return broad, low
