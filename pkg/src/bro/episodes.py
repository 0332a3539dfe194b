"""Synthetic organ phantoms, SLIC superpixels, support/query augmentation and
1-way 1-shot episode sampling.

Everything is driven by explicit integer seeds so an episode stream can be
regenerated bit-for-bit.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

SOURCES = ("supervised_phantom", "ssl_superpixel")


class PhantomError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (order-sensitive)."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


# --------------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class OrganClass:
    class_id: int
    intensity: tuple[float, float]
    # semi-axis range as a fraction of min(H, W)
    radius: tuple[float, float]
    texture_amp: float = 0.0
    texture_period: float = 6.0


DEFAULT_CLASSES = (
    OrganClass(1, (0.60, 0.72), (0.14, 0.22), texture_amp=0.02, texture_period=10.0),
    OrganClass(2, (0.72, 0.85), (0.09, 0.14), texture_amp=0.08, texture_period=3.0),
    OrganClass(3, (0.42, 0.55), (0.11, 0.17), texture_amp=0.06, texture_period=5.0),
    OrganClass(4, (0.25, 0.38), (0.09, 0.13), texture_amp=0.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    classes: tuple[OrganClass, ...] = DEFAULT_CLASSES
    n_organs: int = 2
    background: tuple[float, float] = (0.25, 0.75)
    # std (pixels, at 64 px) of the filter shaping the background field
    smoothness: float = 5.0
    noise: float = 0.02
    max_tries: int = 200

    def __post_init__(self):
        lo, hi = self.background
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"invalid background range {self.background}")
        if not 1 <= self.n_organs <= len(self.classes):
            raise ValueError(f"n_organs={self.n_organs} needs 1..{len(self.classes)} classes")
        for c in self.classes:
            if not 0.0 <= c.intensity[0] <= c.intensity[1] <= 1.0:
                raise ValueError(f"invalid intensity range for class {c.class_id}")
            if not 0.0 < c.radius[0] <= c.radius[1] < 0.5:
                raise ValueError(f"invalid radius range for class {c.class_id}")


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    organ_masks: tuple[np.ndarray, ...]
    class_ids: tuple[int, ...]
    seed: int

    def mask_for(self, class_id: int) -> np.ndarray:
        return self.organ_masks[self.class_ids.index(class_id)]


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)


def _ellipse(h, w, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def phantom_generate(
    seed: int,
    spec: PhantomSpec = PhantomSpec(),
    h: int = 64,
    w: int = 64,
    classes: Sequence[int] | None = None,
) -> Phantom:
    """Low-contrast abdominal-style phantom with ``spec.n_organs`` disjoint organs.

    ``classes`` restricts which organ classes may be drawn.
    """
    if h < 32 or w < 32:
        raise ValueError("phantom extents must be at least 32")
    pool = [c for c in spec.classes if classes is None or c.class_id in classes]
    if len(pool) < spec.n_organs:
        raise PhantomError(f"only {len(pool)} classes available for {spec.n_organs} organs")
    rng = np.random.default_rng(seed)
    scale = min(h, w)
    lo, hi = spec.background
    image = lo + (hi - lo) * _smooth_field(rng, h, w, spec.smoothness * scale / 64.0)

    picks = rng.choice(len(pool), size=spec.n_organs, replace=False)
    occupied = np.zeros((h, w), dtype=bool)
    masks, ids = [], []
    for pi in picks:
        organ = pool[int(pi)]
        for _ in range(spec.max_tries):
            ry = rng.uniform(*organ.radius) * scale
            rx = rng.uniform(*organ.radius) * scale
            theta = rng.uniform(0.0, math.pi)
            r = max(rx, ry)
            cy = rng.uniform(r + 1, h - r - 1)
            cx = rng.uniform(r + 1, w - r - 1)
            mask = _ellipse(h, w, cy, cx, ry, rx, theta)
            if mask.sum() >= 0.01 * h * w and not (ndimage.binary_dilation(mask) & occupied).any():
                break
        else:
            raise PhantomError(f"could not place organ class {organ.class_id} (seed {seed})")
        occupied |= mask
        base = rng.uniform(*organ.intensity)
        values = np.full((h, w), base)
        if organ.texture_amp > 0.0:
            phase = rng.uniform(0.0, 2 * math.pi, size=2)
            yy, xx = np.mgrid[0:h, 0:w]
            k = 2 * math.pi / organ.texture_period
            values += organ.texture_amp * np.sin(k * xx + phase[0]) * np.sin(k * yy + phase[1])
        image = np.where(mask, values, image)
        masks.append(mask)
        ids.append(organ.class_id)

    image = image + spec.noise * rng.standard_normal((h, w))
    image = np.clip(image, 0.0, 1.0)
    return Phantom(image, tuple(masks), tuple(ids), seed)


# ------------------------------------------------------------------ superpixels

def superpixels(
    image: np.ndarray,
    k: int,
    compactness: float = 10.0,
    iterations: int = 10,
) -> np.ndarray:
    """SLIC-style superpixels; returns consecutive integer labels starting at 0.

    Pixels are clustered in (x/S, y/S, compactness * intensity) space from a
    regular grid of seeds with spacing S, each centre only claiming pixels
    within 2S x 2S. Disconnected fragments are then merged into a neighbour
    and the label count is capped at 2k.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if k == 1:
        return np.zeros((h, w), dtype=np.int64)
    step = math.sqrt(h * w / k)
    ny = max(1, round(h / step))
    nx = max(1, round(w / step))
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * h / ny, (np.arange(nx) + 0.5) * w / nx, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    yy, xx = np.mgrid[0:h, 0:w]
    py, px, pi = yy.ravel().astype(float), xx.ravel().astype(float), image.ravel()
    ci = pi[np.clip(cy.astype(int), 0, h - 1) * w + np.clip(cx.astype(int), 0, w - 1)]

    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(iterations):
        dy = (py[:, None] - cy[None]) / step
        dx = (px[:, None] - cx[None]) / step
        di = compactness * (pi[:, None] - ci[None])
        dist = dy**2 + dx**2 + di**2
        windowed = np.where((np.abs(dy) > 1.0) | (np.abs(dx) > 1.0), np.inf, dist)
        orphan = ~np.isfinite(windowed).any(axis=1)
        windowed[orphan] = dist[orphan]
        labels = np.argmin(windowed, axis=1)
        counts = np.bincount(labels, minlength=cy.size)
        live = counts > 0
        cy[live] = np.bincount(labels, py, cy.size)[live] / counts[live]
        cx[live] = np.bincount(labels, px, cx.size)[live] / counts[live]
        ci[live] = np.bincount(labels, pi, cx.size)[live] / counts[live]

    return _enforce_connectivity(labels.reshape(h, w), max_labels=2 * k, min_size=max(1, int(step * step / 4)))


def _merge_into_neighbour(labels: np.ndarray, region: np.ndarray) -> bool:
    ring = ndimage.binary_dilation(region) & ~region
    if not ring.any():
        return False
    vals, counts = np.unique(labels[ring], return_counts=True)
    labels[region] = vals[np.argmax(counts)]
    return True


def _enforce_connectivity(labels: np.ndarray, max_labels: int, min_size: int) -> np.ndarray:
    labels = labels.copy()
    # split every label into connected components, fresh ids for all
    out = np.full(labels.shape, -1, dtype=np.int64)
    next_id = 0
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        for c in range(1, n + 1):
            out[comp == c] = next_id
            next_id += 1
    labels = out
    # absorb small fragments, then cap the count, smallest first
    while True:
        ids, sizes = np.unique(labels, return_counts=True)
        if ids.size <= 1:
            break
        order = np.argsort(sizes, kind="stable")
        smallest = ids[order[0]]
        if sizes[order[0]] >= min_size and ids.size <= max_labels:
            break
        if not _merge_into_neighbour(labels, labels == smallest):
            break
    _, consecutive = np.unique(labels, return_inverse=True)
    return consecutive.reshape(labels.shape).astype(np.int64)


# ------------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # (dy, dx) as a fraction of the extent
    scale: float = 1.0
    gamma: float = 1.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            angle_deg=rng.uniform(-15.0, 15.0),
            shift=(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
            scale=rng.uniform(0.9, 1.1),
            gamma=math.exp(rng.uniform(math.log(0.8), math.log(1.25))),
        )


def apply_augmentation(image: np.ndarray, mask: np.ndarray, params: AugmentParams):
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    t = math.radians(params.angle_deg)
    # output -> input map: rotate by -t and shrink by 1/scale about the centre
    rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]) / params.scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([params.shift[0] * h, params.shift[1] * w])
    offset = centre - rot @ (centre + shift)
    warped = ndimage.affine_transform(image, rot, offset=offset, order=1, mode="nearest")
    warped_mask = ndimage.affine_transform(
        np.asarray(mask, dtype=np.float64), rot, offset=offset, order=0, mode="constant", cval=0.0
    )
    warped = np.clip(warped, 0.0, 1.0) ** params.gamma
    return warped, warped_mask > 0.5


def augment_pair(image: np.ndarray, mask: np.ndarray, seed: int):
    """Random small affine warp plus gamma jitter, shared by image and mask."""
    params = AugmentParams.sample(np.random.default_rng(seed))
    return apply_augmentation(image, mask, params)


# ---------------------------------------------------------------------- episodes

@dataclass(frozen=True)
class Episode:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    seed: int = 0

    @property
    def support(self):
        return self.support_image, self.support_mask

    @property
    def query(self):
        return self.query_image, self.query_mask


@dataclass(frozen=True)
class EpisodeConfig:
    source: str = "supervised_phantom"
    size: int = 64
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    classes: tuple[int, ...] | None = None
    n_superpixels: int = 24
    # masks must keep both classes after nearest downsampling by this stride
    stride: int = 4
    max_tries: int = 50


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour downsampling, sampling each block at its centre."""
    mask = np.asarray(mask).astype(bool)
    if stride == 1:
        return mask
    off = stride // 2
    return mask[off::stride, off::stride][: mask.shape[0] // stride, : mask.shape[1] // stride]


def _usable(mask: np.ndarray, stride: int) -> bool:
    small = downsample_mask(mask, stride)
    return bool(mask.any() and small.any() and not small.all())


def sample_episode(source: str, seed: int, cfg: EpisodeConfig | None = None) -> Episode:
    cfg = cfg or EpisodeConfig(source=source)
    if source not in SOURCES:
        raise ValueError(f"unknown episode source {source!r}")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_tries):
        if source == "supervised_phantom":
            a = phantom_generate(int(rng.integers(2**63)), cfg.phantom, cfg.size, cfg.size, cfg.classes)
            b = phantom_generate(int(rng.integers(2**63)), cfg.phantom, cfg.size, cfg.size, cfg.classes)
            common = sorted(set(a.class_ids) & set(b.class_ids))
            if not common:
                continue
            c = int(common[int(rng.integers(len(common)))])
            sm, qm = a.mask_for(c), b.mask_for(c)
            if _usable(sm, cfg.stride) and _usable(qm, cfg.stride):
                return Episode(a.image, sm, b.image, qm, c, seed)
        else:
            ph = phantom_generate(int(rng.integers(2**63)), cfg.phantom, cfg.size, cfg.size, cfg.classes)
            labels = superpixels(ph.image, cfg.n_superpixels)
            frac = np.bincount(labels.ravel()) / labels.size
            candidates = np.flatnonzero((frac >= 0.01) & (frac <= 0.30))
            if candidates.size == 0:
                continue
            pseudo = labels == int(candidates[int(rng.integers(candidates.size))])
            q_img, q_mask = augment_pair(ph.image, pseudo, int(rng.integers(2**63)))
            if _usable(pseudo, cfg.stride) and _usable(q_mask, cfg.stride):
                return Episode(ph.image, pseudo, q_img, q_mask, 0, seed)
    raise SamplingError(f"no usable {source} episode after {cfg.max_tries} tries (seed {seed})")


def episode_stream(cfg: EpisodeConfig, seed: int, count: int, stream: int = 0) -> Iterator[Episode]:
    for i in range(count):
        yield sample_episode(cfg.source, derive_seed(seed, stream, i), cfg)


# ------------------------------------------------------------------------ files

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; float input is taken to lie in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 (or ASCII P2) greymap as raw integer values."""
    return _parse_pgm(path)[0]


def _parse_pgm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = data[pos + 1:]
        n = w * h * np.dtype(dtype).itemsize
        if len(raw) < n:
            raise ValueError(f"{path}: truncated PGM data")
        return np.frombuffer(raw[:n], dtype=dtype).reshape(h, w).astype(np.int64), maxval
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
        if vals.size < w * h:
            raise ValueError(f"{path}: truncated PGM data")
        return vals[: w * h].reshape(h, w), maxval
    raise ValueError(f"{path}: not a PGM file (magic {magic!r})")


def read_image(path) -> np.ndarray:
    """Greyscale image in [0, 1] from a PGM file or a .brot tensor."""
    path = Path(path)
    if path.suffix == ".brot":
        from .tensor_core import load_tensor

        arr = load_tensor(path)
        if arr.ndim != 2:
            raise ValueError(f"{path}: expected a 2-D tensor, got shape {arr.shape}")
        return arr
    raw, maxval = _parse_pgm(path)
    return raw.astype(np.float64) / max(maxval, 1)


@dataclass(frozen=True)
class ManifestEntry:
    episode_id: str
    class_id: int
    support_image: str
    support_mask: str
    query_image: str
    query_mask: str


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(
                f"episode {e.episode_id} class {e.class_id} "
                f"support {e.support_image} {e.support_mask} query {e.query_image} {e.query_mask}\n"
            )


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 10 or parts[0] != "episode" or parts[2] != "class" or parts[4] != "support" or parts[7] != "query":
                raise ValueError(f"{path}:{lineno}: malformed manifest line")
            entries.append(ManifestEntry(parts[1], int(parts[3]), parts[5], parts[6], parts[8], parts[9]))
    return entries


def load_manifest_episodes(path) -> list[tuple[str, Episode]]:
    base = Path(path).parent
    out = []
    for e in read_manifest(path):
        def load(p):
            return read_image(p if os.path.isabs(p) else base / p)
        ep = Episode(
            load(e.support_image),
            load(e.support_mask) > 0.5,
            load(e.query_image),
            load(e.query_mask) > 0.5,
            e.class_id,
        )
        out.append((e.episode_id, ep))
    return out


def dump_episodes(out_dir, episodes: Sequence[Episode], manifest_name: str = "episodes.txt") -> Path:
    """Write episodes as PGM files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        eid = f"{i:04d}"
        names = [f"ep{eid}_{part}.pgm" for part in ("support", "support_mask", "query", "query_mask")]
        write_pgm(out_dir / names[0], ep.support_image)
        write_pgm(out_dir / names[1], ep.support_mask)
        write_pgm(out_dir / names[2], ep.query_image)
        write_pgm(out_dir / names[3], ep.query_mask)
        entries.append(ManifestEntry(eid, ep.class_id, *names))
    manifest = out_dir / manifest_name
    write_manifest(manifest, entries)
    return manifest
