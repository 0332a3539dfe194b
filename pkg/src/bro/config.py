"""Training configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .hica import NORM_PLACEMENTS, ConfigurationError

ABLATION_FLAGS = ("no_feac", "no_hica", "no_ad", "no_b_delta", "no_adv_loss")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    beta: float = 1.0
    group_size: int = 8
    feature_dim: int = 32
    kappa: float = 20.0
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    episodes_per_epoch: int = 200
    seed: int = 0
    no_feac: bool = False
    no_hica: bool = False
    no_ad: bool = False
    no_b_delta: bool = False
    no_adv_loss: bool = False
    norm_placement: str = "inside"
    # Frobenius norm of the initial offset, spread evenly over the diagonal
    b_delta_init: float = 0.0
    cell: int = 4
    reduction: str = "max"
    source: str = "supervised_phantom"
    image_size: int = 64
    test_episodes: int = 100
    test_seed: int = 1_000_003
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "float" and not (isinstance(v, (int, float)) and v == v and abs(v) != float("inf")):
                raise ConfigurationError(f"{f.name} must be a finite number, got {v!r}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be nonnegative, got {self.lr}")
        if self.group_size < 1 or self.feature_dim % self.group_size:
            raise ConfigurationError(
                f"group_size N={self.group_size} does not divide feature_dim D={self.feature_dim}"
            )
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigurationError(f"norm_placement must be one of {NORM_PLACEMENTS}")
        if self.reduction not in ("max", "softmax"):
            raise ConfigurationError("reduction must be 'max' or 'softmax'")
        if self.source not in ("supervised_phantom", "ssl_superpixel"):
            raise ConfigurationError(f"unknown source {self.source!r}")
        if self.image_size < 32 or self.image_size % 4:
            raise ConfigurationError("image_size must be a multiple of 4 and at least 32")
        for name in ("epochs", "episodes_per_epoch", "cell", "test_episodes", "threads"):
            if getattr(self, name) < (0 if name in ("epochs", "episodes_per_epoch") else 1):
                raise ConfigurationError(f"{name} out of range: {getattr(self, name)}")

    # derived switches -------------------------------------------------------
    @property
    def uses_offset(self) -> bool:
        return not (self.no_hica or self.no_ad or self.no_b_delta)

    @property
    def effective_beta(self) -> float:
        if self.no_hica or self.no_ad or self.no_adv_loss:
            return 0.0
        return self.beta

    @property
    def n_groups(self) -> int:
        return self.feature_dim // self.group_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, kind: str, raw: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"invalid value for {name}: {raw!r}") from None


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values: dict[str, object] = {}
    raw_items: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        raw_items.append((key, raw))
    raw_items.extend((overrides or {}).items())
    for key, raw in raw_items:
        if key not in kinds:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    return TrainConfig(**values)


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), overrides)
