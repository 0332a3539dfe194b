"""End-to-end episode forward/backward, SGD training and Dice evaluation.

Pipeline per episode: encoder -> calibration of the support map -> channel
attention producing the background-fused map -> prototypes (foreground
from the calibrated map, background from the fused map) -> cosine scores on
the query. The alignment branch repeats the same with support and query
swapped, using the thresholded query prediction as the query mask.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import TrainConfig, parse_config
from .encoder import Encoder
from .episodes import Episode, EpisodeConfig, downsample_mask, episode_stream
from .feac import calibrate_vjp
from .hica import MeanOffset, adversarial_loss, adversarial_loss_grad, hica_vjp
from .losses import LossBreakdown, dice, reg_loss, reg_loss_grad, seg_loss, seg_loss_grad, total_loss
from .prototypes import (
    PredictionMap,
    cosine_map_vjp,
    grid_local_prototypes,
    masked_avg_pool,
    masked_avg_pool_vjp,
    predict_vjp,
)
from .tensor_core import read_tensor, write_tensor

log = logging.getLogger(__name__)

STRIDE = 4
TRAIN_STREAM = 0
TEST_STREAM = 1
CHECKPOINT_MAGIC = "BROCKPT 1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    encoder: Encoder
    b_delta: np.ndarray

    @classmethod
    def init(cls, cfg: TrainConfig) -> "Model":
        enc = Encoder.init(cfg.feature_dim, seed=cfg.seed)
        m = cfg.n_groups
        b_delta = np.eye(m) * (cfg.b_delta_init / np.sqrt(m))
        return cls(enc, b_delta)

    def parameters(self) -> dict[str, np.ndarray]:
        params = self.encoder.parameters()
        params["b_delta"] = self.b_delta
        return params

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i in range(len(self.encoder.weights)):
            self.encoder.weights[i] = params[f"enc.w{i}"]
            self.encoder.biases[i] = params[f"enc.b{i}"]
        self.b_delta = params["b_delta"]

    def copy(self) -> "Model":
        return Model(
            Encoder([w.copy() for w in self.encoder.weights], [b.copy() for b in self.encoder.biases]),
            self.b_delta.copy(),
        )


@dataclass
class EpisodeResult:
    query_pred: PredictionMap
    support_pred: PredictionMap
    losses: LossBreakdown
    grads: dict[str, np.ndarray] | None = None
    b_f: np.ndarray | None = None


def _branch(f_sup, f_qry, mask_sup, offset, cfg: TrainConfig):
    """Predict the query side from prototypes of the support side."""
    if cfg.no_feac:
        f_hat, feac_pb = f_sup, None
    else:
        cal, feac_pb = calibrate_vjp(f_sup, f_qry)
        f_hat = cal.values
    if cfg.no_hica:
        f_tilde, hica_pb, b_f = f_hat, None, None
    else:
        out, hica_pb = hica_vjp(f_hat, offset, cfg.group_size, cfg.norm_placement)
        f_tilde, b_f = out.fused, out.similarity.b_f

    fg_protos = grid_local_prototypes(f_hat, mask_sup, cfg.cell)
    bg_proto = masked_avg_pool(f_tilde, ~mask_sup, kind="background")
    fg = [cosine_map_vjp(f_qry, p.vector, cfg.kappa) for p in fg_protos]
    bg_map, bg_pb = cosine_map_vjp(f_qry, bg_proto.vector, cfg.kappa)
    pred, pred_pb = predict_vjp([m for m, _ in fg], bg_map, cfg.reduction)

    def pullback(d_prob_fg, d_bf=None):
        d_fg_maps, d_bg_map = pred_pb(d_prob_fg)
        d_fq = np.zeros_like(f_qry)
        d_fhat = np.zeros_like(f_hat)
        for (_, pb), proto, d_map in zip(fg, fg_protos, d_fg_maps):
            d_f, d_p = pb(d_map)
            d_fq += d_f
            d_fhat += masked_avg_pool_vjp(f_hat.shape, proto, d_p)
        d_f, d_p = bg_pb(d_bg_map)
        d_fq += d_f
        d_ftilde = masked_avg_pool_vjp(f_tilde.shape, bg_proto, d_p)
        d_bdelta = None
        if hica_pb is None:
            d_fhat += d_ftilde
        else:
            d_fh, d_bdelta = hica_pb(d_ftilde, d_bf)
            d_fhat += d_fh
        if feac_pb is None:
            d_fs = d_fhat
        else:
            d_fs, d_fq2 = feac_pb(d_fhat)
            d_fq += d_fq2
        return d_fs, d_fq, d_bdelta

    return pred, b_f, pullback


def feature_masks(ep: Episode) -> tuple[np.ndarray, np.ndarray]:
    return downsample_mask(ep.support_mask, STRIDE), downsample_mask(ep.query_mask, STRIDE)


def _offset(model: Model, cfg: TrainConfig) -> MeanOffset | None:
    return MeanOffset(model.b_delta, cfg.alpha) if cfg.uses_offset else None


def predict_query(model: Model, ep: Episode, cfg: TrainConfig) -> PredictionMap:
    """Query prediction only, at feature resolution."""
    m_s, _ = feature_masks(ep)
    f_s = model.encoder(ep.support_image)
    f_q = model.encoder(ep.query_image)
    return _branch(f_s, f_q, m_s, _offset(model, cfg), cfg)[0]


def forward_episode(model: Model, ep: Episode, cfg: TrainConfig, with_grad: bool = False) -> EpisodeResult:
    if ep.support_image.shape[0] % STRIDE or ep.support_image.shape[1] % STRIDE:
        raise ValueError(f"image extents {ep.support_image.shape} must be divisible by {STRIDE}")
    m_s, m_q = feature_masks(ep)
    f_s, enc_pb_s = model.encoder.forward_vjp(ep.support_image)
    f_q, enc_pb_q = model.encoder.forward_vjp(ep.query_image)
    offset = _offset(model, cfg)

    pred_q, b_f, pb_main = _branch(f_s, f_q, m_s, offset, cfg)
    # prototypes for the reverse direction come from the (detached) query prediction
    q_guess = pred_q.prob_fg > 0.5
    if not q_guess.any() or q_guess.all():
        q_guess = m_q
    pred_s, _, pb_rev = _branch(f_q, f_s, q_guess, offset, cfg)

    seg = seg_loss(pred_q, m_q)
    reg = reg_loss(pred_s, m_s)
    adv = adversarial_loss(b_f) if b_f is not None else 0.0
    beta = cfg.effective_beta
    losses = total_loss(seg, reg, adv, beta)
    result = EpisodeResult(pred_q, pred_s, losses, b_f=b_f)
    if not with_grad:
        return result

    d_bf = beta * adversarial_loss_grad(b_f) if (b_f is not None and beta != 0.0) else None
    d_fs, d_fq, d_bd1 = pb_main(seg_loss_grad(pred_q, m_q), d_bf)
    d_fq2, d_fs2, d_bd2 = pb_rev(reg_loss_grad(pred_s, m_s))
    grads = enc_pb_s(d_fs + d_fs2)
    for k, v in enc_pb_q(d_fq + d_fq2).items():
        grads[k] = grads[k] + v
    d_bdelta = np.zeros_like(model.b_delta)
    for d in (d_bd1, d_bd2):
        if d is not None:
            d_bdelta += d
    grads["b_delta"] = d_bdelta
    result.grads = grads
    return result


# ----------------------------------------------------------------- training

def episode_config(cfg: TrainConfig) -> EpisodeConfig:
    return EpisodeConfig(source=cfg.source, size=cfg.image_size, stride=STRIDE)


def train_episodes(cfg: TrainConfig) -> Iterable[tuple[int, Episode]]:
    ecfg = episode_config(cfg)
    n = cfg.epochs * cfg.episodes_per_epoch
    return enumerate(episode_stream(ecfg, cfg.seed, n, stream=TRAIN_STREAM))


def heldout_episodes(cfg: TrainConfig, count: int | None = None, source: str = "supervised_phantom") -> list[Episode]:
    ecfg = EpisodeConfig(source=source, size=cfg.image_size, stride=STRIDE)
    return list(episode_stream(ecfg, cfg.test_seed, count or cfg.test_episodes, stream=TEST_STREAM))


def train(
    cfg: TrainConfig,
    episodes: Iterable[Episode] | None = None,
    log_fn: Callable[[str], None] | None = None,
    model: Model | None = None,
) -> "Checkpoint":
    """SGD with momentum over encoder weights and the similarity offset."""
    model = model.copy() if model is not None else Model.init(cfg)
    params = model.parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    stream = iter(episodes) if episodes is not None else (ep for _, ep in train_episodes(cfg))
    history = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        count = 0
        for i in range(cfg.episodes_per_epoch):
            try:
                ep = next(stream)
            except StopIteration:
                break
            res = forward_episode(model, ep, cfg, with_grad=True)
            lb = res.losses
            if not np.isfinite(lb.total) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} episode {i} (seed {ep.seed}): "
                    f"seg={lb.seg} reg={lb.reg} adv={lb.adv} total={lb.total}"
                )
            for k, g in res.grads.items():
                velocity[k] = cfg.momentum * velocity[k] + g
                params[k] = params[k] - cfg.lr * velocity[k]
            model.set_parameters(params)
            sums += (lb.seg, lb.reg, lb.adv, lb.total)
            count += 1
        if count == 0:
            break
        seg, reg, adv, tot = sums / count
        line = f"epoch {epoch} seg {seg:.6f} reg {reg:.6f} adv {adv:.6f} total {tot:.6f}"
        history.append(line)
        log.info(line)
        if log_fn is not None:
            log_fn(line)
    return Checkpoint(model, cfg, history)


# --------------------------------------------------------------- evaluation

def binarize_upsample(pred: PredictionMap, shape: tuple[int, int]) -> np.ndarray:
    small = pred.prob_fg > 0.5
    big = np.repeat(np.repeat(small, STRIDE, axis=0), STRIDE, axis=1)
    return big[: shape[0], : shape[1]]


def evaluate(ckpt: "Checkpoint", episodes: Sequence[Episode]) -> tuple[float, list[float]]:
    scores = []
    for ep in episodes:
        pred = predict_query(ckpt.model, ep, ckpt.config)
        scores.append(dice(binarize_upsample(pred, ep.query_mask.shape), ep.query_mask))
    if not scores:
        raise ValueError("no episodes to evaluate")
    return float(np.mean(scores)), scores


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    history: list[str]

    def to_bytes(self) -> bytes:
        params = self.model.parameters()
        head = [CHECKPOINT_MAGIC]
        head += [f"config {line}" for line in self.config.to_text().splitlines()]
        head += [f"tensor {name} {' '.join(map(str, t.shape))}" for name, t in params.items()]
        head.append("end")
        buf = io.BytesIO()
        buf.write(("\n".join(head) + "\n").encode("ascii"))
        for t in params.values():
            write_tensor(buf, t)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        fh = io.BytesIO(data)
        first = fh.readline().decode("ascii", "replace").rstrip("\n")
        if first != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {first[:16]!r}")
        cfg_lines, names = [], []
        while True:
            line = fh.readline()
            if not line:
                raise CheckpointError("checkpoint header not terminated")
            text = line.decode("ascii").rstrip("\n")
            if text == "end":
                break
            kind, _, rest = text.partition(" ")
            if kind == "config":
                cfg_lines.append(rest)
            elif kind == "tensor":
                names.append(rest.split()[0])
            else:
                raise CheckpointError(f"unexpected header line {text!r}")
        cfg = parse_config("\n".join(cfg_lines))
        try:
            params = {name: read_tensor(fh) for name in names}
        except ValueError as exc:
            raise CheckpointError(str(exc)) from None
        model = Model.init(cfg)
        expected = model.parameters()
        if set(params) != set(expected):
            raise CheckpointError("checkpoint tensors do not match the model layout")
        for k, v in params.items():
            if v.shape != expected[k].shape:
                raise CheckpointError(f"tensor {k} has shape {v.shape}, expected {expected[k].shape}")
        model.set_parameters(params)
        return cls(model, cfg, [])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
