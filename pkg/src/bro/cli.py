"""Command-line entry point: ``bro train|eval|ablate|spectrum|episodes``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``manifest.txt`` into its output directory before doing
any work.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATION_FLAGS, TrainConfig, load_config
from .episodes import EpisodeConfig, dump_episodes, episode_stream, load_manifest_episodes, read_image
from .hica import ConfigurationError
from .spectrum import DegenerateFitError, compare_groups, demo_corpora
from .trainer import Checkpoint, CheckpointError, TrainingError, evaluate, heldout_episodes, train

log = logging.getLogger("bro")

IMAGE_SUFFIXES = (".pgm", ".brot")
ABLATION_ROWS = ("full",) + ABLATION_FLAGS


class UsageError(Exception):
    """Bad invocation or input that the user must fix (exit 2)."""


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int | None
    output_dir: str
    version: str = __version__

    def write(self) -> Path:
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.txt"
        path.write_text(
            f"command {self.command}\n"
            f"config {self.config_path or '-'}\n"
            f"seed {'-' if self.seed is None else self.seed}\n"
            f"output {self.output_dir}\n"
            f"version {self.version}\n"
        )
        return path


def _seed_override() -> dict[str, str]:
    env = os.environ.get("BRO_SEED")
    if env is None:
        return {}
    try:
        int(env)
    except ValueError:
        raise UsageError(f"BRO_SEED must be an integer, got {env!r}") from None
    return {"seed": env}


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    out.update(_seed_override())
    return out


def _load(path: str, pairs: list[str] | None) -> TrainConfig:
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path, _overrides(pairs))


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = _load(args.config, args.set)
    out = Path(args.out)
    RunManifest("train", args.config, cfg.seed, str(out)).write()
    with _thread_limit(cfg.threads), open(out / "train.log", "w") as fh:
        ckpt = train(cfg, log_fn=lambda line: (fh.write(line + "\n"), fh.flush()))
    ckpt.save(out / "model.ckpt")
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    RunManifest("eval", args.config or "", None, str(out)).write()
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    if args.config:
        cfg = _load(args.config, None)
        theirs = (ckpt.config.feature_dim, ckpt.config.group_size)
        if (cfg.feature_dim, cfg.group_size) != theirs:
            raise UsageError(
                f"checkpoint has D={theirs[0]} N={theirs[1]} but config has "
                f"D={cfg.feature_dim} N={cfg.group_size}"
            )
    if args.manifest:
        if not Path(args.manifest).is_file():
            raise UsageError(f"episode manifest not found: {args.manifest}")
        pairs = load_manifest_episodes(args.manifest)
    else:
        pairs = [(f"{i:04d}", ep) for i, ep in enumerate(heldout_episodes(ckpt.config, args.count))]
    if not pairs:
        raise UsageError("no episodes")
    with _thread_limit(ckpt.config.threads):
        mean, scores = evaluate(ckpt, [ep for _, ep in pairs])
    lines = [f"dice {eid} {s!r}" for (eid, _), s in zip(pairs, scores)] + [f"mean {mean!r}"]
    (out / "eval.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def ablation_configs(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Full model plus one row per ablation flag, all sharing ``cfg.seed``."""
    base = cfg.replace(**{flag: False for flag in ABLATION_FLAGS})
    return [(name, base if name == "full" else base.replace(**{name: True})) for name in ABLATION_ROWS]


def cmd_ablate(args) -> int:
    cfg = _load(args.config, args.set)
    out = Path(args.out)
    RunManifest("ablate", args.config, cfg.seed, str(out)).write()
    test = heldout_episodes(cfg)
    rows = []
    with _thread_limit(cfg.threads):
        for name, vcfg in ablation_configs(cfg):
            ckpt = train(vcfg)
            mean, _ = evaluate(ckpt, test)
            rows.append(
                f"{name:<12} seed {vcfg.seed} offset {int(vcfg.uses_offset)} "
                f"beta_adv {vcfg.effective_beta!r} dice {mean:.4f}"
            )
            print(rows[-1], flush=True)
    (out / "ablation.txt").write_text("\n".join(rows) + "\n")
    return 0


def _images_in(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < 2:
        raise UsageError(f"{directory}: need at least 2 images, found {len(files)}")
    return files


def _read_all(paths: list[Path]) -> list[np.ndarray]:
    images = []
    for p in paths:
        try:
            images.append(read_image(p))
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"cannot read image {p}: {exc}") from None
    return images


def cmd_spectrum(args) -> int:
    out = Path(args.out)
    seed = int(_seed_override().get("seed", args.seed))
    RunManifest("spectrum", "", seed if args.demo else None, str(out)).write()
    opts = {"base": args.log_base, "include_dc": not args.no_dc, "power": args.power}
    if args.demo:
        group_a, group_b = demo_corpora(n=args.n, seed=seed)
        names_a = [f"demo:broadband/{i}" for i in range(len(group_a))]
        names_b = [f"demo:lowpass/{i}" for i in range(len(group_b))]
    else:
        if not (args.dir_a and args.dir_b):
            raise UsageError("spectrum needs two directories or --demo")
        paths_a, paths_b = _images_in(args.dir_a), _images_in(args.dir_b)
        group_a, group_b = _read_all(paths_a), _read_all(paths_b)
        names_a, names_b = [str(p) for p in paths_a], [str(p) for p in paths_b]
    try:
        cmp = compare_groups(group_a, group_b, **opts)
    except DegenerateFitError as exc:
        raise UsageError(str(exc)) from None
    lines = []
    for label, names, rep in (("A", names_a, cmp.a), ("B", names_b, cmp.b)):
        lines += [f"image {n} entropy {e!r}" for n, e in zip(names, rep.per_image_entropy)]
        lines.append(f"fit {label} mean {rep.fitted_mean!r} std {rep.fitted_std!r}")
    lines.append("order equal" if cmp.order == "equal" else f"order {cmp.order} higher")
    (out / "spectrum.txt").write_text("\n".join(lines) + "\n")
    if args.pdf:
        for label, rep in (("A", cmp.a), ("B", cmp.b)):
            xs, ys = rep.pdf_curve()
            np.savetxt(out / f"pdf_{label}.txt", np.column_stack([xs, ys]), header="entropy density")
    print("\n".join(lines))
    return 0


def cmd_episodes(args) -> int:
    out = Path(args.out)
    seed = int(_seed_override().get("seed", args.seed))
    RunManifest("episodes", "", seed, str(out)).write()
    ecfg = EpisodeConfig(source=args.source, size=args.size)
    manifest = dump_episodes(out, list(episode_stream(ecfg, seed, args.count)))
    print(f"manifest {manifest}")
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bro", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bro {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("config")
    t.add_argument("--out", default="bro_out/train")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dice of a checkpoint on an episode manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest", nargs="?", help="episode manifest; default: built-in held-out episodes")
    e.add_argument("--config", help="fail if D or N differ from this config")
    e.add_argument("--count", type=int, default=None, help="held-out episodes when no manifest is given")
    e.add_argument("--out", default="bro_out/eval")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the full model and its 5 ablations")
    a.add_argument("config")
    a.add_argument("--out", default="bro_out/ablate")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("spectrum", help="compare spectral-entropy distributions of two image sets")
    s.add_argument("dir_a", nargs="?")
    s.add_argument("dir_b", nargs="?")
    s.add_argument("--demo", action="store_true", help="use the built-in broadband and low-pass corpora")
    s.add_argument("--n", type=int, default=50, help="images per demo corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log-base", choices=("e", "2"), default="e")
    s.add_argument("--no-dc", action="store_true")
    s.add_argument("--power", action="store_true")
    s.add_argument("--pdf", action="store_true", help="also write fitted density curves")
    s.add_argument("--out", default="bro_out/spectrum")
    s.set_defaults(func=cmd_spectrum)

    d = sub.add_parser("episodes", help="dump sampled episodes as PGM files plus a manifest")
    d.add_argument("--count", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--source", choices=("supervised_phantom", "ssl_superpixel"), default="supervised_phantom")
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--out", default="bro_out/episodes")
    d.set_defaults(func=cmd_episodes)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, CheckpointError) as exc:
        print(f"bro: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError, OSError, ValueError) as exc:
        print(f"bro: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
