import numpy as np
import pytest

from bro.cli import ablation_configs, main
from bro.config import TrainConfig
from bro.episodes import write_pgm
from bro.trainer import Checkpoint

SMALL = "image_size = 32\nfeature_dim = 8\ngroup_size = 4\ncell = 2\nepochs = 1\nepisodes_per_epoch = 2\ntest_episodes = 3\n"


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def test_missing_config_is_usage_error(tmp_path):
    assert main(["train", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_key_names_it(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpah = 0.3\n")
    assert main(["train", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "alpah" in capsys.readouterr().err


def test_train_writes_manifest_log_and_checkpoint(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", str(config), "--out", str(out)]) == 0
    manifest = (out / "manifest.txt").read_text()
    assert "command train" in manifest and "seed 0" in manifest
    assert (out / "train.log").read_text().startswith("epoch 0 seg ")
    ckpt = Checkpoint.load(out / "model.ckpt")
    assert ckpt.config.feature_dim == 8


def test_same_seed_same_checkpoint_and_env_override(tmp_path, config, monkeypatch):
    main(["train", str(config), "--out", str(tmp_path / "a")])
    main(["train", str(config), "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "model.ckpt").read_bytes()
    assert a == (tmp_path / "b" / "model.ckpt").read_bytes()
    monkeypatch.setenv("BRO_SEED", "5")
    main(["train", str(config), "--out", str(tmp_path / "c")])
    assert "seed 5" in (tmp_path / "c" / "manifest.txt").read_text()
    assert (tmp_path / "c" / "model.ckpt").read_bytes() != a


def test_eval_on_manifest(tmp_path, config, capsys):
    main(["train", str(config), "--out", str(tmp_path / "t")])
    main(["episodes", "--count", "2", "--size", "32", "--out", str(tmp_path / "eps")])
    capsys.readouterr()
    rc = main(["eval", str(tmp_path / "t" / "model.ckpt"), str(tmp_path / "eps" / "episodes.txt"),
               "--out", str(tmp_path / "e")])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines] == ["dice", "dice", "mean"]
    vals = [float(l.split()[2]) for l in lines[:2]]
    assert float(lines[2].split()[1]) == pytest.approx(np.mean(vals))


def test_eval_mean_of_perfect_and_empty(tmp_path, config, capsys, monkeypatch):
    import bro.trainer as tr
    from bro.prototypes import PredictionMap

    main(["train", str(config), "--out", str(tmp_path / "t")])
    d = tmp_path / "eps"
    d.mkdir()
    write_pgm(d / "img.pgm", np.full((32, 32), 0.5))
    write_pgm(d / "sm.pgm", np.eye(32, dtype=bool))
    write_pgm(d / "empty.pgm", np.zeros((32, 32), dtype=bool))
    write_pgm(d / "full.pgm", np.ones((32, 32), dtype=bool))
    (d / "m.txt").write_text(
        "episode e1 class 1 support img.pgm sm.pgm query img.pgm full.pgm\n"
        "episode e2 class 1 support img.pgm sm.pgm query img.pgm empty.pgm\n"
    )
    # every query pixel predicted foreground: Dice 100 on the full truth, 0 on the empty one
    monkeypatch.setattr(tr, "predict_query", lambda m, ep, c: PredictionMap(np.ones((8, 8)), np.zeros((8, 8))))
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "t" / "model.ckpt"), str(d / "m.txt"), "--out", str(tmp_path / "e")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == ["dice e1 100.0", "dice e2 0.0", "mean 50.0"]


def test_eval_errors(tmp_path, config):
    main(["train", str(config), "--out", str(tmp_path / "t")])
    ckpt = str(tmp_path / "t" / "model.ckpt")
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["eval", ckpt, str(empty), "--out", str(tmp_path / "e")]) == 2
    other = tmp_path / "other.cfg"
    other.write_text("feature_dim = 16\ngroup_size = 8\n")
    assert main(["eval", ckpt, "--config", str(other), "--out", str(tmp_path / "e")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"GARBAGE\n" + (tmp_path / "t" / "model.ckpt").read_bytes())
    assert main(["eval", str(bad), "--out", str(tmp_path / "e")]) == 2


def test_ablation_rows_disable_one_mechanism_each():
    rows = ablation_configs(TrainConfig(seed=4))
    assert [name for name, _ in rows] == ["full", "no_feac", "no_hica", "no_ad", "no_b_delta", "no_adv_loss"]
    assert len({cfg.seed for _, cfg in rows}) == 1
    by = dict(rows)
    assert by["full"].uses_offset and by["full"].effective_beta == 1.0
    assert not by["no_b_delta"].uses_offset and by["no_b_delta"].effective_beta == 1.0
    assert by["no_adv_loss"].uses_offset and by["no_adv_loss"].effective_beta == 0.0
    assert not by["no_ad"].uses_offset and by["no_ad"].effective_beta == 0.0


def test_ablate_emits_six_rows(tmp_path, config):
    out = tmp_path / "abl"
    assert main(["ablate", str(config), "--out", str(out)]) == 0
    rows = (out / "ablation.txt").read_text().strip().splitlines()
    assert len(rows) == 6
    assert {r.split()[2] for r in rows} == {"0"}


def _images(d, n, seed):
    d.mkdir()
    rng = np.random.default_rng(seed)
    for i in range(n):
        write_pgm(d / f"{i}.pgm", rng.random((16, 16)))
    return d


def test_spectrum_dirs(tmp_path, capsys):
    a = _images(tmp_path / "a", 3, 0)
    assert main(["spectrum", str(a), str(a), "--out", str(tmp_path / "o"), "--pdf"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("order equal")
    assert out.count("image ") == 6
    assert (tmp_path / "o" / "pdf_A.txt").exists()


def test_spectrum_demo_direction(tmp_path, capsys):
    assert main(["spectrum", "--demo", "--n", "10", "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.strip().endswith("order A higher")


def test_spectrum_errors(tmp_path, capsys):
    one = _images(tmp_path / "one", 1, 0)
    two = _images(tmp_path / "two", 2, 1)
    assert main(["spectrum", str(one), str(two), "--out", str(tmp_path / "o")]) == 2
    (two / "broken.pgm").write_bytes(b"P5\n16 16\n255\nxx")
    assert main(["spectrum", str(two), str(two), "--out", str(tmp_path / "o")]) == 1
    assert "broken.pgm" in capsys.readouterr().err


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == 2
