import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import set_dice
from bro.losses import dice, reg_loss, seg_loss, seg_loss_grad, total_loss
from bro.prototypes import PredictionMap, predict
from bro.tensor_core import DimensionError, fd_gradient, relative_error


def _pred(p_fg):
    p_fg = np.asarray(p_fg, dtype=float)
    return PredictionMap(p_fg, 1.0 - p_fg)


def test_seg_loss_examples():
    truth = np.array([[1, 0], [0, 1]], dtype=bool)
    assert seg_loss(_pred(truth.astype(float)), truth) <= 1e-10
    assert seg_loss(_pred(np.full((2, 2), 0.5)), truth) == pytest.approx(math.log(2), abs=1e-15)
    assert seg_loss(_pred([[0.9]]), np.array([[True]])) == pytest.approx(-math.log(0.9), abs=1e-15)
    assert seg_loss(_pred([[0.9]]), np.array([[True]])) == pytest.approx(0.10536, abs=1e-5)


def test_seg_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        seg_loss(_pred(np.full((2, 2), 0.5)), np.zeros((3, 2)))


def test_reg_loss_is_role_swapped_seg_loss():
    rng = np.random.default_rng(0)
    pred = _pred(rng.uniform(0.01, 0.99, (4, 4)))
    mask = rng.random((4, 4)) > 0.5
    assert reg_loss(pred, mask) == seg_loss(pred, mask)
    assert reg_loss(_pred(np.full((3, 3), 0.5)), np.zeros((3, 3))) == pytest.approx(math.log(2), abs=1e-15)


def test_reg_loss_background_only_support():
    p = np.array([[0.2, 0.4]])
    expected = -(math.log(0.8) + math.log(0.6)) / 2
    assert reg_loss(_pred(p), np.zeros((1, 2), dtype=bool)) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seg_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    pred = _pred(rng.random((3, 4)))
    assert seg_loss(pred, rng.random((3, 4)) > 0.5) >= 0.0


def test_seg_loss_gradient_through_logits():
    rng = np.random.default_rng(1)
    fg, bg = rng.standard_normal((2, 2)) * 3, rng.standard_normal((2, 2)) * 3
    truth = np.array([[1, 0], [1, 1]], dtype=bool)
    pred = predict([fg], bg)
    d_prob = seg_loss_grad(pred, truth)
    d_fg = d_prob * pred.prob_fg * pred.prob_bg
    fd = fd_gradient(lambda x: seg_loss(predict([x], bg), truth), fg)
    assert relative_error(d_fg, fd) < 1e-6


def test_total_examples():
    assert total_loss(1.0, 2.0, 3.0, 1.0).total == 6.0
    lb = total_loss(0.3, 0.4, 5.0, 0.0)
    assert lb.total == 0.3 + 0.4
    assert total_loss(1.0, 1.0, 1.0, 1.0).beta == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3), st.sampled_from([0.0, 0.2, 1.0, 1.5]))
def test_total_composition(seg, reg, adv, beta):
    lb = total_loss(seg, reg, adv, beta)
    assert lb.total == seg + reg + beta * adv
    assert (lb.seg, lb.reg, lb.adv, lb.beta) == (seg, reg, adv, beta)


def test_dice_examples():
    a = np.array([[1, 1], [0, 0]], dtype=bool)
    assert dice(a, a) == 100.0
    assert dice(a, ~a) == 0.0
    assert dice(a, np.array([[1, 0], [1, 0]], dtype=bool)) == 50.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 100.0
    with pytest.raises(DimensionError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_matches_set_oracle_on_small_masks():
    rng = np.random.default_rng(2)
    for _ in range(300):
        a = rng.random((3, 3)) > 0.5
        b = rng.random((3, 3)) > 0.5
        assert dice(a, b) == set_dice(a, b)
        assert dice(a, b) == dice(b, a)
