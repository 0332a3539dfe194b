import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bro.prototypes import (
    cosine_map,
    cosine_map_vjp,
    grid_local_prototypes,
    masked_avg_pool,
    masked_avg_pool_vjp,
    predict,
    predict_vjp,
)
from bro.tensor_core import DegenerateInputError, fd_gradient, relative_error


def test_pool_examples():
    f = np.random.default_rng(0).standard_normal((3, 4, 5))
    np.testing.assert_allclose(masked_avg_pool(f, np.ones((4, 5))).vector, f.mean(axis=(1, 2)), atol=1e-15)
    single = np.zeros((4, 5), dtype=bool)
    single[2, 3] = True
    np.testing.assert_array_equal(masked_avg_pool(f, single).vector, f[:, 2, 3])
    feat = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert masked_avg_pool(feat, np.array([[1, 1], [0, 0]])).vector.tolist() == [1.5]


def test_pool_empty_region():
    with pytest.raises(DegenerateInputError):
        masked_avg_pool(np.ones((2, 3, 3)), np.zeros((3, 3)))


def test_grid_one_cell_is_global():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((2, 5, 6))
    m = rng.random((5, 6)) > 0.5
    protos = grid_local_prototypes(f, m, cell=6)
    assert len(protos) == 1
    np.testing.assert_allclose(protos[0].vector, masked_avg_pool(f, m).vector, atol=1e-15)


def test_grid_single_active_cell():
    f = np.random.default_rng(2).standard_normal((3, 4, 4))
    m = np.zeros((4, 4), dtype=bool)
    m[2:, :2] = [[True, False], [True, True]]
    protos = grid_local_prototypes(f, m, cell=2)
    assert len(protos) == 1
    np.testing.assert_allclose(protos[0].vector, f[:, m].mean(axis=1), atol=1e-15)


def test_grid_quadrants():
    f = np.zeros((1, 4, 4))
    f[0, :2, :2], f[0, :2, 2:], f[0, 2:, :2], f[0, 2:, 2:] = 1, 2, 3, 4
    protos = grid_local_prototypes(f, np.ones((4, 4)), cell=2)
    assert [p.vector.tolist() for p in protos] == [[1.0], [2.0], [3.0], [4.0]]
    assert all(p.origin == "grid_local" for p in protos)


def test_grid_threshold_falls_back_to_global():
    f = np.random.default_rng(3).standard_normal((2, 4, 4))
    m = np.zeros((4, 4), dtype=bool)
    m[1, 1] = m[2, 2] = True
    protos = grid_local_prototypes(f, m, cell=2, min_pixels=2)
    assert len(protos) == 1 and protos[0].origin == "global_map"
    assert grid_local_prototypes(f, np.zeros((4, 4)), cell=2) == []


def test_cosine_examples():
    f = np.array([[[1.0, 0.0, 2.0]], [[0.0, 1.0, 0.0]]])  # pixels (1,0), (0,1), (2,0)
    out = cosine_map(f, np.array([1.0, 0.0]), kappa=20.0)
    np.testing.assert_allclose(out, [[20.0, 0.0, 20.0]], atol=1e-12)
    out = cosine_map(f[:, :, :1], np.array([1.0, 1.0]), kappa=20.0)
    assert out[0, 0] == pytest.approx(20 / math.sqrt(2), abs=1e-12)
    assert out[0, 0] == pytest.approx(14.142, abs=1e-3)


def test_cosine_zero_pixel_and_zero_prototype():
    f = np.zeros((2, 1, 2))
    f[:, 0, 1] = [1.0, 1.0]
    np.testing.assert_allclose(cosine_map(f, np.array([1.0, 1.0])), [[0.0, 20.0]], atol=1e-12)
    with pytest.raises(DegenerateInputError):
        cosine_map(f, np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_cosine_scale_free(d, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((d, 3, 4))
    p = rng.standard_normal(d)
    base = cosine_map(f, p)
    assert np.all(np.abs(base) <= 20.0 + 1e-12)
    scaled = f * rng.uniform(0.1, 10, size=(1, 3, 4))
    np.testing.assert_allclose(cosine_map(scaled, p * rng.uniform(0.1, 10)), base, atol=1e-10)


def test_predict_examples():
    pred = predict([np.zeros((2, 2))], np.zeros((2, 2)))
    np.testing.assert_allclose(pred.prob_fg, 0.5, atol=1e-15)
    pred = predict([np.full((1, 1), 20.0)], np.full((1, 1), -20.0))
    assert pred.prob_fg[0, 0] == pytest.approx(1 / (1 + math.exp(-40)), abs=1e-15)
    m = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_allclose(predict([m], m).prob_fg, 0.5, atol=1e-15)


def test_predict_uses_max_over_foreground():
    a = np.array([[1.0, 5.0]])
    b = np.array([[3.0, 2.0]])
    pred = predict([a, b], np.zeros((1, 2)))
    expected = 1 / (1 + np.exp(-np.array([[3.0, 5.0]])))
    np.testing.assert_allclose(pred.prob_fg, expected, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_predict_is_distribution(k, seed):
    rng = np.random.default_rng(seed)
    maps = [rng.uniform(-20, 20, (3, 3)) for _ in range(k)]
    pred = predict(maps, rng.uniform(-20, 20, (3, 3)))
    assert np.all((pred.prob_fg >= 0) & (pred.prob_fg <= 1))
    np.testing.assert_allclose(pred.prob_fg + pred.prob_bg, 1.0, atol=1e-12)


@pytest.mark.parametrize("reduction", ["max", "softmax"])
def test_prediction_chain_gradient(reduction):
    rng = np.random.default_rng(9)
    f_q = rng.standard_normal((4, 3, 3))
    f_s = rng.standard_normal((4, 3, 3))
    mask = np.zeros((3, 3), dtype=bool)
    mask[:2, :2] = True
    w = rng.standard_normal((3, 3))

    def loss(fs, fq):
        protos = grid_local_prototypes(fs, mask, cell=1)
        bg = masked_avg_pool(fs, ~mask)
        pred = predict([cosine_map(fq, p.vector, 5.0) for p in protos], cosine_map(fq, bg.vector, 5.0), reduction)
        return float(np.sum(w * pred.prob_fg))

    protos = grid_local_prototypes(f_s, mask, cell=1)
    bg = masked_avg_pool(f_s, ~mask)
    fg = [cosine_map_vjp(f_q, p.vector, 5.0) for p in protos]
    bg_map, bg_pb = cosine_map_vjp(f_q, bg.vector, 5.0)
    _, pred_pb = predict_vjp([m for m, _ in fg], bg_map, reduction)
    d_maps, d_bg = pred_pb(w)
    d_fq, d_p = bg_pb(d_bg)
    d_fs = masked_avg_pool_vjp(f_s.shape, bg, d_p)
    for (_, pb), proto, d in zip(fg, protos, d_maps):
        a, b = pb(d)
        d_fq = d_fq + a
        d_fs = d_fs + masked_avg_pool_vjp(f_s.shape, proto, b)
    assert relative_error(d_fq, fd_gradient(lambda x: loss(f_s, x), f_q)) < 1e-4
    assert relative_error(d_fs, fd_gradient(lambda x: loss(x, f_q), f_s)) < 1e-4
