import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scai_lab.heatmap import DecodeFailure, decode_batch, decode_peak, pck, render_batch, render_gaussian


def test_render_at_pixel_centre():
    h = render_gaussian((8, 8), 2.0, (17, 17))
    assert h[8, 8] == 1.0
    # distance 2 at sigma 2: exp(-4 / 8)
    assert h[8, 10] == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert h[10, 8] == pytest.approx(0.6065, abs=1e-4)
    assert (h >= 0).all()


def test_render_symmetric_under_reflection():
    h = render_gaussian((8, 5), 2.0, (17, 17))
    np.testing.assert_allclose(h, h[:, ::-1], rtol=0, atol=1e-15)


def test_render_sum_matches_pixel_loop():
    c = (30.0, 33.0)
    h = render_gaussian(c, 2.0, (64, 64))
    total = 0.0
    for y in range(64):
        for x in range(64):
            total += math.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / 8.0)
    assert h.sum() == pytest.approx(total, rel=1e-12)


def test_render_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        render_gaussian((17.0, 3.0), 2.0, (17, 17))
    with pytest.raises(ValueError):
        render_gaussian((3.0, -0.5), 2.0, (17, 17))


def test_render_batch_matches_single():
    cs = np.array([[3.3, 4.7], [10.0, 2.0]])
    hb = render_batch(cs, 1.5, (12, 14), dtype=np.float64)
    for c, h in zip(cs, hb):
        np.testing.assert_allclose(h, render_gaussian(c, 1.5, (12, 14)), rtol=1e-12)


def test_decode_delta_map():
    h = np.zeros((9, 9))
    h[5, 3] = 1.0
    assert decode_peak(h) == ((3.0, 5.0), 1.0)


def test_decode_tie_break_lowest_row_major():
    h2 = np.zeros((5, 5))
    h2.flat[7] = 2.0
    h2.flat[20] = 2.0
    (x, y), _ = decode_peak(h2)
    assert (round(x), round(y)) == (2, 1)  # index 7 -> row 1, col 2


def test_decode_all_zero_signals_failure():
    with pytest.raises(DecodeFailure):
        decode_peak(np.zeros((4, 4)))
    coords, conf = decode_batch(np.zeros((2, 4, 4)))
    assert np.isnan(coords).all() and (conf == 0).all()


def test_round_trip_1000_random_coords():
    rng = np.random.default_rng(0)
    cs = rng.uniform(2, 62, size=(1000, 2))
    maps = render_batch(cs, 2.0, (64, 64), dtype=np.float64)
    dec, _ = decode_batch(maps)
    err = np.linalg.norm(dec - cs, axis=1)
    assert err.max() <= 0.5
    for c in cs[:20]:
        (x, y), _ = decode_peak(render_gaussian(c, 2.0, (64, 64)))
        assert math.hypot(x - c[0], y - c[1]) <= 0.5


def test_decode_batch_agrees_with_scalar():
    rng = np.random.default_rng(1)
    maps = rng.random((50, 7, 9))
    coords, conf = decode_batch(maps)
    for m, c, f in zip(maps, coords, conf):
        (x, y), cf = decode_peak(m)
        assert (x, y) == tuple(c) and cf == f


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_decode_invariant_to_positive_scaling(k, seed):
    m = np.random.default_rng(seed).random((8, 8))
    assert decode_peak(m)[0] == decode_peak(m * k)[0]


def test_pck_examples():
    gt = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [5.0, 5.0]])
    assert pck(gt, gt, 10.0) == 1.0
    pred = gt + np.array([[0.5, 0.0], [3.0, 0.0], [0.0, 0.9], [2.0, 2.0]])
    assert pck(pred, gt, 10.0, tau=0.1) == 0.5
    assert pck(pred, gt, 10.0, visible=[False] * 4) is None


def test_pck_matches_recount():
    rng = np.random.default_rng(5)
    gt = rng.uniform(0, 64, size=(300, 12, 2))
    pred = gt + rng.normal(0, 2.0, size=gt.shape)
    ref = rng.uniform(15, 25, size=(300, 1))
    vis = rng.random((300, 12)) > 0.2
    hits = total = 0
    for i in range(300):
        for k in range(12):
            if vis[i, k]:
                total += 1
                d = math.hypot(*(pred[i, k] - gt[i, k]))
                hits += d <= 0.1 * ref[i, 0]
    assert pck(pred, gt, ref, 0.1, vis) == hits / total


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-20, 20), st.floats(-20, 20))
def test_pck_translation_invariant_and_monotone(seed, dx, dy):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 30, size=(20, 2))
    pred = gt + rng.normal(0, 1.5, size=gt.shape)
    shift = np.array([dx, dy])
    assert pck(pred + shift, gt + shift, 10.0) == pytest.approx(pck(pred, gt, 10.0))
    taus = [0.05, 0.1, 0.2, 0.4]
    vals = [pck(pred, gt, 10.0, t) for t in taus]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
