import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from trajvad.preprocess import (apply_standardizer, fit_standardizer, moving_average,
                                segment_track, smooth_track)

from conftest import make_track


def test_moving_average_hand_example():
    out = moving_average(np.array([0, 1, 0, 1, 0.0]), 1)
    np.testing.assert_allclose(out, [0.5, 1 / 3, 2 / 3, 1 / 3, 0.5], rtol=0, atol=1e-15)


def test_smoothing_fixed_points():
    const = make_track(np.tile([0.3, 0.4, 0.1, 0.2], (12, 1)))
    assert np.array_equal(smooth_track(const).boxes, const.boxes)
    single = make_track([[0.3, 0.4, 0.1, 0.2]])
    assert np.array_equal(smooth_track(single).boxes, single.boxes)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(4)),
              elements=st.floats(0, 1)), st.integers(0, 5))
def test_smoothing_stays_in_unit_box(boxes, radius):
    out = smooth_track(make_track(boxes), radius).boxes
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("L,n", [(15, 0), (16, 1), (20, 5)])
def test_window_counts(L, n):
    wins = segment_track(make_track(np.full((L, 4), 0.5), start=7), 16, 1)
    assert len(wins) == n
    assert [w.start_frame for w in wins] == list(range(7, 7 + n))


@given(st.integers(0, 80), st.integers(2, 20))
def test_window_count_property(L, T):
    track = make_track(np.full((L, 4), 0.5)) if L else make_track(np.zeros((0, 4)))
    assert len(segment_track(track, T, 1)) == max(0, L - T + 1)


def test_segment_rejects_bad_args():
    with pytest.raises(ValueError):
        segment_track(make_track(np.zeros((5, 4))), 1, 1)
    with pytest.raises(ValueError):
        segment_track(make_track(np.zeros((5, 4))), 2, 0)


def test_standardizer_examples():
    x = np.array([[5.0, 0.0], [5.0, 2.0]])
    std = fit_standardizer(x)
    assert std.mean.tolist() == [5.0, 1.0]
    assert std.std.tolist() == [1.0, 1.0]
    assert std.constant.tolist() == [True, False]
    assert apply_standardizer(std, x).tolist() == [[0.0, -1.0], [0.0, 1.0]]
    with pytest.raises(ValueError):
        fit_standardizer(x[:1])


def test_small_scale_columns_are_not_constant():
    # kinetic-energy-like column: tiny magnitude but genuine variation
    col = np.random.default_rng(0).uniform(1e-8, 3e-7, size=(100, 1))
    std = fit_standardizer(np.hstack([col, np.full((100, 1), 1e-7), np.zeros((100, 1))]))
    assert std.constant.tolist() == [False, True, True]


@settings(max_examples=30)
@given(arrays(np.float64, st.tuples(st.integers(2, 50), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_fit_apply_self_consistency(x):
    std = fit_standardizer(x)
    # near-degenerate columns lose digits to cancellation; not what this checks
    assume(np.all(std.constant | (std.std > 1e-3)))
    z = apply_standardizer(std, x)
    live = ~std.constant
    assert np.all(np.abs(z.mean(axis=0)[live]) < 1e-9)
    np.testing.assert_allclose(z.std(axis=0)[live], 1.0, atol=1e-9)
    rms = np.sqrt(np.mean(x * x, axis=0))[std.constant]
    assert np.all(np.abs(z[:, std.constant]) <= 1e-6 * rms * np.sqrt(len(x)) + 1e-300)


def test_mask_drops_columns():
    x = np.random.default_rng(0).normal(size=(10, 16, 27))
    mask = np.ones(27, bool)
    mask[-1] = False
    std = fit_standardizer(x, mask)
    assert apply_standardizer(std, x).shape == (10, 16, 26)
    with pytest.raises(ValueError):
        fit_standardizer(x, np.zeros(27, bool))
