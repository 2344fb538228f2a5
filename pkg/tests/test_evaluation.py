from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from trajvad.evaluation import ap, auroc, concat_series, evaluate, filter_hr, format_report
from trajvad.track_io import FrameScoreSeries, GroundTruth

from oracles import ap_bruteforce, auroc_bruteforce

labels_st = st.lists(st.integers(0, 1), min_size=2, max_size=200)


@st.composite
def instances(draw, tie_heavy=False):
    y = draw(labels_st)
    assume(0 < sum(y) < len(y))
    if tie_heavy:
        s = draw(st.lists(st.integers(0, 4), min_size=len(y), max_size=len(y)))
        s = [float(v) for v in s]
    else:
        s = draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(y), max_size=len(y)))
    return s, y


@settings(max_examples=150)
@given(instances())
def test_auroc_matches_bruteforce(inst):
    s, y = inst
    assert auroc(s, y) == float(auroc_bruteforce(s, y))


@settings(max_examples=150)
@given(instances(tie_heavy=True))
def test_auroc_matches_bruteforce_ties(inst):
    s, y = inst
    assert auroc(s, y) == float(auroc_bruteforce(s, y))


@settings(max_examples=150)
@given(instances())
def test_ap_matches_bruteforce(inst):
    s, y = inst
    assert ap(s, y) == float(ap_bruteforce(s, y))


@settings(max_examples=150)
@given(instances(tie_heavy=True))
def test_ap_matches_bruteforce_ties(inst):
    s, y = inst
    assert ap(s, y) == float(ap_bruteforce(s, y))


def test_seeded_200_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.integers(0, 2, 200)
        s = np.round(rng.normal(size=200) + y, 1)
        assert auroc(s, y) == float(auroc_bruteforce(s.tolist(), y.tolist()))
        assert ap(s, y) == float(ap_bruteforce(s.tolist(), y.tolist()))


def test_perfect_separation_and_all_tied():
    y = [0, 0, 1, 1, 1, 0]
    s = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0]
    assert auroc(s, y) == 1.0 and ap(s, y) == 1.0
    y = [1, 0, 0, 0, 1, 0, 0]
    assert auroc([0.3] * 7, y) == 0.5
    assert ap([0.3] * 7, y) == float(Fraction(2, 7))


@given(instances(), st.sampled_from([np.exp, np.tanh, lambda v: 3 * v - 7, np.cbrt]))
def test_auroc_invariant_to_increasing_transform(inst, fn):
    s, y = inst
    s = np.asarray(s) / 1e3  # keep the transforms strictly increasing in float64
    t = fn(s)
    assume(np.array_equal(np.argsort(s, kind="stable"), np.argsort(t, kind="stable")))
    assume(len(np.unique(s)) == len(np.unique(t)))
    assert auroc(t, y) == auroc(s, y)
    assert ap(t, y) == ap(s, y)


def test_ap_above_prevalence_for_informative_scores():
    rng = np.random.default_rng(1)
    y = rng.random(5000) < 0.3
    s = rng.normal(size=5000) + 0.5 * y
    assert ap(s, y) > y.mean()


def test_single_class_and_shape_errors():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        ap([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ValueError):
        ap([0.1, 0.2], [0, 2])


def test_large_input_uses_compensated_sum():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 20000)
    s = rng.normal(size=20000) + y
    order = np.argsort(-s)
    ys = y[order]
    expected = np.sum(np.cumsum(ys)[ys == 1] / (np.flatnonzero(ys == 1) + 1)) / ys.sum()
    assert ap(s, y) == pytest.approx(expected, rel=1e-12)


def truths_and_series(hr):
    truths = {"a": GroundTruth("a", np.array([0, 1, 1, 0]), None if hr is None else np.array(hr[:4])),
              "b": GroundTruth("b", np.array([1, 0, 0]), None if hr is None else np.array(hr[4:]))}
    series = [FrameScoreSeries("b", np.array([0.9, 0.1, 0.2]), np.ones(3, bool)),
              FrameScoreSeries("a", np.array([0.0, 0.8, 0.7, 0.3]), np.ones(4, bool))]
    return truths, series


def test_filter_hr_examples():
    truths, series = truths_and_series([1] * 7)
    s, y = filter_hr(series, truths)
    assert np.array_equal(s, concat_series(series, truths)[0])
    assert s.tolist() == [0.0, 0.8, 0.7, 0.3, 0.9, 0.1, 0.2]  # sorted video order
    mask = [1, 0, 1, 1, 0, 0, 1]
    truths, series = truths_and_series(mask)
    s, y = filter_hr(series, truths)
    assert len(s) == sum(mask) and s.tolist() == [0.0, 0.7, 0.3, 0.2]
    truths, series = truths_and_series([0] * 7)
    with pytest.raises(ValueError):
        filter_hr(series, truths)
    truths, series = truths_and_series(None)
    with pytest.raises(ValueError):
        filter_hr(series, truths)


def test_evaluate_report():
    truths, series = truths_and_series([1, 1, 1, 1, 0, 1, 1])
    report = evaluate(series, truths)
    assert report["auroc"] == 1.0 and report["frames"] == 7.0
    assert "hr_auroc" in report
    text = format_report(report)
    assert "auroc=1.0" in text and "HR" in text
    truths, series = truths_and_series(None)
    assert "hr_auroc" not in evaluate(series, truths)


def test_length_mismatch():
    truths, series = truths_and_series(None)
    series[0] = FrameScoreSeries("b", np.zeros(4), np.ones(4, bool))
    with pytest.raises(ValueError):
        evaluate(series, truths)
