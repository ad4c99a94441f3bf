import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqshift import checkpoint
from uqshift.calibrate import (
    IsotonicFit,
    PlattCalibrator,
    VennAbersCalibrator,
    apply_calibrator,
    fit_calibrator,
    fit_platt,
    pava,
    va_point,
    venn_abers,
    venn_abers_naive,
)
from uqshift.errors import CalibrationError, ContractViolation
from uqshift.metrics import ace, auc


def monotone_ls_oracle(targets, weights):
    """Exhaustive search over consecutive block partitions with non-decreasing means."""
    t = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = len(t)
    best, best_fit = math.inf, None
    for cuts in itertools.product((0, 1), repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        means = [np.dot(w[a:b], t[a:b]) / w[a:b].sum() for a, b in zip(bounds, bounds[1:])]
        if any(m2 < m1 for m1, m2 in zip(means, means[1:])):
            continue
        fit = np.concatenate([np.full(b - a, m) for (a, b), m in zip(zip(bounds, bounds[1:]), means)])
        sse = float(np.dot(w, (fit - t) ** 2))
        if sse < best - 1e-15:
            best, best_fit = sse, fit
    return best_fit


# -- Platt ----------------------------------------------------------------------------

def test_platt_recovers_identity():
    rng = np.random.default_rng(0)
    s = rng.normal(0, 2, size=10_000)
    y = (rng.random(10_000) < 1 / (1 + np.exp(-s))).astype(int)
    cal = fit_platt(s, y)
    assert abs(cal.A - 1) < 0.1 and abs(cal.B) < 0.1


def test_platt_constant_scores_give_smoothed_rate():
    y = np.array([1] * 30 + [0] * 70)
    cal = fit_platt(np.full(100, 0.7), y)
    smoothed = (30 * 31 / 32 + 70 * 1 / 72) / 100
    for q in (-5.0, 0.7, 12.0):
        assert apply_calibrator(cal, q) == pytest.approx(smoothed, abs=1e-6)


def test_platt_inverted_labels_flip_slope():
    rng = np.random.default_rng(1)
    s = rng.normal(size=2000)
    y = (rng.random(2000) < 1 / (1 + np.exp(-2 * s))).astype(int)
    a = fit_platt(s, y)
    b = fit_platt(s, 1 - y)
    assert a.A > 0 > b.A
    assert b.A == pytest.approx(-a.A, rel=1e-6)


def test_platt_identity_map():
    cal = PlattCalibrator(1.0, 0.0)
    s = np.linspace(-4, 4, 9)
    np.testing.assert_allclose(apply_calibrator(cal, s), 1 / (1 + np.exp(-s)), rtol=1e-15)


def test_platt_reaches_stationary_point():
    rng = np.random.default_rng(2)
    s = rng.normal(size=500)
    y = (rng.random(500) < 0.3 + 0.4 * (s > 0)).astype(int)
    cal = fit_platt(s, y)
    n_pos, n_neg = y.sum(), 500 - y.sum()
    t = np.where(y == 1, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
    r = 1 / (1 + np.exp(-(cal.A * s + cal.B))) - t
    assert np.hypot(np.mean(r * s), np.mean(r)) < 1e-8


def test_platt_errors():
    with pytest.raises(CalibrationError):
        fit_platt([0.1, 0.2], [1, 1])
    with pytest.raises(CalibrationError):
        fit_platt([0.1, np.inf], [0, 1])
    with pytest.raises(ContractViolation):
        apply_calibrator(PlattCalibrator(), 0.3)
    with pytest.raises(ContractViolation):
        apply_calibrator(None, 0.3)


# -- PAVA ------------------------------------------------------------------------------

def test_pava_examples():
    assert pava([1, 2, 3, 4], [0, 1, 0, 1]).fitted.tolist() == [0, 0.5, 0.5, 1]
    assert pava([1, 2, 3], [0.1, 0.4, 0.9]).fitted.tolist() == [0.1, 0.4, 0.9]
    assert pava([1, 2, 3], [0.3, 0.3, 0.3]).fitted.tolist() == [0.3, 0.3, 0.3]


def test_pava_step_queries():
    fit = pava([1, 2, 3, 4], [0, 1, 0, 1])
    assert fit(0.0) == 0.0 and fit(2.5) == 0.5 and fit(3.999) == 0.5 and fit(10) == 1.0


def test_pava_equal_scores_are_pooled():
    fit = pava([1, 1, 2], [1, 0, 0.2])
    assert fit.fitted[0] == fit.fitted[1]
    np.testing.assert_allclose(fit.fitted, [0.4, 0.4, 0.4], rtol=1e-15)


def test_pava_contract():
    with pytest.raises(ContractViolation):
        pava([2, 1], [0, 1])
    with pytest.raises(ContractViolation):
        pava([1, 2], [0, 1], [1, 0])
    with pytest.raises(ContractViolation):
        pava([], [])


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-5, 5), min_size=n, max_size=n),
    st.lists(st.floats(0.1, 4), min_size=n, max_size=n),
)))
def test_pava_matches_exhaustive_oracle(tw):
    targets, weights = tw
    fit = pava(np.arange(len(targets)), targets, weights)
    assert np.all(np.diff(fit.fitted) >= 0)
    np.testing.assert_allclose(fit.fitted, monotone_ls_oracle(targets, weights), atol=1e-10, rtol=0)


def test_pava_binary_grid_exhaustive():
    # every binary target vector of length <= 8
    for n in range(1, 9):
        for t in itertools.product((0, 1), repeat=n):
            fit = pava(np.arange(n), t).fitted
            np.testing.assert_allclose(fit, monotone_ls_oracle(t, np.ones(n)), atol=1e-10, rtol=0)


# -- Venn-ABERS ------------------------------------------------------------------------

def test_va_ignorance_fixture():
    p0, p1 = venn_abers([(0.5, 0), (0.5, 1)], 0.5)
    assert p0 == pytest.approx(1 / 3, abs=1e-15) and p1 == pytest.approx(2 / 3, abs=1e-15)


def test_va_separated_calibration():
    calib = [(float(i), 0) for i in range(10)] + [(float(i), 1) for i in range(10, 20)]
    p0, p1 = venn_abers(calib, 100.0)
    assert p1 == 1.0
    # the query pools with the 10 positives of the top block
    assert p0 == pytest.approx(10 / 11, abs=1e-15)
    assert p1 - p0 <= 1 / (10 + 1) + 1e-15


def test_va_point_examples():
    assert va_point(0.2, 0.4) == pytest.approx(1 / 3, abs=1e-12)
    assert va_point(0.0, 1.0) == 0.5
    for p in np.linspace(0, 1, 11):
        assert va_point(p, p) == pytest.approx(p, abs=1e-15)
    with pytest.raises(CalibrationError):
        va_point(1.0, 0.0)


def test_va_fast_matches_naive_fixture():
    cs = [0.1, 0.4, 0.4, 0.7, 0.9]
    cy = [0, 1, 0, 0, 1]
    cal = VennAbersCalibrator(cs, cy)
    for q in (0.05, 0.4, 0.8):
        p0, p1 = cal.predict_interval(np.array([q]))
        assert (p0[0], p1[0]) == venn_abers_naive(cs, cy, q)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_va_fast_matches_naive_random(seed, n):
    rng = np.random.default_rng(seed)
    # coarse grid forces ties between calibration and query scores
    cs = rng.integers(0, 8, size=n) / 4.0
    cy = rng.integers(0, 2, size=n)
    cal = VennAbersCalibrator(cs, cy)
    queries = np.r_[rng.integers(-1, 10, size=6) / 4.0, rng.normal(size=3)]
    p0, p1 = cal.predict_interval(queries)
    for q, a, b in zip(queries, p0, p1):
        assert (a, b) == venn_abers_naive(cs, cy, q)
        assert 0 <= a <= 1 and 0 <= b <= 1


def test_va_is_monotone():
    rng = np.random.default_rng(3)
    s = rng.normal(size=300)
    y = (rng.random(300) < 1 / (1 + np.exp(-s))).astype(int)
    cal = VennAbersCalibrator(s, y)
    q = np.sort(rng.normal(0, 2, size=500))
    assert np.all(np.diff(cal.predict(q)) >= 0)


def test_va_requires_data():
    with pytest.raises(ContractViolation):
        VennAbersCalibrator([], [])
    with pytest.raises(ContractViolation):
        VennAbersCalibrator([0.1], [2])
    with pytest.raises(ContractViolation):
        VennAbersCalibrator().predict([0.3])


# -- shared behaviour --------------------------------------------------------------------

def test_platt_preserves_auc_bitwise():
    rng = np.random.default_rng(4)
    s = rng.normal(size=2000)
    y = (rng.random(2000) < 1 / (1 + np.exp(-s))).astype(int)
    cal = fit_platt(s[:1000], y[:1000])
    assert cal.A > 0
    q = s[1000:]
    assert auc(apply_calibrator(cal, q), y[1000:]) == auc(q, y[1000:])


@pytest.mark.parametrize("name", ["platt", "va"])
def test_temperature_distortion_is_repaired(name):
    rng = np.random.default_rng(5)
    true_logit = rng.normal(0, 1.5, size=20_000)
    y = (rng.random(20_000) < 1 / (1 + np.exp(-true_logit))).astype(int)
    score = 3.0 * true_logit  # overconfident scorer
    raw = 1 / (1 + np.exp(-score[10_000:]))
    cal = fit_calibrator(name, score[:10_000], y[:10_000])
    before = ace(raw, y[10_000:])
    after = ace(apply_calibrator(cal, score[10_000:]), y[10_000:])
    assert after <= 0.7 * before


@pytest.mark.parametrize("cal", [PlattCalibrator(0.8, -0.1), VennAbersCalibrator([0.1, 0.5, 0.9], [0, 1, 1])])
def test_calibrator_checkpoints(tmp_path, cal):
    checkpoint.save(cal, tmp_path / "c.json")
    back = checkpoint.load(tmp_path / "c.json")
    q = np.array([0.0, 0.3, 0.7, 2.0])
    assert np.array_equal(back.predict(q), cal.predict(q))


def test_apply_calibrator_scalar():
    assert isinstance(apply_calibrator(PlattCalibrator(1.0, 0.0), 0.0), float)
    with pytest.raises(ValueError):
        fit_calibrator("isotonic", [0.1], [1])
