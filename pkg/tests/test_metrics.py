import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from weak2strong.metrics import (CrossingRule, MetricSeries, TeacherRegime, classify_teacher_band,
                                 first_at_tau, format_speedup, linear_cka, mean_entropy, mean_kl,
                                 speedup_ratio)

from oracles import cka_hsic, first_at_tau_brute, kl_rows


def test_first_at_tau_examples():
    hi = MetricSeries.from_values([50, 58, 61, 63])
    assert first_at_tau(hi, CrossingRule(60, 1)) == 3
    lo = MetricSeries.from_values([80, 70, 59, 62, 58, 55], "lower")
    assert first_at_tau(lo, CrossingRule(60, 2)) == 5
    assert first_at_tau(hi, CrossingRule(99, 1)) is None
    with pytest.raises(ValueError):
        first_at_tau(MetricSeries((), ()), CrossingRule(1.0))


def test_first_at_tau_brute_force_equivalence():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(1, 30))
        values = np.round(rng.random(n), 2)
        higher = bool(i % 2)
        hits = int(rng.integers(1, 3))
        tau = float(np.round(rng.random(), 2))
        start = int(rng.integers(0, 5))
        idx = [start + 5 * j for j in range(n)]
        series = MetricSeries(tuple(idx), tuple(values), "higher" if higher else "lower")
        want = first_at_tau_brute(list(values), tau, hits, higher, idx)
        assert first_at_tau(series, CrossingRule(tau, hits)) == want


@settings(max_examples=200, deadline=None)
@given(values=st.lists(st.floats(0, 1), min_size=1, max_size=20), t1=st.floats(0, 1),
       t2=st.floats(0, 1), hits=st.integers(1, 3))
def test_raising_tau_never_crosses_earlier(values, t1, t2, hits):
    lo, hi = sorted((t1, t2))
    s = MetricSeries.from_values(values)
    a, b = first_at_tau(s, CrossingRule(lo, hits)), first_at_tau(s, CrossingRule(hi, hits))
    if b is not None:
        assert a is not None and a <= b


def test_series_validation():
    with pytest.raises(ValueError):
        MetricSeries((1, 1), (0.1, 0.2))
    with pytest.raises(ValueError):
        MetricSeries((1,), (math.nan,))
    with pytest.raises(ValueError):
        CrossingRule(0.5, 0)


@pytest.mark.parametrize("base, ours, expected", [
    (10, 6, 1.67), (16000, 6000, 2.67), (19, 37, 0.51), (19, 4, 4.75)])
def test_speedup_examples(base, ours, expected):
    assert abs(round(speedup_ratio(base, ours), 2) - expected) <= 0.01


def test_speedup_edge_cases():
    assert speedup_ratio(7, 7) == 1.0
    for bad in [(None, 3), (3, None), (0, 3), (3, 0)]:
        with pytest.raises(ValueError):
            speedup_ratio(*bad)
    assert format_speedup(10, 6) == "1.67×"
    assert format_speedup(None, 6) == "—"


def test_cka_self_and_invariances():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 12))
    q = ortho_group.rvs(12, random_state=1)
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-6)
    y = rng.normal(size=(200, 7))
    base = linear_cka(x, y)
    assert linear_cka(3.7 * x, y) == pytest.approx(base, abs=1e-6)
    assert linear_cka(x, 0.01 * y) == pytest.approx(base, abs=1e-6)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-6)


def test_cka_matches_hsic_oracle():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(500, 10)), rng.normal(size=(500, 6))
    got = linear_cka(x, y)
    assert got < 0.1
    assert got == pytest.approx(cka_hsic(x, y), abs=1e-8)


def test_cka_bounded_and_zero_variance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = linear_cka(rng.normal(size=(30, 4)), rng.normal(size=(30, 3)))
        assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        linear_cka(np.ones((10, 3)), rng.normal(size=(10, 3)))


def test_entropy_examples():
    assert mean_entropy(np.full((3, 1000), 1e-3)) == pytest.approx(6.9078, abs=1e-4)
    assert mean_entropy(np.eye(4)) == 0.0
    assert mean_entropy([[0.5, 0.5]]) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        mean_entropy([[0.5, 0.6]])


def test_kl_examples_and_oracle():
    assert mean_kl([[0.2, 0.8]], [[0.2, 0.8]]) == 0.0
    assert mean_kl([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2))
    rng = np.random.default_rng(4)
    p = rng.dirichlet(np.ones(6), size=20)
    q = rng.dirichlet(np.ones(6), size=20)
    assert mean_kl(p, q) == pytest.approx(kl_rows(p.tolist(), q.tolist()), abs=1e-8)
    with pytest.raises(ValueError):
        mean_kl([[0.5, 0.5]], [[1.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=5)
    q = rng.dirichlet(np.ones(4), size=5)
    assert mean_kl(p, q) > 1e-9
    assert mean_kl(p, p) <= 1e-9


@pytest.mark.parametrize("teacher, student, gap, regime", [
    (70.73, 76.52, -7.57, TeacherRegime.SUITABLY_WEAKER),
    (69.62, 76.52, -9.02, TeacherRegime.SUITABLY_WEAKER),
    (76.52, 76.52, 0.0, TeacherRegime.TOO_STRONG),
    (30.0, 76.52, -60.79, TeacherRegime.TOO_WEAK)])
def test_teacher_band(teacher, student, gap, regime):
    rep = classify_teacher_band(teacher, student)
    assert round(rep.relative_gap, 2) == pytest.approx(gap, abs=1e-9)
    assert rep.regime is regime
    with pytest.raises(ValueError):
        classify_teacher_band(teacher, 0.0)


def test_band_edges_configurable():
    assert classify_teacher_band(70, 76.52, (-5, 0)).regime is TeacherRegime.TOO_WEAK
