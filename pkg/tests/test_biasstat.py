import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from peerbias.biasstat import (BiasReport, UndefinedEffectError, binomial_tail, binomial_tail_exact, bias_percent,
                               crossval, histogram, improvement_counts, make_report, make_splits,
                               median_gap_percent, member_effects, peer_effect, read_bias_csv, sign_test,
                               welch_t, write_bias_csv, write_histogram_csv)
from peerbias.errors import DegenerateDataError
from peerbias.glm import fit_logistic


def test_peer_effect_zero_coefficient():
    X = np.array([[0.5, 1.0], [0.2, -1.0]])
    assert peer_effect(np.array([0.3, 0.0, 1.0]), X, 0) == 0.0


def test_peer_effect_single_logit():
    X = np.array([[1.0, 0.0]])
    assert peer_effect(np.array([0.0, 1.0, 0.0]), X, 0) == pytest.approx((0.7310586 - 0.5) / 0.7310586 * 100,
                                                                        abs=1e-4)


def test_peer_effect_excludes_zero_peer():
    X = np.array([[1.0, 0.0], [0.0, 5.0], [0.0, -5.0]])
    beta = np.array([0.0, 1.0, 1.0])
    assert len(member_effects(beta, X, 0)) == 1
    assert peer_effect(beta, X, 0) == pytest.approx(31.606, abs=1e-3)
    with pytest.raises(UndefinedEffectError):
        peer_effect(beta, X[1:], 0)


@given(st.floats(0.1, 10), st.integers(0, 1000))
def test_peer_effect_rescaling_invariance(c, seed):
    rng = np.random.default_rng(seed)
    X = np.c_[rng.random(8), rng.normal(size=(8, 2))]
    beta = rng.normal(size=4)
    Xs = X.copy()
    Xs[:, 1:] *= c
    bs = beta.copy()
    bs[2:] /= c
    assert peer_effect(bs, Xs, 0) == pytest.approx(peer_effect(beta, X, 0), rel=1e-9, abs=1e-9)


def test_bias_percent_examples():
    assert bias_percent(20.0, 20.0) == 0
    assert bias_percent(30.0, 20.0) == pytest.approx(50.0)
    assert bias_percent(10.0, -20.0) == pytest.approx(150.0)
    with pytest.raises(UndefinedEffectError):
        bias_percent(1.0, 0.0)


@given(st.floats(-1e6, 1e6).filter(lambda x: x != 0))
def test_bias_self_zero(x):
    assert bias_percent(x, x) == 0


def _sample(naive, proxy):
    reps = []
    for i, (n, p) in enumerate(zip(naive, proxy)):
        r = BiasReport(i)
        r.bias = {"naive": n, "true": 0.0, "comm": p}
        r.improved = {"comm": abs(p) < abs(n)}
        reps.append(r)
    return reps


NAIVE = (10, -20, 5, 50, -7, 9, 12, -3, 4, 8)


def test_improvement_halved():
    flags, (k, n) = improvement_counts([_sample(NAIVE, [v / 2 for v in NAIVE])], "comm")
    assert flags == [True] and (k, n) == (10, 10)


def test_improvement_strict():
    flags, (k, n) = improvement_counts([_sample(NAIVE, [-v for v in NAIVE])], "comm")
    assert flags == [False] and (k, n) == (0, 10)


def test_majority_needs_six_of_ten():
    five = [v / 2 for v in NAIVE[:5]] + list(NAIVE[5:])
    six = [v / 2 for v in NAIVE[:6]] + list(NAIVE[6:])
    assert improvement_counts([_sample(NAIVE, five)], "comm")[0] == [False]
    assert improvement_counts([_sample(NAIVE, six)], "comm")[0] == [True]


def test_excluded_reports_not_counted():
    reps = _sample(NAIVE[:3], [0, 0, 0])
    reps.append(BiasReport(9, excluded="zero-true-effect"))
    assert improvement_counts([reps, []], "comm") == ([True, False], (3, 3))


def test_make_report_exclusions():
    r = make_report(1, {"naive": 5.0, "true": 0.0, "latent": 1.0}, ("latent",))
    assert r.excluded == "zero-true-effect" and not r.included
    r = make_report(1, {"naive": 5.0, "true": 2.0, "latent": None}, ("latent",))
    assert r.excluded == "undefined-effect"
    r = make_report(1, {"naive": 30.0, "true": 20.0, "latent": 20.0}, ("latent",))
    assert r.bias == {"naive": 50.0, "true": 0.0, "latent": 0.0}
    assert r.improved == {"latent": True}


def test_binomial_tails_exact():
    assert binomial_tail_exact(12, 10) == Fraction(79, 4096)
    assert binomial_tail_exact(12, 11) == Fraction(13, 4096)
    assert binomial_tail(12, 0) == 1.0
    with pytest.raises(ValueError):
        binomial_tail(3, 4)
    with pytest.raises(ValueError):
        binomial_tail(3, 1, 1.5)


@given(st.integers(1, 40), st.data())
def test_binomial_complement(n, data):
    k = data.draw(st.integers(0, n))
    below = sum((Fraction(math.comb(n, i), 2 ** n) for i in range(k)), Fraction(0))
    assert binomial_tail_exact(n, k) + below == 1


def test_sign_test_levels():
    ten = [True] * 10 + [False] * 2
    eleven = [True] * 11 + [False]
    assert sign_test(ten).significant
    r = sign_test(ten, num_scenarios=9)
    assert not r.significant and r.critical_level == pytest.approx(0.05 / 9)
    assert sign_test(eleven, num_scenarios=9).significant
    assert r.count_majorities == 10 and r.to_json()["bonferroniDivisor"] == 9
    with pytest.raises(ValueError):
        sign_test([])


def test_welch_fixture():
    t, df, p = welch_t([1, 2, 3], [4, 5, 6])
    assert t == pytest.approx(-3.674, abs=5e-4)
    assert df == pytest.approx(4.0)
    assert abs(p - 0.0213) <= 1e-3


def test_welch_identical_and_swapped():
    a, b = [1.0, 4.0, 2.5, 7.0], [3.0, 3.5, 9.0]
    t, _, p = welch_t(a, a)
    assert t == 0 and p == 1
    t1, df1, p1 = welch_t(a, b)
    t2, df2, p2 = welch_t(b, a)
    assert t1 == -t2 and p1 == pytest.approx(p2) and df1 == pytest.approx(df2)


def test_welch_degenerate():
    with pytest.raises(DegenerateDataError):
        welch_t([1, 1, 1], [1, 1])
    with pytest.raises(DegenerateDataError):
        welch_t([1, 1, 1], [2, 2])
    with pytest.raises(ValueError):
        welch_t([1], [1, 2])


def test_median_gap():
    assert median_gap_percent([0.5, 0.5], [0.4]) == pytest.approx(20.0)
    with pytest.raises(UndefinedEffectError):
        median_gap_percent([0.0], [0.1])


def _refit_ridge(trains):
    return [[fit_logistic(X, y, 1.0).coefficients for X, y in split] for split in trains]


def test_crossval_constant_model():
    units = [(np.zeros((200, 2)), np.r_[np.ones(100), np.zeros(100)]) for _ in range(3)]
    score, per = crossval(units, _refit_ridge, seed=0)
    assert 0 <= score <= 2.0
    assert per.shape == (50,)


def test_crossval_deterministic_and_nonnegative():
    rng = np.random.default_rng(1)
    units = []
    for _ in range(3):
        X = rng.normal(size=(60, 2))
        units.append((X, (rng.random(60) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)))
    a = crossval(units, _refit_ridge, n_splits=10, seed=4)
    b = crossval(units, _refit_ridge, n_splits=10, seed=4)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert np.all(a[1] >= 0)


def test_splits_keep_rows_on_both_sides():
    for held in make_splits([2, 10, 37], n_splits=20, frac=0.1, seed=0):
        assert [len(h) for h in held] == [1, 1, 4]
    with pytest.raises(DegenerateDataError):
        make_splits([1], 1)


def test_bias_csv_round_trip(tmp_path):
    r = make_report(3, {"naive": 30.0, "true": 20.0, "latent": 10.0, "comm": 45.0}, ("latent", "comm"),
                    sample=2, scenario="(0,0)", model="hier")
    x = make_report(4, {"naive": 30.0, "true": 0.0, "latent": 2.0}, ("latent",), sample=2, scenario="(0,0)", model="hier")
    write_bias_csv([r, x], tmp_path / "b.csv")
    back = read_bias_csv(tmp_path / "b.csv")
    assert back[0].bias == r.bias and back[0].improved == r.improved
    assert back[1].excluded == "zero-true-effect"


def test_histogram_counts(tmp_path):
    rows = histogram([-10, 5, 5, 30], [0], [-25, 0, 25, 50])
    assert rows == [(-25.0, 0.0, 1, 0), (0.0, 25.0, 2, 1), (25.0, 50.0, 1, 0)]
    assert histogram([], [], [0, 1]) == [(0.0, 1.0, 0, 0)]
    write_histogram_csv(rows, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "binLow,binHigh,countHier,countAgglo"
