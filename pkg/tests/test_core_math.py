import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pon import core_math as cm
from pon.errors import InvalidInputError

mpmath.mp.dps = 50


def mp_poisson(rate, k):
    """High-precision normalised truncated Poisson pmf."""
    lam = mpmath.mpf(rate)
    w = [lam**j * mpmath.exp(-lam) / mpmath.factorial(j) for j in range(k)]
    z = mpmath.fsum(w)
    return np.array([float(v / z) for v in w])


class TestSoftplus:
    def test_zero_is_ln2(self):
        assert cm.softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_large_input_is_identity(self):
        assert abs(cm.softplus(100.0) - 100.0) < 1e-12

    def test_negative_matches_mpmath(self):
        assert cm.softplus(-5.0) == pytest.approx(float(mpmath.log1p(mpmath.exp(-5))), rel=1e-14)

    def test_crossover_continuity(self):
        for z in (29.999, 30.0, 30.001):
            assert cm.softplus(z) == pytest.approx(float(mpmath.log1p(mpmath.exp(z))), rel=1e-15)

    def test_floor(self):
        assert cm.softplus(-800.0) == cm.RATE_FLOOR

    @pytest.mark.parametrize("z", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, z):
        with pytest.raises(InvalidInputError):
            cm.softplus(z)


class TestLogScores:
    def test_rate_one(self):
        h = cm.poisson_log_scores(1.0, 5)
        expected = [-1 - math.log(math.factorial(k)) for k in range(5)]
        np.testing.assert_allclose(h, expected, atol=1e-15)
        np.testing.assert_allclose(h, [-1, -1, -1.693147, -2.791759, -4.178053], atol=1e-6)

    @pytest.mark.parametrize("rate", [0.3, 1.0, 7.5, 42.0])
    def test_zero_class_is_minus_rate(self, rate):
        assert cm.poisson_log_scores(rate, 4)[0] == -rate

    def test_rate_five_ties_at_four_and_five(self):
        h = cm.poisson_log_scores(5.0, 10)
        assert h[4] == h[5]
        assert np.argmax(h) in (4, 5)
        assert np.all(h[[0, 1, 2, 3, 6, 7, 8, 9]] < h[4])

    def test_large_k_has_no_overflow(self):
        h = cm.poisson_log_scores(50.0, 400)
        assert np.all(np.isfinite(h))
        ref = [50 * 0 - 50] + [k * math.log(50) - 50 - math.lgamma(k + 1) for k in range(1, 400)]
        np.testing.assert_allclose(h, ref, rtol=1e-12)

    def test_rate_derivative(self):
        d = cm.score_rate_derivative(2.0, 4)
        np.testing.assert_allclose(d, [-1, -0.5, 0, 0.5])


class TestNormalize:
    def test_rate_one_example(self):
        p = cm.poisson_probs(1.0, 5)
        np.testing.assert_allclose(p, [0.369231, 0.369231, 0.184615, 0.061538, 0.015385], atol=1e-6)

    @pytest.mark.parametrize("rate", [0.01, 1.0, 5.0, 19.9])
    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_matches_high_precision_oracle(self, rate, k):
        assert np.max(np.abs(cm.poisson_probs(rate, k) - mp_poisson(rate, k))) < 1e-12

    def test_vanishing_rate_concentrates_on_zero(self):
        np.testing.assert_allclose(cm.poisson_probs(1e-8, 2), [1, 0], atol=1e-6)

    def test_mode_noninteger(self):
        assert np.argmax(cm.poisson_probs(2.5, 5)) == 2

    def test_batch_matches_rows(self):
        rates = np.array([0.5, 3.0, 8.2])
        batch = cm.poisson_probs(rates, 6)
        for i, r in enumerate(rates):
            np.testing.assert_array_equal(batch[i], cm.poisson_probs(r, 6))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            cm.normalize_scores([0.0, np.nan])

    def test_large_scores_are_stable(self):
        p = cm.normalize_scores([1000.0, 1000.0, 0.0])
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0])


def test_unimodality_over_10k_random_rates():
    rng = np.random.default_rng(123)
    bad = 0
    for _ in range(10_000):
        lam = float(rng.uniform(0.0, 100.0)) or 100.0
        k = int(rng.integers(2, 11))
        p = cm.poisson_probs(lam, k)
        cm.check_prob_vector(p)
        bad += not cm.is_unimodal(p)
    assert bad == 0


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 100.0).filter(lambda x: x != int(x)), st.integers(2, 10))
def test_mode_law_noninteger(lam, k):
    p = cm.poisson_probs(lam, k)
    assert int(np.argmax(p)) == min(math.floor(lam), k - 1) == cm.poisson_mode(lam, k)


@pytest.mark.parametrize("k", range(2, 11))
def test_integer_rate_ties(k):
    for lam in range(1, k):
        p = cm.poisson_probs(float(lam), k)
        assert abs(p[lam - 1] - p[lam]) < 1e-12


class TestPoissonEncode:
    def test_zero_label_is_delta(self):
        for t in (0.05, 1.0, 5.0):
            np.testing.assert_array_equal(cm.poisson_encode(0, 5, t), [1, 0, 0, 0, 0])

    def test_rational_oracle(self):
        w = [Fraction(2**k, math.factorial(k)) for k in range(5)]
        exact = [v / sum(w) for v in w]
        assert exact == [Fraction(1, 7), Fraction(2, 7), Fraction(2, 7), Fraction(4, 21), Fraction(2, 21)]
        got = cm.poisson_encode(2, 5, 1.0)
        np.testing.assert_allclose(got, [float(v) for v in exact], rtol=0, atol=4 * np.finfo(float).eps)

    def test_low_temperature_is_flatter_with_tied_maxima(self):
        sharp, flat = cm.poisson_encode(2, 5, 1.0), cm.poisson_encode(2, 5, 0.1)
        assert cm.entropy(flat) > cm.entropy(sharp)
        assert flat[1] == flat[2]
        assert set(np.flatnonzero(flat == flat.max())) == {1, 2}

    @pytest.mark.parametrize("y", [1, 2, 3, 4])
    def test_entropy_non_increasing_in_temperature(self, y):
        ts = [0.05, 0.1, 0.5, 1, 2, 5]
        h = [cm.entropy(cm.poisson_encode(y, 5, t)) for t in ts]
        assert all(a >= b for a, b in zip(h, h[1:]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 10).flatmap(lambda k: st.tuples(st.just(k), st.integers(1, k - 1))), st.floats(0.01, 10.0))
    def test_tied_maxima(self, ky, t):
        k, y = ky
        p = cm.poisson_encode(y, k, t)
        assert abs(p[y - 1] - p[y]) < 1e-12
        assert p[y] == pytest.approx(p.max(), abs=1e-12)

    @pytest.mark.parametrize("t", [0.0, -1.0, np.nan])
    def test_bad_temperature(self, t):
        with pytest.raises(InvalidInputError):
            cm.poisson_encode(1, 5, t)

    def test_bad_label(self):
        with pytest.raises(InvalidInputError):
            cm.poisson_encode(5, 5, 1.0)


class TestBaselineEncodings:
    def test_one_hot(self):
        np.testing.assert_array_equal(cm.one_hot_encode(3, 5), [0, 0, 0, 1, 0])
        np.testing.assert_array_equal(cm.one_hot_encode(0, 2), [1, 0])

    @pytest.mark.parametrize("y,expected", [(3, [1, 1, 1, 0]), (0, [0, 0, 0, 0]), (4, [1, 1, 1, 1])])
    def test_ordinal_cumulative(self, y, expected):
        np.testing.assert_array_equal(cm.ordinal_cumulative_encode(y, 5), expected)

    def test_soft_label_limit(self):
        np.testing.assert_allclose(cm.soft_label_encode(2, 5, 1e-4), [0, 0, 1, 0, 0], atol=1e-9)

    def test_soft_label_brute_force(self):
        w = [mpmath.exp(-mpmath.mpf(k * k) / 2) for k in range(3)]
        ref = [float(v / mpmath.fsum(w)) for v in w]
        np.testing.assert_allclose(cm.soft_label_encode(0, 3, 1.0), ref, rtol=1e-14)
        np.testing.assert_allclose(ref, [0.574097, 0.348207, 0.077696], atol=1e-6)

    def test_soft_label_symmetric(self):
        p = cm.soft_label_encode(2, 5, 0.8)
        np.testing.assert_allclose(p, p[::-1], rtol=0, atol=1e-16)

    def test_soft_label_bad_sigma(self):
        with pytest.raises(InvalidInputError):
            cm.soft_label_encode(1, 3, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 10).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 1))))
    def test_encoders_give_prob_vectors(self, ky):
        k, y = ky
        for p in (cm.one_hot_encode(y, k), cm.poisson_encode(y, k, 0.1), cm.soft_label_encode(y, k, 1.0)):
            cm.check_prob_vector(p)
        code = cm.ordinal_cumulative_encode(y, k)
        assert code.shape == (k - 1,) and set(np.unique(code)) <= {0.0, 1.0}


def test_is_unimodal_helper():
    assert cm.is_unimodal([0.1, 0.4, 0.4, 0.1])
    assert cm.is_unimodal([0.5, 0.3, 0.2])
    assert not cm.is_unimodal([0.4, 0.1, 0.5])
