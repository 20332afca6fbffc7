import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from evenet.special import DomainError, digamma, log_gamma, trigamma

# (x, psi(x), psi'(x), ln Gamma(x)) from mpmath at 40 significant digits
REFERENCE = [
    (0.001, -1000.5755719318103, 1000001.6425331958, 6.907178885383853),
    (0.1, -10.423754940411076, 101.43329915079275, 2.252712651734206),
    (0.5, -1.9635100260214235, 4.934802200544679, 0.5723649429247001),
    (1.0, -0.5772156649015329, 1.6449340668482264, 0.0),
    (1.5, 0.03648997397857652, 0.9348022005446793, -0.12078223763524522),
    (2.0, 0.42278433509846713, 0.6449340668482264, 0.0),
    (3.7, 1.1671535393615113, 0.3100378576700383, 1.428072326665388),
    (5.999, 1.7059363290792255, 0.1813557513843386, 4.785785715780557),
    (6.0, 1.7061176684318005, 0.18132295573711532, 4.787491742782046),
    (10.0, 2.251752589066721, 0.10516633568168575, 12.801827480081469),
    (123.456, 4.811829323828985, 0.008132945834278198, 469.6055471299295),
    (10000.0, 9.210290371142849, 0.00010000500016666666, 82099.71749644238),
    (1000000.0, 13.815510057964191, 1.0000005000001667e-06, 12815504.569147611),
]

GRID = np.geomspace(1e-3, 1e6, 400)


def _lgamma_tol(value):
    # a float64 result cannot be closer than half an ulp to the true value;
    # past x ~ 1e5 that already exceeds 1e-10
    return max(1e-10, 4 * np.spacing(abs(value)))


class TestFrozenReference:
    @pytest.mark.parametrize("x, psi, psi1, lg", REFERENCE)
    def test_digamma(self, x, psi, psi1, lg):
        assert abs(digamma(x) - psi) <= 1e-10

    @pytest.mark.parametrize("x, psi, psi1, lg", REFERENCE)
    def test_trigamma(self, x, psi, psi1, lg):
        assert abs(trigamma(x) - psi1) <= 1e-9

    @pytest.mark.parametrize("x, psi, psi1, lg", REFERENCE)
    def test_log_gamma(self, x, psi, psi1, lg):
        assert abs(log_gamma(x) - lg) <= _lgamma_tol(lg)


class TestAgainstMpmath:
    def test_digamma_grid(self):
        ref = np.array([float(mp.digamma(x)) for x in GRID])
        assert np.abs(digamma(GRID) - ref).max() <= 1e-10

    def test_trigamma_grid(self):
        ref = np.array([float(mp.polygamma(1, x)) for x in GRID])
        assert np.abs(trigamma(GRID) - ref).max() <= 1e-9

    def test_log_gamma_grid(self):
        ref = np.array([float(mp.loggamma(x)) for x in GRID])
        err = np.abs(log_gamma(GRID) - ref)
        tol = np.maximum(1e-10, 4 * np.spacing(np.abs(ref)))
        assert (err <= tol).all()
        assert err[GRID <= 1e3].max() <= 1e-10


class TestIdentities:
    def test_known_values(self):
        assert abs(digamma(2.0) - digamma(1.0) - 1.0) <= 1e-12
        assert abs(digamma(1.0) + 0.5772156649015329) <= 1e-14
        assert abs(trigamma(1.0) - math.pi**2 / 6) <= 1e-12
        assert abs(log_gamma(1.0)) <= 1e-14
        assert abs(log_gamma(2.0)) <= 1e-14
        assert abs(log_gamma(5.0) - math.log(24.0)) <= 1e-13

    def test_recurrences(self):
        x = np.geomspace(1e-2, 1e3, 200)
        np.testing.assert_allclose(digamma(x + 1) - digamma(x), 1 / x, rtol=0, atol=1e-10)
        np.testing.assert_allclose(trigamma(x) - trigamma(x + 1), 1 / x**2, rtol=1e-12, atol=1e-10)
        np.testing.assert_allclose(log_gamma(x + 1) - log_gamma(x), np.log(x), rtol=0, atol=1e-10)

    def test_gamma_ratio(self):
        x = np.random.default_rng(42).uniform(0.1, 100, 500)
        np.testing.assert_allclose(np.exp(log_gamma(x + 1) - log_gamma(x)), x, rtol=1e-9)

    def test_trigamma_fd_at_three(self):
        h = 1e-5
        fd = (digamma(3 + h) - digamma(3 - h)) / (2 * h)
        assert abs(fd - trigamma(3.0)) / trigamma(3.0) <= 1e-5

    def test_derivative_chain(self):
        x = np.geomspace(0.01, 1e4, 120)
        h = 1e-5 * x
        fd_lg = (log_gamma(x + h) - log_gamma(x - h)) / (2 * h)
        fd_psi = (digamma(x + h) - digamma(x - h)) / (2 * h)
        np.testing.assert_allclose(fd_lg, digamma(x), rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(fd_psi, trigamma(x), rtol=1e-5)

    def test_across_shift_boundary(self):
        # the recurrence / series switch-over must not leave a visible seam
        x = np.array([6.0 - 1e-12, 6.0, 6.0 + 1e-12])
        assert np.ptp(digamma(x)) < 1e-11
        assert np.ptp(log_gamma(x)) < 1e-11


class TestShape:
    def test_monotone_and_positive(self):
        x = np.geomspace(1e-3, 1e6, 2000)
        assert (np.diff(digamma(x)) > 0).all()
        assert (trigamma(x) > 0).all()

    def test_scalar_returns_float(self):
        assert isinstance(digamma(1.5), float)
        out = trigamma(np.array([1.0, 2.0]))
        assert isinstance(out, np.ndarray) and out.shape == (2,)

    @pytest.mark.parametrize("fn", [digamma, trigamma, log_gamma])
    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan"), float("inf")])
    def test_domain(self, fn, bad):
        with pytest.raises(DomainError):
            fn(bad)

    def test_domain_error_in_array(self):
        with pytest.raises(DomainError):
            digamma(np.array([1.0, 0.0]))

    @given(st.floats(1e-3, 1e6))
    def test_digamma_bracketed_by_logs(self, x):
        # ln(x + 1/2) - 1/x <= psi(x) <= ln(x + e^{-gamma}) - 1/x
        lo = math.log(x + 0.5) - 1 / x
        hi = math.log(x + math.exp(-0.5772156649015329)) - 1 / x
        v = digamma(x)
        assert lo - 1e-9 <= v <= hi + 1e-9
