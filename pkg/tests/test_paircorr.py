import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointql.errors import InvalidArgumentError
from pointql.paircorr import (
    PairCorrelationModel as PCF,
    effective_range,
    excess_integral,
    k_function,
    k_function_thomas,
    neumann_condition_bound,
    pcf_eval,
    taper_distance,
)

FAMILY_CASES = [
    PCF.thomas(100.0, 0.02),
    PCF.thomas(200.0, 0.04),
    PCF.matern(1.3, 0.05, 0.25),
    PCF.matern(2.0, 0.05, 0.5),
    PCF.matern(0.7, 0.03, 1.0),
    PCF.cauchy(1.5, 0.04),
]


def matern_oracle(r, sigma2, alpha, nu):
    x = mpmath.mpf(r) / alpha
    return float(sigma2 * x**nu * mpmath.besselk(nu, x) / (2 ** (nu - 1) * mpmath.gamma(nu)))


class TestConstruction:
    @pytest.mark.parametrize(
        "family,psi",
        [("thomas", (0.0, 0.02)), ("thomas", (100.0,)), ("matern", (1.0, 1.0, 0.7)),
         ("cauchy", (-1.0, 1.0)), ("gauss", (1.0, 1.0)), ("matern", (1.0, np.inf, 0.5))],
    )
    def test_invalid_rejected(self, family, psi):
        with pytest.raises(InvalidArgumentError):
            PCF(family, psi)

    def test_config_round_trip(self):
        for m in FAMILY_CASES + [PCF.poisson()]:
            assert PCF.from_config(m.to_config()) == m

    def test_config_unknown_key(self):
        with pytest.raises(InvalidArgumentError):
            PCF.from_config({"family": "thomas", "kappa": 1.0, "omega": 1.0, "sigma": 2.0})

    def test_config_missing_key(self):
        with pytest.raises(InvalidArgumentError):
            PCF.from_config({"family": "cauchy", "sigma2": 1.0})


class TestPcfEval:
    def test_thomas_at_zero(self):
        assert pcf_eval(PCF.thomas(100.0, 0.02), 0.0) == pytest.approx(1 + 1 / (4 * math.pi * 0.0004 * 100), rel=1e-14)
        assert pcf_eval(PCF.thomas(100.0, 0.02), 0.0) == pytest.approx(2.98944, abs=1e-5)

    def test_exponential_at_one(self):
        assert pcf_eval(PCF.matern(1.0, 1.0, 0.5), 1.0) == pytest.approx(1.36788, abs=1e-5)

    def test_poisson_is_one(self):
        np.testing.assert_array_equal(pcf_eval(PCF.poisson(), np.array([0.0, 1.0, 5.0])), 1.0)

    def test_negative_distance(self):
        with pytest.raises(InvalidArgumentError):
            pcf_eval(PCF.thomas(1.0, 1.0), -0.1)

    @pytest.mark.parametrize("nu", [0.25, 0.5, 1.0])
    def test_matern_against_mpmath(self, nu):
        m = PCF.matern(1.7, 0.3, nu)
        for r in [1e-6, 0.01, 0.1, 0.3, 1.0, 3.0]:
            assert m.excess(np.array([r]))[0] == pytest.approx(matern_oracle(r, 1.7, 0.3, nu), rel=1e-10)
        assert m.c0 == 1.7

    def test_matern_half_is_exponential(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s2, a = rng.uniform(0.1, 5), rng.uniform(0.01, 2)
            r = rng.uniform(0, 10 * a, size=50)
            np.testing.assert_allclose(PCF.matern(s2, a, 0.5).excess(r), s2 * np.exp(-r / a), rtol=1e-10, atol=0)

    @pytest.mark.parametrize("m", FAMILY_CASES, ids=str)
    def test_tail_decays(self, m):
        assert abs(pcf_eval(m, 10 * effective_range(m)) - 1.0) < 1e-6

    @pytest.mark.parametrize("m", FAMILY_CASES, ids=str)
    def test_g_at_least_one_and_nonincreasing(self, m):
        r = np.linspace(0, 20 * m.scale, 2001)
        g = m(r)
        assert np.all(g >= 1.0)
        assert np.all(np.diff(g) <= 1e-15)


class TestExcessIntegral:
    def test_thomas(self):
        assert excess_integral(PCF.thomas(100.0, 0.02)) == pytest.approx(0.01, rel=1e-15)
        assert excess_integral(PCF.thomas(200.0, 0.04)) == pytest.approx(0.005, rel=1e-15)

    def test_cauchy_closed_form(self):
        assert excess_integral(PCF.cauchy(1.0, 1.0)) == pytest.approx(2 * math.pi, rel=1e-8)
        assert excess_integral(PCF.cauchy(2.5, 0.07)) == pytest.approx(2 * math.pi * 2.5 * 0.07**2, rel=1e-8)

    @pytest.mark.parametrize("nu", [0.25, 0.5, 1.0])
    def test_matern_closed_form(self, nu):
        # 2 pi int_0^inf c(s) s ds = 4 pi nu sigma2 alpha^2
        m = PCF.matern(1.4, 0.11, nu)
        assert excess_integral(m) == pytest.approx(4 * math.pi * nu * 1.4 * 0.11**2, rel=1e-8)

    def test_poisson(self):
        assert excess_integral(PCF.poisson()) == 0.0


class TestNeumannBound:
    def test_values(self):
        assert neumann_condition_bound(PCF.thomas(100.0, 0.02), 400.0) == pytest.approx(4.0)
        assert neumann_condition_bound(PCF.thomas(500.0, 0.02), 400.0) == pytest.approx(0.8)
        assert neumann_condition_bound(PCF.poisson(), 400.0) == 0.0

    def test_requires_positive_sup(self):
        with pytest.raises(InvalidArgumentError):
            neumann_condition_bound(PCF.thomas(1.0, 1.0), 0.0)


class TestKFunction:
    def test_zero(self):
        for m in FAMILY_CASES:
            assert k_function(m, 0.0) == 0.0

    def test_poisson(self):
        t = np.linspace(0, 3, 7)
        np.testing.assert_allclose(k_function(PCF.poisson(), t), math.pi * t**2, rtol=1e-15)

    def test_thomas_value(self):
        assert k_function(PCF.thomas(100.0, 0.02), 0.2) == pytest.approx(0.135664, abs=1e-6)

    def test_thomas_closed_form_vs_mpmath(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            kappa, omega = 10 ** rng.uniform(0, 3), 10 ** rng.uniform(-3, -0.5)
            t = rng.uniform(0.1, 8.0) * omega
            c = lambda s: mpmath.exp(-s * s / (4 * omega**2)) / (4 * mpmath.pi * omega**2 * kappa) * s  # noqa: E731
            oracle = float(mpmath.pi * t**2 + 2 * mpmath.pi * mpmath.quad(c, [0, t]))
            assert k_function_thomas(t, kappa, omega) == pytest.approx(oracle, rel=1e-8)

    def test_cauchy_closed_form(self):
        s2, a = 1.5, 0.04
        t = np.array([0.01, 0.04, 0.2, 1.0])
        closed = math.pi * t**2 + 2 * math.pi * s2 * a**2 * (1 - 1 / np.sqrt(1 + (t / a) ** 2))
        np.testing.assert_allclose(k_function(PCF.cauchy(s2, a), t), closed, rtol=1e-8)

    def test_vectorised_matches_scalar(self):
        m = PCF.matern(1.0, 0.05, 1.0)
        t = np.array([0.3, 0.05, 0.1])
        np.testing.assert_allclose(k_function(m, t), [k_function(m, x) for x in t], rtol=1e-12)

    @pytest.mark.parametrize("m", [c for c in FAMILY_CASES if c.family != "cauchy"], ids=str)
    def test_excess_converges(self, m):
        t = np.linspace(0, 20 * effective_range(m), 40)
        ex = k_function(m, t) - math.pi * t**2
        assert np.all(np.diff(ex) >= -1e-12)
        assert ex[-1] == pytest.approx(excess_integral(m), rel=1e-4)

    def test_cauchy_excess_tail(self):
        # cubic tail: the deficit at t is 2 pi sigma2 alpha^2 / sqrt(1 + (t/alpha)^2)
        m = PCF.cauchy(1.5, 0.04)
        t = 20 * effective_range(m)
        deficit = excess_integral(m) - (k_function(m, t) - math.pi * t**2)
        assert deficit == pytest.approx(2 * math.pi * 1.5 * 0.04**2 / math.sqrt(1 + (t / 0.04) ** 2), rel=1e-5)


class TestTaperDistance:
    def test_thomas_analytic(self):
        d = taper_distance(PCF.thomas(100.0, 0.02), 0.01)
        assert d == pytest.approx(2 * 0.02 * math.sqrt(math.log(100.0)), abs=1e-9)

    def test_exponential_analytic(self):
        assert taper_distance(PCF.matern(1.0, 15.5, 0.5), 0.01) == pytest.approx(15.5 * math.log(100.0), abs=1e-8)

    def test_cauchy_analytic(self):
        eps = 0.002
        assert taper_distance(PCF.cauchy(1.0, 0.2), eps) == pytest.approx(0.2 * math.sqrt(eps ** (-2 / 3) - 1), abs=1e-9)

    def test_ratio_at_result(self):
        for m in FAMILY_CASES:
            d = taper_distance(m, 0.05)
            assert m.excess(np.array([d]))[0] / m.c0 == pytest.approx(0.05, rel=1e-6)

    def test_near_one_goes_to_zero(self):
        assert taper_distance(PCF.thomas(100.0, 0.02), 1 - 1e-9) < 1e-5

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 2.0])
    def test_eps_range(self, eps):
        with pytest.raises(InvalidArgumentError):
            taper_distance(PCF.thomas(100.0, 0.02), eps)

    def test_poisson_undefined(self):
        with pytest.raises(InvalidArgumentError):
            taper_distance(PCF.poisson(), 0.01)

    @pytest.mark.parametrize("m", FAMILY_CASES, ids=str)
    def test_strictly_decreasing_in_eps(self, m):
        d = [taper_distance(m, e) for e in np.logspace(-6, -0.05, 25)]
        assert np.all(np.diff(d) < 0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1.0, 1e4), st.floats(1e-3, 1.0), st.floats(1e-5, 0.9))
    def test_thomas_inverse_property(self, kappa, omega, eps):
        d = taper_distance(PCF.thomas(kappa, omega), eps)
        assert d == pytest.approx(2 * omega * math.sqrt(math.log(1 / eps)), abs=2e-10)
