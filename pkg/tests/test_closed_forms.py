"""Tests for the closed-form kernels and the mass-loss formulas."""

import math

import numpy as np
import pytest
from scipy import integrate

from src.closed_forms import (DriftVariant, drift_variant_p, eta, example4_free, geometric_alpha2,
                              heat_dirichlet, heat_neumann, mass_loss, mass_loss_asymptotic,
                              mass_loss_log_ratio, mass_loss_quadrature, mass_loss_ratio_budget,
                              p_alpha, p_alpha_series, phi_power, psi_power, reference_kernels)
from src.errors import ConvergenceError, DomainError
from src.specfun import EvalTolerance


def zeros(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@pytest.mark.parametrize('alpha', [0.3, 1.0, 1.5, 1.9])
@pytest.mark.parametrize('x,y,t', [(0.5, 0.8, 0.4), (1.0, 1.0, 1.0), (2.0, 1.2, 0.7)])
def test_series_matches_bessel_form(alpha, x, y, t):
    assert p_alpha(alpha, x, y, t) == pytest.approx(p_alpha_series(alpha, x, y, t), rel=1e-10)


def test_series_sums_past_the_peak_near_alpha_two():
    # terms peak near n ≈ 239 here, beyond a couple hundred terms
    assert p_alpha_series(1.9, 0.5, 0.8, 0.4) == pytest.approx(0.348174259985560, rel=1e-10)


@pytest.mark.parametrize('alpha,x,y,t,max_terms', [(1.99, 1.0, 1.0, 1.0, 500),
                                                   (1.9, 0.5, 0.8, 0.4, 200)])
def test_series_raises_when_budget_is_short(alpha, x, y, t, max_terms):
    with pytest.raises(ConvergenceError, match='did not converge'):
        p_alpha_series(alpha, x, y, t, tol=EvalTolerance(max_terms=max_terms))


def test_p_alpha_broadcasts():
    ys = np.array([0.5, 1.0, 2.0])
    out = p_alpha(0.5, 1.0, ys, 0.5)
    assert out.shape == (3,)
    assert out[1] == pytest.approx(p_alpha(0.5, 1.0, 1.0, 0.5), rel=1e-15)


def test_phi_and_psi_are_inverse():
    xs = np.array([0.1, 1.0, 4.0])
    np.testing.assert_allclose(psi_power(0.7, phi_power(0.7, xs)), xs, rtol=1e-13)


class TestMassLoss:
    @pytest.mark.parametrize('x,t', [(0.5, 1.0), (2.0, 0.3)])
    def test_linear_diffusion(self, x, t):
        assert eta(1.0) == 1.0
        assert mass_loss(1.0, x, t) == pytest.approx(math.exp(-x / t), rel=1e-12)

    def test_order_two(self):
        # η = 2 gives (1 + T) e^{-T}
        x, t = 1.0, 0.5
        T = x ** 0.5 / (0.25 * t)
        assert mass_loss(1.5, x, t) == pytest.approx((1.0 + T) * math.exp(-T), rel=1e-12)

    @pytest.mark.parametrize('alpha', [0.5, 1.0, 1.5])
    def test_matches_quadrature(self, alpha):
        assert mass_loss(alpha, 1.0, 1.0) == pytest.approx(mass_loss_quadrature(alpha, 1.0, 1.0),
                                                           abs=1e-8)

    def test_increases_with_time(self):
        values = [mass_loss(0.8, 1.0, t) for t in (0.1, 0.5, 1.0, 5.0)]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert 0.0 < values[0] < values[-1] < 1.0

    def test_asymptotic_near_quadratic_diffusion(self):
        assert mass_loss_asymptotic(1.9, 1.0, 1.0) == pytest.approx(mass_loss(1.9, 1.0, 1.0),
                                                                    rel=1e-2)

    def test_log_ratio_uses_tail_when_mass_underflows(self):
        assert mass_loss(1.9, 1.0, 0.1) == 0.0
        ratio = mass_loss_log_ratio(1.9, 1.0, 0.1)
        assert ratio == pytest.approx(0.9506, abs=1e-3)
        assert abs(ratio - 1.0) <= mass_loss_ratio_budget(1.9)

    def test_budget(self):
        assert mass_loss_ratio_budget(1.9) == pytest.approx(0.5 * (1.0 + math.log(10.0)), rel=1e-12)

    @pytest.mark.parametrize('alpha', [0.0, 2.0, -1.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(DomainError):
            mass_loss(alpha, 1.0, 1.0)


class TestDriftVariant:
    def test_zero_drift_is_power_kernel(self):
        variant = DriftVariant(0.5, 1.0, zeros, zeros)
        assert variant.ratio_bound(1.0) == 0.0
        for x, y, t in [(0.5, 0.8, 0.4), (2.0, 1.2, 0.7)]:
            assert variant.p(x, y, t).value == pytest.approx(p_alpha(0.5, x, y, t), rel=1e-9)

    def test_functional_form(self):
        kv = drift_variant_p(0.5, 1.0, zeros, 1.0, 1.0, 1.0, phi_prime=zeros)
        assert kv.value == pytest.approx(p_alpha(0.5, 1.0, 1.0, 1.0), rel=1e-9)

    def test_drift_exponent_is_antisymmetric(self):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        forward = variant.drift_exponent(0.5, 1.5)
        assert forward == pytest.approx(-variant.drift_exponent(1.5, 0.5), rel=1e-14)
        # ½∫ u e^{-u} du from 0.5 to 1.5
        expected = 0.5 * (1.5 * math.exp(-0.5) - 2.5 * math.exp(-1.5))
        assert forward == pytest.approx(expected, rel=1e-10)

    def test_tail_bound_shrinks(self):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        assert variant.tail_bound(0.5, 4) < variant.tail_bound(0.5, 1)

    def test_first_term_from_x_recursion(self):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        x, y, t = 0.7, 1.1, 0.5
        from_potential = variant.p(x, y, t, order=1).value - variant.p(x, y, t, order=0).value
        from_recursion = variant.p_term(1, x, y, t)
        assert from_recursion != 0.0
        assert from_recursion == pytest.approx(from_potential, rel=1e-4)

    def test_zeroth_term_is_gauged_power_kernel(self):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        assert variant.p_term(0, 0.7, 1.1, 0.5) == pytest.approx(variant.p_base(0.7, 1.1, 0.5),
                                                                 rel=1e-14)

    def test_recursion_without_drift(self):
        variant = DriftVariant(0.5, 1.0, zeros, zeros)
        assert variant.p_term(1, 0.8, 1.2, 0.4) == 0.0
        assert variant.p_recursive(0.8, 1.2, 0.4) == pytest.approx(p_alpha(0.5, 0.8, 1.2, 0.4),
                                                                   rel=1e-14)

    def test_negative_term_index(self):
        variant = DriftVariant(0.5, 1.0, zeros, zeros)
        with pytest.raises(DomainError):
            variant.p_term(-1, 1.0, 1.0, 1.0)

    def test_non_decaying_drift(self):
        with pytest.raises(DomainError):
            DriftVariant(1.0, 2.0, lambda x: np.ones_like(np.asarray(x, dtype=float)), zeros)

    def test_beta_range(self):
        with pytest.raises(DomainError):
            DriftVariant(1.0, 0.5, lambda x: np.exp(-x))


class TestReferenceKernels:
    def test_heat_pair_difference(self):
        x, y, t = 0.7, 1.3, 0.4
        gap = math.exp(-(x + y) ** 2 / (4 * t)) / math.sqrt(math.pi * t)
        assert heat_neumann(x, y, t) - heat_dirichlet(x, y, t) == pytest.approx(gap, rel=1e-12)

    def test_heat_dirichlet_survival(self):
        x, t = 1.0, 0.5
        mass, _ = integrate.quad(lambda y: heat_dirichlet(x, y, t), 0.0, np.inf)
        assert mass == pytest.approx(math.erf(x / (2 * math.sqrt(t))), abs=1e-8)

    def test_free_kernels_conserve_mass(self):
        mass, _ = integrate.quad(lambda s: example4_free(1.0, s * s, 0.5) * 2.0 * s, 0.0, np.inf,
                                 limit=200)
        assert mass == pytest.approx(1.0, abs=1e-7)
        log_mass, _ = integrate.quad(lambda u: geometric_alpha2(1.0, math.exp(u), 0.5) * math.exp(u),
                                     -30.0, 30.0, limit=200)
        assert log_mass == pytest.approx(1.0, abs=1e-8)

    def test_lookup_by_name(self):
        assert reference_kernels('heat_dirichlet', 0.5, 0.9, 0.3) == pytest.approx(
            heat_dirichlet(0.5, 0.9, 0.3), rel=1e-15)

    def test_unknown_name(self):
        with pytest.raises(DomainError):
            reference_kernels('ornstein', 1.0, 1.0, 1.0)

    def test_nonpositive_arguments(self):
        with pytest.raises(DomainError):
            reference_kernels('heat_neumann', 1.0, 0.0, 1.0)
