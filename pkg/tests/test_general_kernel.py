"""Tests for the assembled kernel p(x, y, t)."""

import math

import numpy as np
import pytest
from scipy import special

from src.closed_forms import DriftVariant, example4_dirichlet, heat_dirichlet, p_alpha
from src.duhamel import PotentialKernel
from src.errors import DomainError
from src.general_kernel import GeneralKernel, p, p_approx, p_approx_k, u_f


POINTS = [(0.5, 0.8, 0.4), (1.0, 1.0, 1.0), (2.0, 1.2, 0.7)]


@pytest.fixture(scope='module')
def power_kernel(power_bundle):
    def make(alpha):
        return GeneralKernel(power_bundle(alpha))
    return make


@pytest.fixture(scope='module')
def heat_kernel(heat_bundle):
    return GeneralKernel(heat_bundle)


@pytest.fixture(scope='module')
def drift_kernel(drift_bundle):
    return GeneralKernel(drift_bundle)


def test_linear_diffusion_value(power_kernel):
    expected = math.exp(-2.0) * special.iv(1, 2.0)
    assert p(power_kernel(1.0), 1.0, 1.0, 1.0).value == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize('alpha', [0.5, 1.0, 1.5])
@pytest.mark.parametrize('x,y,t', POINTS)
def test_power_family_matches_closed_form(power_kernel, alpha, x, y, t):
    assert power_kernel(alpha).p(x, y, t).value == pytest.approx(p_alpha(alpha, x, y, t), rel=1e-8)


@pytest.mark.parametrize('x,y,t', POINTS)
def test_heat(heat_kernel, x, y, t):
    assert heat_kernel.p(x, y, t).value == pytest.approx(heat_dirichlet(x, y, t), rel=1e-9)


@pytest.mark.parametrize('x,y,t', POINTS)
def test_linear_half_drift(example4_bundle, x, y, t):
    gk = GeneralKernel(example4_bundle)
    assert gk.p(x, y, t).value == pytest.approx(example4_dirichlet(x, y, t), rel=1e-9)


def test_drift_free_kernel_has_no_truncation(heat_kernel):
    kv = heat_kernel.p(1.0, 1.5, 0.5)
    assert kv.order == 0
    assert kv.truncation_error == 0.0
    assert p_approx(heat_kernel, 1.0, 1.5, 0.5) == pytest.approx(kv.value, rel=1e-14)


def test_many_y_matches_single(power_kernel):
    gk = power_kernel(0.5)
    ys = np.array([0.2, 0.9, 3.0])
    for y, kv in zip(ys, gk.p_many_y(1.1, ys, 0.6)):
        assert kv.value == pytest.approx(gk.p(1.1, y, 0.6).value, rel=1e-11)


def test_many_x_matches_single(heat_kernel):
    xs = np.array([0.3, 1.0, 2.5])
    for x, kv in zip(xs, heat_kernel.p_many_x(xs, 0.8, 0.6)):
        assert kv.value == pytest.approx(heat_kernel.p(x, 0.8, 0.6).value, rel=1e-12)


class TestSolutions:
    @pytest.mark.parametrize('x,t', [(0.5, 1.0), (2.0, 0.3)])
    def test_unit_data_survival_linear(self, power_kernel, x, t):
        assert u_f(power_kernel(1.0), lambda y: 1.0, x, t) == pytest.approx(1.0 - math.exp(-x / t),
                                                                             abs=1e-8)

    def test_unit_data_survival_heat(self, heat_kernel):
        x, t = 1.0, 0.5
        assert heat_kernel.u_f(lambda y: 1.0, x, t) == pytest.approx(math.erf(x / (2 * math.sqrt(t))),
                                                                     abs=1e-8)


def test_derivative_bound_is_tight_at_order_zero(power_kernel):
    report = power_kernel(1.0).p_derivative_bound_check(0, 1.0, 0.5, n_grid=3)
    assert report['pass']
    assert report['worst_ratio'] == pytest.approx(1.0, abs=1e-9)


class TestDriftKernel:
    def test_matches_closed_form_variant(self, drift_kernel):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        for x, y, t in [(0.5, 0.8, 0.4), (1.0, 1.3, 0.8)]:
            general = drift_kernel.p(x, y, t, order=6).value
            assert general == pytest.approx(variant.p(x, y, t, order=6).value, rel=1e-5)

    def test_first_order_matches_x_recursion(self, drift_kernel):
        variant = DriftVariant(1.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))
        x, y, t = 0.8, 1.2, 0.4
        assert drift_kernel.p(x, y, t, order=1).value == pytest.approx(
            variant.p_recursive(x, y, t, order=1), rel=1e-5)

    def test_approximation_bound(self, drift_kernel):
        t = 0.5
        value = drift_kernel.p(0.7, 1.1, t).value
        approx = drift_kernel.p_approx(0.7, 1.1, t)
        assert abs(value / approx - 1.0) <= drift_kernel.ratio_bound(t)

    def test_order_zero_is_approximation(self, drift_kernel):
        assert p_approx_k(drift_kernel, 0, 0.7, 1.1, 0.5) == pytest.approx(
            drift_kernel.p_approx(0.7, 1.1, 0.5), rel=1e-12)

    def test_symmetry(self, drift_kernel):
        assert drift_kernel.symmetry_residual(0.6, 1.4, 0.5) < 1e-7

    def test_backward_equation(self, drift_kernel):
        assert drift_kernel.pde_residual_backward(1.0, 1.2, 0.5, 1e-2) < 1e-3

    def test_forward_equation(self, drift_kernel):
        assert drift_kernel.pde_residual_forward(1.0, 1.2, 0.5, 1e-2) < 1e-3


def test_heat_equation_residuals(heat_kernel):
    assert heat_kernel.pde_residual_backward(1.0, 1.2, 0.5, 1e-3) < 1e-5
    assert heat_kernel.pde_residual_forward(1.0, 1.2, 0.5, 1e-3) < 1e-5


def test_heat_chapman_kolmogorov(heat_kernel):
    assert heat_kernel.ck_residual(0.8, 1.1, 0.3, 0.2) < 1e-7


def test_chapman_kolmogorov_through_transform(example4_bundle):
    gk = GeneralKernel(example4_bundle)
    x, y, t, s = 0.8, 1.1, 0.3, 0.2
    transformed = gk.ck_residual_transformed(x, y, t, s)
    assert transformed < 1e-6 * gk.p(x, y, t + s).value
    assert abs(transformed - gk.ck_residual(x, y, t, s)) < 1e-6


class TestErrors:
    def test_nonpositive_points(self, heat_kernel):
        with pytest.raises(DomainError):
            heat_kernel.p(0.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            heat_kernel.p(1.0, 1.0, -1.0)

    def test_step_must_be_below_time(self, heat_kernel):
        with pytest.raises(DomainError):
            heat_kernel.pde_residual_backward(1.0, 1.0, 0.1, 0.2)

    def test_negative_order(self, heat_kernel):
        with pytest.raises(DomainError):
            heat_kernel.p_approx_k(-1, 1.0, 1.0, 1.0)

    def test_mismatched_potential_kernel(self, heat_bundle):
        with pytest.raises(DomainError):
            GeneralKernel(heat_bundle, PotentialKernel.constant(0.0, 0.0))
