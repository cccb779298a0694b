"""Tests for the Duhamel series of q_nu^V."""

import math

import numpy as np
import pytest

from src.closed_forms import DriftVariant
from src.duhamel import (KernelValue, PotentialKernel, backward_residual_qV, check_derivative_bound,
                         ck_residual_qV, constant_potential_derivative, default_order,
                         duhamel_iterate, q_nu_V, symmetry_residual_qV, tail_bound)
from src.errors import DomainError
from src.model_kernel import q_sigma


C = 0.5


@pytest.fixture(scope='module')
def constant_kernel():
    return PotentialKernel.constant(0.25, C, order=8)


@pytest.fixture(scope='module')
def decaying_kernel():
    return PotentialKernel(0.0, lambda z: 0.5 * np.exp(-np.asarray(z, dtype=float)), 0.5,
                           label='V=0.5exp(-z)')


class TestConstantPotential:
    @pytest.mark.parametrize('z,w,t', [(0.5, 0.8, 0.5), (1.0, 1.0, 0.5), (2.0, 0.7, 0.5)])
    def test_exact_exponential_factor(self, constant_kernel, z, w, t):
        kv = q_nu_V(constant_kernel, z, w, t)
        expected = math.exp(C * t) * q_sigma(0.25, z, w, t)
        assert kv.value == pytest.approx(expected, rel=1e-8)
        assert kv.order == 8

    @pytest.mark.parametrize('n', [1, 2, 3])
    def test_iterates(self, constant_kernel, n):
        z, w, t = 0.9, 1.3, 0.6
        expected = (C * t) ** n / math.factorial(n) * q_sigma(0.25, z, w, t)
        assert duhamel_iterate(constant_kernel, n, z, w, t) == pytest.approx(expected, rel=1e-8)

    def test_zeroth_iterate_is_model_kernel(self, constant_kernel):
        assert constant_kernel.iterate(0, 0.9, 1.3, 0.6) == q_sigma(0.25, 0.9, 1.3, 0.6)

    def test_symmetry(self, constant_kernel):
        assert symmetry_residual_qV(constant_kernel, 0.6, 1.4, 0.5) < 1e-8

    def test_chapman_kolmogorov(self, constant_kernel):
        assert ck_residual_qV(constant_kernel, 0.8, 1.1, 0.3, 0.2) < 1e-6

    def test_backward_equation(self, constant_kernel):
        assert backward_residual_qV(constant_kernel, 1.0, 0.9, 0.5, 1e-3) < 1e-3

    def test_derivative_bound(self, constant_kernel):
        report = check_derivative_bound(constant_kernel, 0, 0.7, 1.2, 0.5)
        assert report['pass']
        assert report['lhs'] <= report['rhs']

    def test_first_derivative_needs_admissible_index(self, constant_kernel):
        with pytest.raises(DomainError, match='not admissible'):
            check_derivative_bound(constant_kernel, 1, 0.7, 1.2, 0.5)

    @pytest.mark.parametrize('z,w', [(0.7, 1.2), (0.2, 0.4)])
    def test_first_derivative_bound_is_exact_on_lhs(self, z, w):
        pk = PotentialKernel.constant(-0.5, C, order=8)
        t = 0.5
        report = check_derivative_bound(pk, 1, z, w, t)
        assert report['pass']
        exact = abs(constant_potential_derivative(-0.5, C, 1, z, w, t))
        assert report['lhs'] == pytest.approx(exact, rel=1e-4)

    def test_exact_derivative(self, constant_kernel):
        z, w, t, h = 0.7, 1.2, 0.5, 1e-4
        fd = (constant_kernel.evaluate(z + h, w, t).value
              - constant_kernel.evaluate(z - h, w, t).value) / (2 * h)
        assert constant_potential_derivative(0.25, C, 1, z, w, t) == pytest.approx(fd, rel=1e-5)


class TestDecayingPotential:
    def test_ratio_bound(self, decaying_kernel):
        t = 0.8
        for z, w in [(0.3, 0.5), (1.0, 2.0), (3.0, 2.5)]:
            value = decaying_kernel.evaluate(z, w, t).value
            base = q_sigma(0.0, z, w, t)
            assert 1.0 <= value / base <= 1.0 + decaying_kernel.ratio_bound(t)

    def test_partial_sums_increase_with_order(self, decaying_kernel):
        values = [decaying_kernel.evaluate(0.5, 0.9, 0.8, order=k).value for k in range(4)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_truncation_bound_brackets_higher_orders(self, decaying_kernel):
        low = decaying_kernel.evaluate(0.5, 0.9, 0.8, order=2)
        high = decaying_kernel.evaluate(0.5, 0.9, 0.8, order=7)
        assert abs(high.value - low.value) <= low.truncation_error + low.quadrature_estimate \
            + high.quadrature_estimate

    def test_default_order_tracks_tail(self, decaying_kernel):
        t = 0.8
        k = decaying_kernel.order_for(t)
        assert decaying_kernel.tail_bound(t) <= 1e-6
        assert k == 0 or decaying_kernel.tail_bound(t, k - 1) > 1e-6

    def test_evaluate_many_matches_single(self, decaying_kernel):
        zs = np.array([0.4, 1.1])
        many = decaying_kernel.evaluate_many(zs, 0.9, 0.8)
        for z, kv in zip(zs, many):
            assert kv.value == pytest.approx(decaying_kernel.evaluate(z, 0.9, 0.8).value, rel=1e-7)


class TestDriftFamilyNearBoundary:
    @pytest.fixture(scope='class')
    def variant(self):
        # α = 4/3 gives ν = -1/2
        return DriftVariant(4.0 / 3.0, 2.0, lambda x: np.exp(-x), lambda x: -np.exp(-x))

    def test_index(self, variant):
        assert variant.nu == pytest.approx(-0.5, abs=1e-14)

    @pytest.mark.parametrize('z,w', [(0.1, 0.1), (0.1, 0.5), (0.3, 0.2), (0.5, 0.5)])
    def test_first_derivative_bound(self, variant, z, w):
        report = check_derivative_bound(variant.pk, 1, z, w, 0.5)
        assert report['pass'], report
        assert report['lhs'] > 0.0


class TestBounds:
    def test_tail_bound_formula(self):
        assert tail_bound(1.0, 1.0, 0) == pytest.approx(math.e, rel=1e-15)
        assert tail_bound(0.5, 2.0, 2) == pytest.approx(math.e / 6.0, rel=1e-15)

    def test_default_order(self):
        assert default_order(1.0, 0.0) == 0
        assert default_order(0.5, 1.0) == 7
        assert default_order(10.0, 10.0) == 8

    def test_zero_potential_is_exact(self):
        pk = PotentialKernel(0.5, lambda z: np.zeros_like(np.asarray(z, dtype=float)), 0.0)
        kv = pk.evaluate(1.0, 2.0, 0.5)
        assert kv.value == pytest.approx(q_sigma(0.5, 1.0, 2.0, 0.5), rel=1e-14)
        assert kv.order == 0
        assert kv.truncation_bound == 0.0
        assert pk.ratio_bound(3.0) == 0.0


class TestKernelValue:
    def test_error_budget(self):
        kv = KernelValue(value=2.0, truncation_bound=1e-3, quadrature_estimate=1e-6, base_value=1.5,
                         order=3)
        assert kv.truncation_error == pytest.approx(1.5e-3)
        assert kv.error_budget == pytest.approx(1.5e-3 + 1e-6)

    def test_scaled(self):
        kv = KernelValue(2.0, 1e-3, 1e-6, 1.5, 3).scaled(4.0)
        assert kv.value == 8.0
        assert kv.truncation_bound == 1e-3
        assert kv.truncation_error == pytest.approx(6e-3)
        assert kv.to_dict()['order'] == 3


class TestDomain:
    def test_negative_sup(self):
        with pytest.raises(DomainError):
            PotentialKernel(0.5, lambda z: z, -1.0)

    def test_negative_order(self):
        with pytest.raises(DomainError):
            PotentialKernel.constant(0.5, 1.0, order=-1)

    def test_index_at_least_one(self):
        with pytest.raises(DomainError):
            PotentialKernel.constant(1.0, 1.0)

    def test_nonpositive_points(self, constant_kernel):
        with pytest.raises(DomainError):
            constant_kernel.evaluate(0.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            constant_kernel.iterate(-1, 1.0, 1.0, 1.0)
