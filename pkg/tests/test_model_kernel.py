"""Tests for the model kernels q_sigma, q*, Q and their identities."""

import math

import numpy as np
import pytest

from src.closed_forms import example4_dirichlet, example4_free
from src.errors import DomainError
from src.model_kernel import (KernelPoint, Q, Q_upper_bound, S_k, backward_residual_q, conv_Q,
                              conv_Q_closed, dz_k_q, dz_k_v_g, forward_residual_q, q_sigma,
                              q_sigma_series, q_star, q_upper_bound, symmetry_residual_q,
                              total_mass, total_mass_quadrature, v_g, zero_flux_solution)
from src.utils import finite_difference


POINTS = [(0.3, 0.7, 0.5), (1.0, 1.0, 1.0), (2.0, 0.5, 0.25), (5.0, 6.0, 2.0)]


@pytest.mark.parametrize('sigma', [-1.5, 0.0, 1.0 / 3.0, 0.5, 1.0, 1.5])
@pytest.mark.parametrize('z,w,t', POINTS)
def test_bessel_form_matches_series(sigma, z, w, t):
    assert q_sigma(sigma, z, w, t) == pytest.approx(q_sigma_series(sigma, z, w, t), rel=1e-10)


@pytest.mark.parametrize('z,w,t', POINTS)
def test_half_index_is_example4_dirichlet(z, w, t):
    assert q_sigma(0.5, z, w, t) == pytest.approx(example4_dirichlet(z, w, t), rel=1e-12)


@pytest.mark.parametrize('z,w,t', POINTS)
def test_zero_flux_half_index_is_example4_free(z, w, t):
    assert q_star(0.5, z, w, t) == pytest.approx(example4_free(z, w, t), rel=1e-12)


def test_excluded_indices_raise():
    with pytest.raises(DomainError):
        q_sigma(2.0, 1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        q_sigma(3.0 + 1e-10, 1.0, 1.0, 1.0)


def test_nonpositive_arguments_raise():
    with pytest.raises(DomainError):
        q_sigma(0.5, 0.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        KernelPoint(1.0, -1.0, 1.0)


@pytest.mark.parametrize('nu', [-1.0, 0.0, 0.25, 0.5, 0.9])
@pytest.mark.parametrize('z,w,t', POINTS)
def test_symmetry(nu, z, w, t):
    assert symmetry_residual_q(nu, z, w, t) < 1e-12


def test_total_mass_at_zero_index():
    z, t = 1.3, 0.7
    assert total_mass(0.0, z, t) == pytest.approx(1.0 - math.exp(-z / t), rel=1e-13)


@pytest.mark.parametrize('nu', [-0.5, 0.0, 0.5])
def test_total_mass_matches_quadrature(nu):
    result = total_mass_quadrature(nu, 0.8, 0.6)
    assert result.value == pytest.approx(float(total_mass(nu, 0.8, 0.6)), abs=1e-9)


def test_extended_family_reflects_at_negative_integers():
    # -nu = 1, k = 3 >= 2 - nu: Q_{nu+k}(z, w) = q_0(w, z)
    z, w, t = 0.8, 1.7, 0.9
    assert Q(-1.0, 3, z, w, t) == pytest.approx(q_sigma(0.0, w, z, t), rel=1e-14)
    assert Q(-1.0, 1, z, w, t) == pytest.approx(q_sigma(0.0, z, w, t), rel=1e-14)


def test_derivative_recurrence_against_finite_difference():
    nu, z, w, t, h = 0.3, 1.2, 0.9, 0.8, 1e-4
    fd = (q_sigma(nu, z + h, w, t) - q_sigma(nu, z - h, w, t)) / (2 * h)
    assert dz_k_q(nu, 1, z, w, t) == pytest.approx(fd, rel=1e-6)


def test_s_k_dominates_derivative():
    nu, z, w, t = 0.3, 1.2, 0.9, 0.8
    for k in range(2):
        assert abs(dz_k_q(nu, k, z, w, t)) * t ** k <= S_k(nu, k, z, w, t) * (1 + 1e-12)


@pytest.mark.parametrize('sigma', [-2.0, 0.0, 0.5, 1.0])
def test_upper_bound_holds(sigma):
    zs = np.geomspace(1e-3, 20.0, 9)
    for t in (0.1, 1.0, 4.0):
        z, w = np.meshgrid(zs, zs, indexing='ij')
        assert np.all(np.abs(q_sigma(sigma, z, w, t)) <= q_upper_bound(sigma, z, w, t) * (1 + 1e-12))


def test_extended_upper_bound_holds():
    for k in range(4):
        assert abs(Q(-1.0, k, 0.5, 2.0, 0.7)) <= Q_upper_bound(-1.0, k, 0.5, 2.0, 0.7) * (1 + 1e-12)


def test_v_g_with_unit_data_is_total_mass():
    assert v_g(0.2, lambda w: 1.0, 1.0, 0.5) == pytest.approx(float(total_mass(0.2, 1.0, 0.5)),
                                                              abs=1e-9)


def test_first_derivative_of_solution():
    nu, z, t = 0.5, 1.0, 0.5
    fd, _ = finite_difference(lambda zz: v_g(nu, lambda w: w * w, zz, t), z, 1, 1e-3)
    assert dz_k_v_g(nu, 1, lambda w: 2.0 * w, z, t) == pytest.approx(fd, rel=1e-5)


def test_third_derivative_of_solution_at_negative_integer_index():
    def g(w):
        return w ** 3 * math.exp(-w)

    def g3(w):
        return (6.0 - 18.0 * w + 9.0 * w * w - w ** 3) * math.exp(-w)

    nu, z, t = -1.0, 1.0, 0.5
    fd, order = finite_difference(lambda zz: v_g(nu, g, zz, t), z, 3, 0.02)
    assert order == 2
    assert dz_k_v_g(nu, 3, g3, z, t) == pytest.approx(fd, rel=5e-3)


def test_zeroth_derivative_of_solution_is_solution():
    g = lambda w: math.exp(-w)
    assert dz_k_v_g(0.3, 0, g, 0.8, 0.4) == pytest.approx(v_g(0.3, g, 0.8, 0.4), rel=1e-10)


@pytest.mark.parametrize('nu', [-1.0, 0.0, 0.5])
def test_backward_and_forward_equations(nu):
    z, w, t, h = 1.0, 1.2, 0.5, 1e-3
    scale = float(q_sigma(nu, z, w, t))
    assert backward_residual_q(nu, z, w, t, h) < 1e-4 * scale
    assert forward_residual_q(nu, z, w, t, h) < 1e-4 * scale


def test_forward_equation_at_half_index_matches_closed_form():
    # q_{1/2} is the half-drift Dirichlet kernel, so its residual is that of the closed form
    z, w, t, h = 0.8, 1.1, 0.6, 1e-3
    assert float(q_sigma(0.5, z, w, t)) == pytest.approx(example4_dirichlet(z, w, t), rel=1e-12)
    assert forward_residual_q(0.5, z, w, t, h) < 1e-4 * example4_dirichlet(z, w, t)


def test_zero_flux_solution_conserves_mass():
    assert zero_flux_solution(0.5, lambda w: 1.0, 0.7, 1.3) == pytest.approx(1.0, abs=1e-8)


def test_zero_flux_solution_needs_positive_index():
    with pytest.raises(DomainError):
        zero_flux_solution(0.0, lambda w: 1.0, 1.0, 1.0)


@pytest.mark.parametrize('nu,k,l', [(0.5, 0, 0), (0.25, 0, 0), (-0.5, 1, 0), (-1.0, 2, 1),
                                    (-1.0, 3, 0)])
def test_convolution_closed_form(nu, k, l):
    z, w, t, s = 0.9, 1.4, 0.6, 0.4
    assert conv_Q(nu, k, l, z, w, t, s) == pytest.approx(conv_Q_closed(nu, k, l, z, w, t, s),
                                                         rel=1e-7, abs=1e-12)


def test_convolution_rejects_inadmissible_orders():
    with pytest.raises(DomainError):
        conv_Q_closed(0.5, 1, 0, 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        conv_Q_closed(-1.0, 1, 2, 1.0, 1.0, 1.0, 1.0)
