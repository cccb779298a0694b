"""Tests for the special functions."""

import math

import numpy as np
import pytest
from scipy import special

from src.errors import DomainError
from src.specfun import (EvalTolerance, bessel_i, bessel_i_scaled, gamma, lower_incomplete_gamma,
                         regularized_upper_gamma, stirling2, touchard, upper_incomplete_gamma)


class TestGamma:
    def test_positive_argument(self):
        assert gamma(5.0) == pytest.approx(24.0, rel=1e-14)
        assert gamma(0.5) == pytest.approx(math.sqrt(math.pi), rel=1e-14)

    def test_negative_half(self):
        assert gamma(-0.5) == pytest.approx(-2.0 * math.sqrt(math.pi), rel=1e-13)

    def test_negative_non_integer_matches_scipy(self):
        for alpha in (-1.5, -2.25, -3.7):
            assert gamma(alpha) == pytest.approx(float(special.gamma(alpha)), rel=1e-12)

    @pytest.mark.parametrize('pole', [0.0, -1.0, -2.0, -7.0])
    def test_poles_raise(self, pole):
        with pytest.raises(DomainError):
            gamma(pole)


class TestBessel:
    @pytest.mark.parametrize('x', [1.0, 10.0, 40.0])
    def test_half_order_closed_form(self, x):
        expected = math.sqrt(2.0 / (math.pi * x)) * math.sinh(x)
        assert bessel_i(0.5, x) == pytest.approx(expected, rel=1e-12)

    def test_series_and_scipy_agree_near_switchover(self):
        for order in (0.0, 1.0, 0.75, 2.5):
            assert bessel_i(order, 29.5) == pytest.approx(float(special.iv(order, 29.5)), rel=1e-11)

    def test_negative_integer_order_is_symmetric(self):
        assert bessel_i(-2, 3.0) == pytest.approx(bessel_i(2, 3.0), rel=1e-14)

    def test_scaled_form(self):
        x = np.array([0.1, 5.0, 50.0, 400.0])
        expected = special.ive(0.3, x)
        np.testing.assert_allclose(bessel_i_scaled(0.3, x), expected, rtol=1e-11)

    def test_array_shape_is_kept(self):
        x = np.linspace(0.0, 60.0, 12).reshape(3, 4)
        assert bessel_i(1.0, x).shape == (3, 4)

    def test_negative_argument_raises(self):
        with pytest.raises(DomainError):
            bessel_i(1.0, -1.0)

    def test_negative_non_integer_order_at_zero_raises(self):
        with pytest.raises(DomainError):
            bessel_i(-0.5, 0.0)


class TestIncompleteGamma:
    @pytest.mark.parametrize('x', [0.1, 1.0, 3.0, 25.0])
    def test_q_of_one_is_exponential(self, x):
        assert regularized_upper_gamma(1.0, x) == pytest.approx(math.exp(-x), rel=1e-12)

    @pytest.mark.parametrize('x', [0.2, 1.0, 4.0, 30.0])
    def test_q_of_half_is_erfc(self, x):
        assert regularized_upper_gamma(0.5, x) == pytest.approx(math.erfc(math.sqrt(x)), rel=1e-11)

    def test_lower_and_upper_sum_to_gamma(self):
        s, x = 2.5, 3.0
        total = lower_incomplete_gamma(s, x) + upper_incomplete_gamma(s, x)
        assert total == pytest.approx(float(special.gamma(s)), rel=1e-12)

    def test_nonpositive_shape_raises(self):
        with pytest.raises(DomainError):
            regularized_upper_gamma(0.0, 1.0)


class TestTouchard:
    def test_small_values(self):
        assert touchard(0, 3.7) == 1.0
        assert touchard(3, 1.0) == 5.0
        assert stirling2(4, 2) == 7

    def test_bell_numbers(self):
        assert [touchard(k, 1.0) for k in range(6)] == [1, 1, 2, 5, 15, 52]


def test_tolerance_validation():
    with pytest.raises(DomainError):
        EvalTolerance(rel_tol=0.0)
    with pytest.raises(DomainError):
        EvalTolerance(max_terms=0)
