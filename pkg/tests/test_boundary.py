"""Tests for the Feller classification of the boundary 0."""

import pytest

from src.boundary import classify
from src.errors import DomainError
from src.transform import Coefficients


@pytest.mark.parametrize('alpha,expected', [
    (0.0, 'regular'),
    (0.5, 'regular'),
    (1.0, 'exit'),
    (1.5, 'exit'),
    (2.0, 'natural'),
])
@pytest.mark.parametrize('x0', [0.5, 1.0, 2.0])
def test_power_family(alpha, expected, x0):
    report = classify(Coefficients.power_family(alpha), x0=x0)
    assert report.boundary_type == expected
    assert not report.indeterminate


def test_exit_boundary_measures():
    report = classify(Coefficients.power_family(1.0))
    assert report.S0.finite is True
    assert report.M0.finite is False
    assert report.Sigma.finite is True
    assert report.N.finite is False


def test_entrance_boundary():
    report = classify(Coefficients.from_expressions('x', '1'))
    assert report.boundary_type == 'entrance'
    assert report.Sigma.finite is False
    assert report.N.finite is True
    assert 'unsupported' in report.note


def test_reference_pairs_are_regular():
    assert classify(Coefficients.heat()).boundary_type == 'regular'
    assert classify(Coefficients.linear_half_drift()).boundary_type == 'regular'


def test_report_dict():
    out = classify(Coefficients.power_family(0.5), x0=1.0).to_dict()
    assert out['boundary_type'] == 'regular'
    assert out['x0'] == 1.0
    assert out['coefficients']['alpha'] == 0.5
    assert set(out) >= {'S0', 'M0', 'Sigma', 'N', 'note', 'indeterminate'}
    assert out['N']['finite'] is True


@pytest.mark.parametrize('x0', [0.0, -1.0, float('inf')])
def test_bad_anchor(x0):
    with pytest.raises(DomainError):
        classify(Coefficients.heat(), x0=x0)
