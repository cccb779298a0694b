"""Tests for grid evaluation and table output."""

import csv
import io
import json
import time

import numpy as np
import pytest

from src.batch_processor import TABLE_FIELDS, BatchEvaluator
from src.closed_forms import p_alpha
from src.errors import EXIT_CONVERGENCE, EXIT_DOMAIN, ConvergenceError, DomainError
from src.transform import Coefficients


class _FailingKernel:
    def p_many_y(self, x, ys, t, order=None):
        raise ConvergenceError("quadrature did not converge", estimate=0.0)


class _FailingAnalyzer:
    threads = 1
    precision = 17

    def general_kernel(self, coeffs, order=None):
        return _FailingKernel()


class _MixedKernel:
    """Domain error at x = 0.5, slower than the convergence error at x = 1."""

    def p_many_y(self, x, ys, t, order=None):
        if x == 0.5:
            time.sleep(0.2)
            raise DomainError("outside the domain")
        raise ConvergenceError("quadrature did not converge", estimate=0.0)


class _MixedAnalyzer(_FailingAnalyzer):
    threads = 4

    def general_kernel(self, coeffs, order=None):
        return _MixedKernel()


@pytest.fixture
def evaluator(analyzer):
    return BatchEvaluator(analyzer)


@pytest.fixture
def power_grid(evaluator):
    coeffs = Coefficients.power_family(0.5)
    records = evaluator.evaluate_grid(coeffs, [0.5, 1.0], [0.4, 0.8, 1.6], [0.3, 0.9])
    return coeffs, records


def test_records_follow_grid_order(power_grid):
    _, records = power_grid
    assert len(records) == 12
    keys = [(r['x'], r['y'], r['t']) for r in records]
    assert keys == sorted(keys)
    assert keys[:3] == [(0.5, 0.4, 0.3), (0.5, 0.4, 0.9), (0.5, 0.8, 0.3)]


def test_values_match_closed_form(power_grid):
    _, records = power_grid
    for r in records:
        assert r['status'] == 'success'
        assert r['p'] == pytest.approx(p_alpha(0.5, r['x'], r['y'], r['t']), rel=1e-8)


def test_statistics_and_exit_code(evaluator, power_grid):
    stats = evaluator.get_statistics()
    assert stats['total_points'] == 12
    assert stats['failed_points'] == 0
    assert stats['max_trunc_err'] == 0.0
    assert evaluator.exit_code == 0


def test_csv_table(evaluator, power_grid):
    stream = io.StringIO()
    evaluator.write_table(stream, 'csv')
    lines = stream.getvalue().splitlines()
    assert lines[0] == ','.join(TABLE_FIELDS)
    assert len(lines) == 13
    row = next(csv.DictReader(io.StringIO(stream.getvalue())))
    assert float(row['p']) == evaluator.records[0]['p']


def test_json_table(evaluator, power_grid):
    stream = io.StringIO()
    evaluator.write_table(stream, 'json')
    rows = json.loads(stream.getvalue())
    assert len(rows) == 12
    assert set(rows[0]) == set(TABLE_FIELDS)


def test_unknown_format(evaluator, power_grid):
    with pytest.raises(ValueError):
        evaluator.write_table(io.StringIO(), 'xml')


def test_save_table(evaluator, power_grid, tmp_path):
    path = tmp_path / 'table.json'
    evaluator.save_table(str(path), 'json')
    assert len(json.loads(path.read_text(encoding='utf-8'))) == 12


def test_failures_are_recorded():
    evaluator = BatchEvaluator(_FailingAnalyzer())
    records = evaluator.evaluate_grid(Coefficients.heat(), [1.0], np.array([0.5, 1.0]), [0.5])
    assert [r['status'] for r in records] == ['error', 'error']
    assert all(np.isnan(r['p']) for r in records)
    assert evaluator.exit_code == EXIT_CONVERGENCE
    assert evaluator.get_statistics()['failed_points'] == 2


def test_exit_code_follows_grid_order():
    evaluator = BatchEvaluator(_MixedAnalyzer())
    evaluator.evaluate_grid(Coefficients.heat(), [0.5, 1.0, 2.0], [1.0], [0.5])
    assert [type(e) for e in evaluator.failures] == [DomainError, ConvergenceError, ConvergenceError]
    assert evaluator.exit_code == EXIT_DOMAIN
