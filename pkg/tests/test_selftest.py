"""Tests for the self-test runner and its reports."""

import json

import pytest

from src.selftest import (CHECKS, CheckResult, check_name, check_number, format_report,
                          report_json, run_selftest)


def test_registry_is_numbered_in_order():
    assert [check_number(c) for c in CHECKS] == list(range(1, 15))
    assert check_name(CHECKS[3]) == 'ck'
    assert len({check_name(c) for c in CHECKS}) == len(CHECKS)


@pytest.mark.parametrize('name', ['classification', 'mass_loss'])
def test_quick_checks_pass(analyzer, name):
    results = run_selftest(analyzer, quick=True, name_filter=name)
    assert [r.name for r in results] == [name]
    assert results[0].passed, results[0].detail


def test_filter_without_match(analyzer):
    assert run_selftest(analyzer, quick=True, name_filter='no-such-check') == []


def test_raising_check_is_reported_as_failure(analyzer, monkeypatch):
    def check_99_broken(ctx):
        raise RuntimeError('boom')
    monkeypatch.setattr('src.selftest.CHECKS', [check_99_broken])
    results = run_selftest(analyzer, quick=True)
    assert not results[0].passed
    assert results[0].number == 99
    assert 'RuntimeError: boom' in results[0].detail


class TestReports:
    RESULTS = [CheckResult(1, 'representation', True, 1e-13, 1e-10, detail='gap'),
               CheckResult(2, 'symmetry', False, 1e-9, 1e-12, elapsed=0.5)]

    def test_text(self):
        text = format_report(self.RESULTS, precision=3)
        lines = text.splitlines()
        assert lines[0] == '[PASS]  1 representation: measured 1e-13 <= budget 1e-10'
        assert lines[1] == '     gap'
        assert lines[2].startswith('[FAIL]  2 symmetry')
        assert lines[-1] == '1/2 checks passed'
        assert '(0.50 s)' in format_report(self.RESULTS, timings=True)

    def test_json(self):
        payload = json.loads(report_json(self.RESULTS))
        assert payload['passed'] is False
        assert payload['checks'][1]['name'] == 'symmetry'
        assert 'elapsed' not in payload['checks'][1]
        assert json.loads(report_json(self.RESULTS, timings=True))['checks'][1]['elapsed'] == 0.5
