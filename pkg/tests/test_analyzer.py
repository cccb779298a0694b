"""Tests for the config-driven analyzer."""

import math

import pytest
from scipy import special

from src.analyzer import KernelAnalyzer, default_config, merge_config
from src.errors import DomainError


class TestConfig:
    def test_repository_config_loads(self, config_path):
        analyzer = KernelAnalyzer(config_path)
        assert analyzer.config['duhamel']['max_order'] == 8
        assert analyzer.precision == 17
        assert analyzer.quad_options() == {'epsabs': 1e-14, 'epsrel': 1e-12, 'limit': 200,
                                           'tail_sigmas': 12.0}

    def test_overrides_take_precedence(self):
        analyzer = KernelAnalyzer(None, {'output': {'precision': 10}, 'performance': {'num_threads': 2}})
        assert analyzer.precision == 10
        assert analyzer.threads == 2
        assert analyzer.config['output']['format'] == 'csv'

    def test_merge_skips_none(self):
        merged = merge_config(default_config(), {'simulation': {'dt': None, 'seed': 5}})
        assert merged['simulation']['dt'] == 1e-4
        assert merged['simulation']['seed'] == 5

    def test_missing_file_uses_defaults(self, tmp_path):
        analyzer = KernelAnalyzer(str(tmp_path / 'absent.yaml'))
        assert analyzer.config == default_config()

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / 'bad.yaml'
        path.write_text('tolerance: [1, 2\n', encoding='utf-8')
        with pytest.raises(DomainError):
            KernelAnalyzer(str(path))

    def test_non_mapping_yaml(self, tmp_path):
        path = tmp_path / 'list.yaml'
        path.write_text('- 1\n- 2\n', encoding='utf-8')
        with pytest.raises(DomainError):
            KernelAnalyzer(str(path))

    def test_json_config(self, tmp_path):
        path = tmp_path / 'config.json'
        path.write_text('{"boundary": {"x0": 2.0}}', encoding='utf-8')
        assert KernelAnalyzer(str(path)).config['boundary']['x0'] == 2.0


class TestCoefficients:
    def test_expressions(self, analyzer):
        coeffs = analyzer.coefficients(a='x^0.5')
        assert coeffs.params == {'a': 'x^0.5', 'b': '0'}

    def test_families(self, analyzer):
        assert analyzer.coefficients(family='power', alpha=1.0).params['alpha'] == 1.0
        assert analyzer.coefficients(family='heat').label == 'heat'
        assert analyzer.coefficients(family='example4').label == 'linear_half_drift'
        drift = analyzer.coefficients(family='power_drift', alpha=1.0, beta=2.0, phi='exp(-x)')
        assert drift.params['phi'] == 'exp(-x)'

    @pytest.mark.parametrize('kwargs', [{}, {'family': 'power'}, {'family': 'power+drift', 'alpha': 1.0},
                                        {'family': 'ornstein'}])
    def test_incomplete_requests(self, analyzer, kwargs):
        with pytest.raises(DomainError):
            analyzer.coefficients(**kwargs)


class TestOperations:
    def test_kernels_are_cached(self, analyzer):
        coeffs = analyzer.coefficients(family='power', alpha=1.0)
        first = analyzer.general_kernel(coeffs)
        assert analyzer.general_kernel(analyzer.coefficients(family='power', alpha=1.0)) is first
        assert first.quad_options['tail_sigmas'] == 12.0
        assert analyzer.summary()['cached_kernels'] >= 1

    def test_evaluate(self, analyzer):
        out = analyzer.evaluate(analyzer.coefficients(family='power', alpha=1.0), 1.0, 1.0, 1.0)
        assert out['value'] == pytest.approx(math.exp(-2.0) * special.iv(1, 2.0), rel=1e-10)
        assert out['order'] == 0
        assert out['truncation_bound'] == 0.0

    def test_evaluate_approximation(self, analyzer):
        out = analyzer.evaluate(analyzer.coefficients(family='heat'), 1.0, 1.2, 0.5, approx=True)
        assert out['truncation_bound'] == 0.0
        assert out['value'] > 0

    def test_solve_unit_data(self, analyzer):
        coeffs = analyzer.coefficients(family='power', alpha=1.0)
        assert analyzer.solve(coeffs, '1', 0.5, 1.0) == pytest.approx(1.0 - math.exp(-0.5), abs=1e-8)

    def test_classify_uses_configured_anchor(self, analyzer):
        report = analyzer.classify(analyzer.coefficients(family='power', alpha=1.5))
        assert report.boundary_type == 'exit'
        assert report.x0 == 1.0

    def test_mass_loss(self, analyzer):
        out = analyzer.mass_loss(1.0, 1.0, 1.0)
        assert out['T'] == 1.0
        assert out['mass_loss'] == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert out['log_ratio'] == pytest.approx(1.0, rel=1e-12)
        assert out['log_ratio_within_budget'] is True

    def test_sim_config_overrides(self, analyzer):
        cfg = analyzer.sim_config(n_paths=10, dt=None)
        assert cfg.n_paths == 10
        assert cfg.dt == 1e-4

    def test_simulate_needs_a_process(self, analyzer):
        with pytest.raises(DomainError):
            analyzer.simulate(1.0, 1.0, n_paths=10)
