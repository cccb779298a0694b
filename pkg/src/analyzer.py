"""
Kernel Analyzer
Config-driven front end over the kernel library: builds coefficient pairs,
caches transform bundles and kernels, and runs evaluations, classifications,
simulations and mass-loss computations.
"""

import copy
import logging
import threading
from dataclasses import replace
from typing import Dict, Optional

import yaml

from src.boundary import ClassificationReport, classify
from src.closed_forms import (mass_loss, mass_loss_T, mass_loss_asymptotic,
                              mass_loss_log_ratio, mass_loss_ratio_budget)
from src.duhamel import DuhamelGrid, KernelValue, PotentialKernel
from src.errors import DomainError
from src.expr import compile_expr, parse
from src.general_kernel import GeneralKernel
from src.sde_oracle import SimConfig, SimResult, simulate_general, simulate_model
from src.specfun import EvalTolerance
from src.transform import Coefficients, TransformBundle


FAMILIES = ('power', 'power+drift', 'heat', 'example4')


def default_config() -> Dict:
    """Built-in configuration; mirrors config/config.yaml."""
    return {
        'tolerance': {'rel_tol': 1e-12, 'abs_tol': 1e-300, 'max_terms': 500},
        'quadrature': {'epsabs': 1e-14, 'epsrel': 1e-12, 'limit': 200, 'tail_sigmas': 12.0},
        'transform': {
            'grid_lo': 1e-8, 'grid_hi': 1e4, 'grid_nodes': 512,
            'richardson_x0': 1e-2, 'richardson_depth': 6, 'richardson_tol': 1e-8,
            'v_sup_safety': 1.25,
        },
        'boundary': {
            'x0': 1.0, 'octaves': 60, 'per_octave': 64,
            'decay_ratio': 0.999, 'soft_ratio': 0.98, 'divergence_threshold': 1e8,
        },
        'duhamel': {
            'max_order': 8, 'target_tail': 1e-6, 'r_nodes': 40, 'tau_nodes': 12,
            'tau_gauss': 8, 'xi_nodes': 48, 'window_sigmas': 9.0,
        },
        'simulation': {
            'dt': 1e-4, 'n_paths': 100000, 'seed': 0, 'absorb_below': 0.0,
            'bridge_correction': True, 'block_size': 4096, 'n_bins': 40, 'scheme': 'lamperti',
        },
        'output': {'format': 'csv', 'precision': 17},
        'performance': {'num_threads': None},
        'logging': {'level': 'INFO', 'file': None, 'console': True},
    }


def merge_config(base: Dict, override: Optional[Dict]) -> Dict:
    """Recursively merge override into a copy of base; None values in override are skipped."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


class KernelAnalyzer:
    """
    Entry point used by the CLI, the batch evaluator and the self-test.
    """

    def __init__(self, config_path: Optional[str] = 'config/config.yaml',
                 overrides: Optional[Dict] = None):
        """
        Initialize the analyzer with configuration.

        Args:
            config_path: Path to a YAML (or JSON) configuration file; None uses defaults
            overrides: Nested values that take precedence over the file
        """
        self.logger = logging.getLogger(__name__)
        self.config = merge_config(merge_config(self._default_config(), self._load_config(config_path)),
                                   overrides)
        tol = self.config['tolerance']
        self.tolerance = EvalTolerance(tol['rel_tol'], tol['abs_tol'], int(tol['max_terms']))
        self._kernels: Dict[str, GeneralKernel] = {}
        self._lock = threading.Lock()

    def _load_config(self, config_path: Optional[str]) -> Dict:
        """Load configuration from a YAML file (JSON is valid YAML)."""
        if config_path is None:
            return {}
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f)
        except FileNotFoundError:
            self.logger.warning(f"Config file not found: {config_path}. Using defaults.")
            return {}
        except yaml.YAMLError as e:
            raise DomainError(f"cannot parse config file {config_path}: {e}")
        if loaded is None:
            return {}
        if not isinstance(loaded, dict):
            raise DomainError(f"config file {config_path} must contain a mapping")
        return loaded

    def _default_config(self) -> Dict:
        """Return default configuration."""
        return default_config()

    # -- construction -------------------------------------------------------

    @property
    def threads(self) -> Optional[int]:
        return self.config['performance'].get('num_threads')

    @property
    def precision(self) -> int:
        return int(self.config['output'].get('precision', 17))

    def bundle_options(self) -> Dict:
        t = self.config['transform']
        return {
            'grid_lo': float(t['grid_lo']), 'grid_hi': float(t['grid_hi']),
            'grid_nodes': int(t['grid_nodes']), 'richardson_x0': float(t['richardson_x0']),
            'richardson_depth': int(t['richardson_depth']),
            'richardson_tol': float(t['richardson_tol']), 'v_sup_safety': float(t['v_sup_safety']),
        }

    def quad_options(self) -> Dict:
        q = self.config['quadrature']
        return {'epsabs': float(q['epsabs']), 'epsrel': float(q['epsrel']),
                'limit': int(q['limit']), 'tail_sigmas': float(q['tail_sigmas'])}

    def duhamel_grid(self) -> DuhamelGrid:
        d = self.config['duhamel']
        return DuhamelGrid(r_nodes=int(d['r_nodes']), tau_nodes=int(d['tau_nodes']),
                           tau_gauss=int(d['tau_gauss']), xi_nodes=int(d['xi_nodes']),
                           window_sigmas=float(d['window_sigmas']))

    def coefficients(self, a: Optional[str] = None, b: Optional[str] = None,
                     family: Optional[str] = None, alpha: Optional[float] = None,
                     beta: Optional[float] = None, phi: Optional[str] = None) -> Coefficients:
        """
        Coefficient pair from expressions or a preset family.

        Args:
            a, b: Expression text in x (b defaults to "0")
            family: 'power', 'power+drift', 'heat' or 'example4'
            alpha, beta: Family exponents
            phi: Expression for φ in the power+drift family

        Returns:
            Coefficients
        """
        if family is None:
            if a is None:
                raise DomainError("give --a/--b expressions or a --family preset")
            return Coefficients.from_expressions(a, b if b is not None else '0')
        family = family.replace('_', '+')
        if family == 'power':
            if alpha is None:
                raise DomainError("family 'power' needs alpha")
            return Coefficients.power_family(float(alpha))
        if family == 'power+drift':
            if alpha is None or beta is None or phi is None:
                raise DomainError("family 'power+drift' needs alpha, beta and phi")
            coeffs = Coefficients.power_drift_family(float(alpha), float(beta), compile_expr(parse(phi)))
            return replace(coeffs, params={**coeffs.params, 'phi': phi})
        if family == 'heat':
            return Coefficients.heat()
        if family == 'example4':
            return Coefficients.linear_half_drift()
        raise DomainError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")

    @staticmethod
    def _key(coeffs: Coefficients, order: Optional[int]) -> str:
        return f"{coeffs.label}|{sorted(coeffs.params.items())}|{order}"

    def general_kernel(self, coeffs: Coefficients, order: Optional[int] = None) -> GeneralKernel:
        """Build (or reuse) the kernel of a coefficient pair."""
        key = self._key(coeffs, order)
        with self._lock:
            cached = self._kernels.get(key)
        if cached is not None:
            return cached
        bundle = TransformBundle(coeffs, **self.bundle_options())
        d = self.config['duhamel']
        pk = PotentialKernel.from_bundle(bundle, order=order, grid=self.duhamel_grid(),
                                         target_tail=float(d['target_tail']),
                                         max_order=int(d['max_order']))
        gk = GeneralKernel(bundle, pk, quad_options=self.quad_options(), tol=self.tolerance)
        with self._lock:
            self._kernels[key] = gk
        return gk

    # -- operations ---------------------------------------------------------

    def evaluate(self, coeffs: Coefficients, x: float, y: float, t: float,
                 order: Optional[int] = None, approx: bool = False) -> Dict:
        """
        Evaluate p(x, y, t) (or p_approx) with absolute error bars.

        Returns:
            Dictionary with value, quadrature_estimate, truncation_bound and order
        """
        gk = self.general_kernel(coeffs)
        if approx:
            value = gk.p_approx(x, y, t)
            return {'value': value, 'quadrature_estimate': 0.0,
                    'truncation_bound': gk.ratio_bound(t) * abs(value), 'order': 0}
        kv: KernelValue = gk.p(x, y, t, order)
        return {'value': kv.value, 'quadrature_estimate': kv.quadrature_estimate,
                'truncation_bound': kv.truncation_error, 'order': kv.order}

    def solve(self, coeffs: Coefficients, f: str, x: float, t: float) -> float:
        """u_f(x, t) = ∫ p(x, y, t) f(y) dy for initial data given as an expression in x."""
        fn = compile_expr(parse(f))
        return self.general_kernel(coeffs).u_f(lambda y: float(fn(y)), x, t)

    def classify(self, coeffs: Coefficients, x0: Optional[float] = None) -> ClassificationReport:
        c = self.config['boundary']
        return classify(coeffs, x0=float(x0 if x0 is not None else c['x0']),
                        octaves=int(c['octaves']), per_octave=int(c['per_octave']),
                        decay_ratio=float(c['decay_ratio']), soft_ratio=float(c['soft_ratio']),
                        divergence_threshold=float(c['divergence_threshold']))

    def sim_config(self, **overrides) -> SimConfig:
        """SimConfig from the simulation section, with non-None overrides applied."""
        s = dict(self.config['simulation'])
        s.update({k: v for k, v in overrides.items() if v is not None})
        s.setdefault('threads', self.threads)
        return SimConfig(**s)

    def simulate(self, x0: float, t: float, coeffs: Optional[Coefficients] = None,
                 nu: Optional[float] = None, **overrides) -> SimResult:
        """
        Monte Carlo run of the general process (coeffs) or of the model process (nu).
        """
        cfg = self.sim_config(**overrides)
        if coeffs is None:
            if nu is None:
                raise DomainError("simulate needs coefficients or a model nu")
            return simulate_model(float(nu), x0, t, cfg)
        bundle = TransformBundle(coeffs, **self.bundle_options())
        return simulate_general(bundle, x0, t, cfg)

    def mass_loss(self, alpha: float, x: float, t: float) -> Dict:
        """Exact and asymptotic mass loss of the x^α family with their ratio."""
        exact = mass_loss(alpha, x, t)
        asymptotic = mass_loss_asymptotic(alpha, x, t)
        log_ratio = mass_loss_log_ratio(alpha, x, t)
        return {
            'alpha': float(alpha), 'x': float(x), 't': float(t),
            'T': mass_loss_T(alpha, x, t),
            'mass_loss': exact,
            'asymptotic': asymptotic,
            'ratio': exact / asymptotic if asymptotic > 0 else None,
            'log_ratio': log_ratio,
            'log_ratio_budget': mass_loss_ratio_budget(alpha),
            'log_ratio_within_budget': bool(abs(log_ratio - 1.0) <= mass_loss_ratio_budget(alpha)),
        }

    def summary(self) -> Dict:
        """Configuration digest for reports."""
        return {
            'tolerance': dict(self.config['tolerance']),
            'transform': self.bundle_options(),
            'duhamel': dict(self.config['duhamel']),
            'cached_kernels': len(self._kernels),
            'threads': self.threads,
        }
