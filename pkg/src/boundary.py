"""
Boundary Classification
Feller classification of the boundary 0 from the scale and speed measures

    s(x) = exp(-∫_{x0}^x b/a),  S(x) = ∫_{x0}^x s,  M(x) = ∫_{x0}^x 1/(2 a s)

and the limits S₀, M₀, Σ = ∫ (M(x0) - M(u)) dS(u), N = ∫ (S(x0) - S(u)) dM(u).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import integrate

from src.errors import DomainError
from src.transform import Coefficients
from src.utils import classify_partial_sums


logger = logging.getLogger(__name__)

OCTAVES = 60
PER_OCTAVE = 64

BOUNDARY_TYPES = {
    (True, True): 'regular',
    (True, False): 'exit',
    (False, True): 'entrance',
    (False, False): 'natural',
}

NOTES = {
    'regular': 'attainable and leavable; absorption imposed by the Dirichlet condition',
    'exit': 'attainable, not leavable; the Dirichlet condition is automatic',
    'entrance': 'classification only, kernel construction unsupported',
    'natural': 'unattainable; outside the kernel construction',
    'indeterminate': 'partial sums neither stabilised nor clearly diverged',
}


@dataclass
class MeasureVerdict:
    """Finiteness verdict for one of S₀, M₀, Σ, N."""
    verdict: str            # 'finite', 'infinite' or 'indeterminate'
    value: float            # partial sum (inf when infinite)
    ratio: float            # tail ratio of the octave increments

    @property
    def finite(self) -> Optional[bool]:
        if self.verdict == 'indeterminate':
            return None
        return self.verdict == 'finite'


@dataclass
class ClassificationReport:
    """
    Boundary classification of 0.

    Attributes:
        S0, M0, Sigma, N: Finiteness verdicts
        boundary_type: 'regular', 'exit', 'entrance', 'natural' or 'indeterminate'
        x0: Anchor point
        note: Human-readable remark on the boundary type
    """
    S0: MeasureVerdict
    M0: MeasureVerdict
    Sigma: MeasureVerdict
    N: MeasureVerdict
    boundary_type: str
    x0: float
    note: str = ''
    coefficients: Dict = field(default_factory=dict)

    @property
    def indeterminate(self) -> bool:
        return self.boundary_type == 'indeterminate'

    def to_dict(self) -> Dict:
        out = {
            'boundary_type': self.boundary_type,
            'x0': self.x0,
            'indeterminate': self.indeterminate,
            'note': self.note,
        }
        for name in ('S0', 'M0', 'Sigma', 'N'):
            verdict = getattr(self, name)
            out[name] = dict(asdict(verdict), finite=verdict.finite)
        if self.coefficients:
            out['coefficients'] = self.coefficients
        return out


def _measure_densities(coeffs: Coefficients, x0: float, octaves: int, per_octave: int):
    """
    Integrands of S₀, M₀, Σ, N on the geometric grid u_i = x0 2^{-i/per_octave}.

    All integrals are taken in v = ln u, so each density already carries
    the factor u.
    """
    n = octaves * per_octave
    i = np.arange(n + 1, dtype=float)
    u = x0 * 2.0 ** (-i / per_octave)
    v = np.log(u)

    a = np.asarray(coeffs.a_at(u), dtype=float)
    if not np.all(np.isfinite(a) & (a > 0)):
        raise DomainError(f"a(x) must be positive on (0, {x0}]")
    b = np.asarray(coeffs.b_at(u), dtype=float)

    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        # v decreases along the grid, so cumulative integrals come out negated
        log_s = -integrate.cumulative_trapezoid(b / a * u, v, initial=0.0)
        s = np.exp(log_s)
        m = 1.0 / (2.0 * a * s)
        S_tail = -integrate.cumulative_trapezoid(s * u, v, initial=0.0)
        M_tail = -integrate.cumulative_trapezoid(m * u, v, initial=0.0)
        densities = {
            'S0': s * u,
            'M0': m * u,
            'Sigma': M_tail * s * u,
            'N': S_tail * m * u,
        }
    return v, densities


def _octave_increments(density: np.ndarray, v: np.ndarray, octaves: int,
                       per_octave: int) -> np.ndarray:
    increments = np.empty(octaves)
    with np.errstate(over='ignore', invalid='ignore'):
        for j in range(octaves):
            sl = slice(j * per_octave, (j + 1) * per_octave + 1)
            # v decreasing: negate
            increments[j] = -integrate.simpson(density[sl], x=v[sl])
    return increments


def classify(coeffs: Coefficients, x0: float = 1.0,
             octaves: int = OCTAVES, per_octave: int = PER_OCTAVE,
             decay_ratio: float = 0.999, soft_ratio: float = 0.98,
             divergence_threshold: float = 1e8) -> ClassificationReport:
    """
    Classify the boundary 0 for ∂t u = a ∂²u + b ∂u.

    Each limit is integrated toward 0 octave by octave; the octave
    increments are judged by classify_partial_sums.

    Args:
        coeffs: Coefficient pair, a > 0 on (0, x0]
        x0: Anchor point
        octaves: Number of octaves below x0
        per_octave: Grid points per octave
        decay_ratio, soft_ratio, divergence_threshold: Divergence rule

    Returns:
        ClassificationReport
    """
    if not (x0 > 0 and np.isfinite(x0)):
        raise DomainError(f"x0 must be positive, got {x0}")

    v, densities = _measure_densities(coeffs, x0, octaves, per_octave)
    verdicts = {}
    for name, density in densities.items():
        increments = _octave_increments(density, v, octaves, per_octave)
        result = classify_partial_sums(increments, decay_ratio=decay_ratio,
                                       soft_ratio=soft_ratio, threshold=divergence_threshold)
        verdicts[name] = MeasureVerdict(result['verdict'], result['value'], result['ratio'])

    sigma_finite, n_finite = verdicts['Sigma'].finite, verdicts['N'].finite
    if sigma_finite is None or n_finite is None:
        boundary_type = 'indeterminate'
        logger.warning(f"Boundary classification indeterminate for {coeffs.label} at x0={x0}")
    else:
        boundary_type = BOUNDARY_TYPES[(sigma_finite, n_finite)]

    logger.info(f"Boundary 0 for {coeffs.label}: {boundary_type}")
    return ClassificationReport(
        S0=verdicts['S0'], M0=verdicts['M0'], Sigma=verdicts['Sigma'], N=verdicts['N'],
        boundary_type=boundary_type, x0=float(x0), note=NOTES[boundary_type],
        coefficients={'label': coeffs.label, **coeffs.params},
    )
