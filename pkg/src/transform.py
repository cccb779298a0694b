"""
Coefficient Transform
Builds the TransformBundle (φ, ψ, ν, d, d̃, θ, V) for a coefficient pair
(a, b) and validates the structural conditions on it numerically.

Conventions:
    A(x)  = ∫_0^x a(s)^{-1/2} ds,  φ = A²/4,  φ' = ½ A a^{-1/2}
    G(x)  = (2b - a')/(4√a),       ν = ½ + lim_{x→0} G(x) A(x)
    d(x)  = G(x) A(x) + ½ - ν,     d̃ = d∘ψ
    log θ(φ(x)) = -∫_0^x d(s) / (A(s) √a(s)) ds
    V(φ(x)) = -d²/(4φ) - d'/(2φ') + (1-ν) d/(2φ)
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicSpline

from src.errors import ConditionError, ConvergenceError, DomainError
from src.expr import compile_expr, parse, to_text
from src.utils import classify_partial_sums, gauss_legendre, log_grid


logger = logging.getLogger(__name__)

GRID_LO = 1e-8
GRID_HI = 1e4
GRID_NODES = 512
GL_NODES = 16

RICHARDSON_X0 = 1e-2
RICHARDSON_DEPTH = 6
RICHARDSON_TOL = 1e-8
V_SUP_SAFETY = 1.25

# Relative step for numerical derivatives of a and b
DERIV_STEP = 1e-4
# Smallest z used when estimating sup |V^{(j)}|
CK_Z_MIN = 1e-6
# Largest vanishing order used for the endpoint substitution s = u^p
MAX_VANISHING_ORDER = 1.98
# d below this (relative to the size of G A) everywhere means no extra drift
DRIFT_NOISE = 1e-9
ZERO_LIMIT = 1e-9
NU_MARGIN = 1e-8
CONSTANT_SEQUENCE = 1e-10


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _zero(x):
    return np.zeros_like(_as_array(x))


def _numeric_derivative(f: Callable, x, order: int = 1):
    x = _as_array(x)
    h = DERIV_STEP * np.maximum(x, 1e-300)
    if order == 1:
        return (_as_array(f(x + h)) - _as_array(f(x - h))) / (2.0 * h)
    return (_as_array(f(x + h)) - 2.0 * _as_array(f(x)) + _as_array(f(x - h))) / (h * h)


@dataclass(frozen=True, eq=False)
class Coefficients:
    """
    Coefficients a(x), b(x) of ∂t u = a ∂²x u + b ∂x u on (0, ∞).

    Callables must accept numpy arrays. Missing derivatives fall back to
    central differences with relative step 1e-4.
    """
    a: Callable
    b: Callable
    a_prime: Optional[Callable] = None
    b_prime: Optional[Callable] = None
    a_second: Optional[Callable] = None
    label: str = 'custom'
    params: Dict = field(default_factory=dict)

    @property
    def has_analytic_derivatives(self) -> bool:
        return None not in (self.a_prime, self.b_prime, self.a_second)

    def a_at(self, x):
        return _as_array(self.a(x))

    def b_at(self, x):
        return _as_array(self.b(x))

    def da(self, x):
        if self.a_prime is not None:
            return _as_array(self.a_prime(x))
        return _numeric_derivative(self.a, x)

    def db(self, x):
        if self.b_prime is not None:
            return _as_array(self.b_prime(x))
        return _numeric_derivative(self.b, x)

    def d2a(self, x):
        if self.a_second is not None:
            return _as_array(self.a_second(x))
        return _numeric_derivative(self.a, x, order=2)

    @classmethod
    def from_expressions(cls, a_src: str, b_src: str) -> 'Coefficients':
        """Coefficients from expression text in x."""
        a_expr, b_expr = parse(a_src), parse(b_src)
        return cls(a=compile_expr(a_expr), b=compile_expr(b_expr),
                   label=f"a={to_text(a_expr)}, b={to_text(b_expr)}",
                   params={'a': a_src, 'b': b_src})

    @classmethod
    def power_family(cls, alpha: float) -> 'Coefficients':
        """a = x^α, b ≡ 0 with analytic derivatives (α = 2 only classifies)."""
        if not 0 <= alpha <= 2:
            raise DomainError(f"power family needs 0 <= alpha <= 2, got {alpha}")
        return cls(
            a=lambda x: np.power(_as_array(x), alpha),
            b=_zero,
            a_prime=lambda x: alpha * np.power(_as_array(x), alpha - 1.0),
            b_prime=_zero,
            a_second=lambda x: alpha * (alpha - 1.0) * np.power(_as_array(x), alpha - 2.0),
            label=f"power(alpha={alpha!r})",
            params={'family': 'power', 'alpha': alpha},
        )

    @classmethod
    def power_drift_family(cls, alpha: float, beta: float,
                           phi_fn: Callable, phi_prime: Optional[Callable] = None) -> 'Coefficients':
        """a = x^α, b = x^β φ(x); analytic b' when φ' is supplied."""
        if not 0 < alpha < 2:
            raise DomainError(f"drift family needs 0 < alpha < 2, got {alpha}")
        if not beta >= 1:
            raise DomainError(f"drift family needs beta >= 1, got {beta}")

        def b(x):
            x = _as_array(x)
            return np.power(x, beta) * _as_array(phi_fn(x))

        b_prime = None
        if phi_prime is not None:
            def b_prime(x):
                x = _as_array(x)
                return (beta * np.power(x, beta - 1.0) * _as_array(phi_fn(x))
                        + np.power(x, beta) * _as_array(phi_prime(x)))

        return cls(
            a=lambda x: np.power(_as_array(x), alpha),
            b=b,
            a_prime=lambda x: alpha * np.power(_as_array(x), alpha - 1.0),
            b_prime=b_prime,
            a_second=lambda x: alpha * (alpha - 1.0) * np.power(_as_array(x), alpha - 2.0),
            label=f"power_drift(alpha={alpha!r}, beta={beta!r})",
            params={'family': 'power+drift', 'alpha': alpha, 'beta': beta},
        )

    @classmethod
    def heat(cls) -> 'Coefficients':
        """a ≡ 1, b ≡ 0: the heat equation on the half line."""
        return cls(a=lambda x: np.ones_like(_as_array(x)), b=_zero,
                   a_prime=_zero, b_prime=_zero, a_second=_zero,
                   label='heat', params={'family': 'heat'})

    @classmethod
    def linear_half_drift(cls) -> 'Coefficients':
        """a = x, b ≡ ½."""
        return cls(a=lambda x: _as_array(x).copy(), b=lambda x: np.full_like(_as_array(x), 0.5),
                   a_prime=lambda x: np.ones_like(_as_array(x)), b_prime=_zero, a_second=_zero,
                   label='linear_half_drift', params={'family': 'linear_half_drift'})


def octave_increments(f: Callable, x0: float, octaves: int, downward: bool) -> np.ndarray:
    """∫ f over successive octaves [x/2, x] moving toward 0 (or [x, 2x] toward ∞)."""
    j = np.arange(octaves, dtype=float)
    if downward:
        hi = x0 * 2.0 ** (-j)
        lo = hi / 2.0
    else:
        lo = x0 * 2.0 ** j
        hi = lo * 2.0
    nodes, weights = gauss_legendre(GL_NODES)
    # integrate in log x, where octaves have unit width
    v_lo, v_hi = np.log(lo), np.log(hi)
    half = 0.5 * (v_hi - v_lo)
    v = v_lo[:, None] + half[:, None] * (nodes + 1.0)
    s = np.exp(v)
    with np.errstate(all='ignore'):
        vals = _as_array(f(s.ravel())).reshape(s.shape) * s
    return (vals * weights).sum(axis=1) * half


def _inverse_sqrt(coeffs: Coefficients) -> Callable:
    def f(s):
        with np.errstate(all='ignore'):
            return 1.0 / np.sqrt(coeffs.a_at(s))
    return f


def check_integrability_at_zero(coeffs: Coefficients, x0: float = 1.0,
                                octaves: int = 60) -> Dict:
    """Partial-sum verdict on ∫_0 a^{-1/2}."""
    return classify_partial_sums(octave_increments(_inverse_sqrt(coeffs), x0, octaves, True))


def check_divergence_at_infinity(coeffs: Coefficients, x0: float = 1.0,
                                 octaves: int = 60) -> Dict:
    """Partial-sum verdict on ∫^∞ a^{-1/2} (must be infinite)."""
    return classify_partial_sums(octave_increments(_inverse_sqrt(coeffs), x0, octaves, False))


def vanishing_order(coeffs: Coefficients) -> float:
    """Log-log slope of a near 0 (exact for power laws)."""
    x1, x2 = 1e-10, 1e-8
    a1, a2 = float(coeffs.a_at(x1)), float(coeffs.a_at(x2))
    if not (a1 > 0 and a2 > 0 and np.isfinite(a1) and np.isfinite(a2)):
        return MAX_VANISHING_ORDER
    return float((np.log(a2) - np.log(a1)) / (np.log(x2) - np.log(x1)))


class PhiMap:
    """
    Cached A(x) = ∫_0^x a^{-1/2} on a log grid, giving φ, φ', φ'' and ψ.

    Segment integrals use Gauss-Legendre after the substitution s = u^p,
    p = 2/(2-γ), γ the vanishing order of a at 0; this removes the
    endpoint singularity of power-law coefficients.
    """

    def __init__(self, coeffs: Coefficients, grid_lo: float = GRID_LO,
                 grid_hi: float = GRID_HI, grid_nodes: int = GRID_NODES):
        self.logger = logging.getLogger(__name__)
        self.coeffs = coeffs
        self.x_nodes = log_grid(grid_lo, grid_hi, grid_nodes)

        a_nodes = coeffs.a_at(self.x_nodes)
        if not np.all(np.isfinite(a_nodes) & (a_nodes > 0)):
            raise DomainError("a(x) must be positive and finite on (0, inf)")

        self._check_condition1()
        gamma = vanishing_order(coeffs)
        self.gamma = float(np.clip(gamma, 0.0, MAX_VANISHING_ORDER))
        self.p = 2.0 / (2.0 - self.gamma)
        self._inv_sqrt_a = _inverse_sqrt(coeffs)

        lows = np.concatenate(([0.0], self.x_nodes[:-1]))
        self.A_nodes = np.cumsum(self.segment_integral(self._inv_sqrt_a, lows, self.x_nodes))
        if not np.all(np.isfinite(self.A_nodes)):
            raise ConditionError(1, "integral of a^{-1/2} is not finite on the grid")
        self.logger.debug(f"PhiMap built: gamma={self.gamma:.4g}, p={self.p:.4g}, "
                          f"A(top)={self.A_nodes[-1]:.6g}")

    def _check_condition1(self):
        zero = check_integrability_at_zero(self.coeffs)
        if zero['verdict'] == 'infinite':
            raise ConditionError(1, "integral of a^{-1/2} diverges at 0 (a vanishes too fast)")
        if zero['verdict'] == 'indeterminate' and vanishing_order(self.coeffs) >= 2.0:
            raise ConditionError(1, "integral of a^{-1/2} does not converge at 0")
        infinity = check_divergence_at_infinity(self.coeffs)
        if infinity['verdict'] == 'finite':
            raise ConditionError(1, "integral of a^{-1/2} converges at infinity (a grows too fast)")

    def segment_integral(self, f: Callable, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """∫_lo^hi f(s) ds per segment, Gauss-Legendre in u = s^{1/p}."""
        lo, hi = _as_array(lo), _as_array(hi)
        nodes, weights = gauss_legendre(GL_NODES)
        u_lo, u_hi = lo ** (1.0 / self.p), hi ** (1.0 / self.p)
        half = 0.5 * (u_hi - u_lo)
        u = u_lo[..., None] + half[..., None] * (nodes + 1.0)
        s = u ** self.p
        vals = _as_array(f(s.ravel())).reshape(s.shape) * self.p * u ** (self.p - 1.0)
        return (vals * weights).sum(axis=-1) * half

    def _locate(self, x: np.ndarray):
        idx = np.searchsorted(self.x_nodes, x, side='right') - 1
        safe = np.clip(idx, 0, None)
        base = np.where(idx >= 0, self.A_nodes[safe], 0.0)
        lo = np.where(idx >= 0, self.x_nodes[safe], 0.0)
        return idx, base, lo

    def A(self, x):
        """A(x) = ∫_0^x a(s)^{-1/2} ds."""
        xa = np.atleast_1d(_as_array(x))
        if np.any(xa <= 0):
            raise DomainError("A(x) needs x > 0")
        out = np.empty_like(xa)
        inside = xa <= self.x_nodes[-1]
        if inside.any():
            _, base, lo = self._locate(xa[inside])
            out[inside] = base + self.segment_integral(self._inv_sqrt_a, lo, xa[inside])
        for i in np.flatnonzero(~inside):
            out[i] = self.A_nodes[-1] + self._beyond(xa[i])
        return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))

    def _beyond(self, x: float) -> float:
        top = self.x_nodes[-1]
        n_panels = max(1, int(np.ceil(np.log(x / top) / np.log(1.05))))
        edges = top * (x / top) ** (np.arange(n_panels + 1) / n_panels)
        return float(np.sum(self.segment_integral(self._inv_sqrt_a, edges[:-1], edges[1:])))

    def phi(self, x):
        """φ(x) = A(x)²/4."""
        A = self.A(x)
        return 0.25 * A * A

    def phi_prime(self, x):
        """φ'(x) = ½ A(x) a(x)^{-1/2}, computed from the definition."""
        return 0.5 * self.A(x) / np.sqrt(self.coeffs.a_at(x))

    def phi_second(self, x):
        """φ''(x) = 1/(2a) - A a'/(4 a^{3/2})."""
        a = self.coeffs.a_at(x)
        return 0.5 / a - self.A(x) * self.coeffs.da(x) / (4.0 * a ** 1.5)

    def psi(self, z: float) -> float:
        """
        Inverse of φ by bracketed root-finding on A(x) = 2√z, then a Newton polish.
        """
        z = float(z)
        if not (z > 0 and np.isfinite(z)):
            raise DomainError(f"psi needs z > 0, got {z}")
        target = 2.0 * np.sqrt(z)
        i = int(np.searchsorted(self.A_nodes, target))
        if i == 0:
            hi = self.x_nodes[0]
            lo = hi / 2.0
            for _ in range(2000):
                if self.A(lo) <= target:
                    break
                hi, lo = lo, lo / 2.0
            else:
                raise DomainError(f"psi({z}) below the reachable range")
        elif i >= len(self.A_nodes):
            lo = self.x_nodes[-1]
            hi = 2.0 * lo
            for _ in range(400):
                if self.A(hi) >= target:
                    break
                lo, hi = hi, 2.0 * hi
            else:
                raise DomainError(f"psi({z}) beyond the reachable range")
        else:
            lo, hi = self.x_nodes[i - 1], self.x_nodes[i]

        f = lambda s: self.A(s) - target
        if f(lo) == 0.0:
            return float(lo)
        if f(hi) == 0.0:
            return float(hi)
        try:
            x = optimize.brentq(f, lo, hi, xtol=lo * 1e-15 + 1e-300, rtol=4 * np.finfo(float).eps,
                                maxiter=200)
        except (ValueError, RuntimeError) as e:
            raise ConvergenceError(f"psi({z}) root-finding failed: {e}")
        for _ in range(2):
            step = f(x) * np.sqrt(float(self.coeffs.a_at(x)))
            if not np.isfinite(step) or not lo <= x - step <= hi:
                break
            x -= step
        return float(x)


def build_phi(coeffs: Coefficients, x):
    """φ(x) = ¼(∫_0^x a^{-1/2} ds)²."""
    return _phi_map(coeffs).phi(x)


@lru_cache(maxsize=16)
def _phi_map(coeffs: Coefficients) -> PhiMap:
    return PhiMap(coeffs)


def _richardson_limit(values: np.ndarray, tol: float):
    """
    Limit of a sequence sampled at geometrically halving x.

    Aitken's Δ² with an estimated convergence exponent; returns
    (limit, converged, extrapolants).
    """
    scale = max(1.0, float(np.max(np.abs(values))))
    diffs = np.diff(values)
    # numerically constant (derivative noise of expression coefficients)
    if np.all(np.abs(diffs) <= CONSTANT_SEQUENCE * scale):
        return float(np.mean(values)), True, [float(np.mean(values))]
    extrapolants = []
    for j in range(len(values) - 2):
        d1 = values[j + 1] - values[j]
        d2 = values[j + 2] - values[j + 1]
        if abs(d2) <= 1e-15 * scale:
            extrapolants.append(float(values[j + 2]))
            continue
        r = d1 / d2
        if not np.isfinite(r) or r <= 1.0 + 1e-12:
            extrapolants.append(float('nan'))
            continue
        extrapolants.append(float(values[j + 2] + d2 / (r - 1.0)))
    last = extrapolants[-2:]
    converged = len(last) == 2 and all(np.isfinite(last)) and abs(last[1] - last[0]) < tol
    return extrapolants[-1], converged, extrapolants


def drift_ratio(coeffs: Coefficients, phi_map: PhiMap, x):
    """g(x) = (2b - a')/(4√a) · A(x)."""
    x = _as_array(x)
    a = coeffs.a_at(x)
    return (2.0 * coeffs.b_at(x) - coeffs.da(x)) / (4.0 * np.sqrt(a)) * phi_map.A(x)


def compute_nu(coeffs: Coefficients, phi_map: Optional[PhiMap] = None,
               x0: float = RICHARDSON_X0, depth: int = RICHARDSON_DEPTH,
               tol: float = RICHARDSON_TOL) -> float:
    """
    ν = ½ + lim_{x→0} (2b - a')/(4√a) ∫_0^x a^{-1/2}.

    The limit is extrapolated from x_j = x0 2^{-j}, j = 0..depth.

    Raises:
        ConditionError: when the limit does not stabilise or ν >= 1
    """
    if phi_map is None:
        phi_map = _phi_map(coeffs)
    xs = x0 * 2.0 ** (-np.arange(depth + 1, dtype=float))
    g = drift_ratio(coeffs, phi_map, xs)
    if not np.all(np.isfinite(g)):
        raise ConditionError(2, "drift ratio is not finite near 0")
    limit, converged, extrapolants = _richardson_limit(g, tol)
    if not converged:
        raise ConditionError(
            2, f"limit of the drift ratio does not stabilise (extrapolants {extrapolants})")
    if abs(limit) <= ZERO_LIMIT:
        # below extrapolation resolution
        limit = 0.0
    nu = 0.5 + limit
    if nu >= 1.0 - NU_MARGIN:
        raise ConditionError(
            2, f"nu = {nu:.12g} >= 1: 0 is not attainable (entrance-type boundary)")
    logger.debug(f"compute_nu: limit={limit:.12g}, nu={nu:.12g}")
    return float(nu)


class TransformBundle:
    """
    φ, ψ, ν, d̃, θ and V for one coefficient pair.

    Immutable after construction and safe to share between threads.
    """

    def __init__(self, coeffs: Coefficients,
                 grid_lo: float = GRID_LO, grid_hi: float = GRID_HI,
                 grid_nodes: int = GRID_NODES,
                 richardson_x0: float = RICHARDSON_X0,
                 richardson_depth: int = RICHARDSON_DEPTH,
                 richardson_tol: float = RICHARDSON_TOL,
                 v_sup_safety: float = V_SUP_SAFETY):
        self.logger = logging.getLogger(__name__)
        self.coeffs = coeffs
        self.v_sup_safety = v_sup_safety
        self.phi_map = PhiMap(coeffs, grid_lo, grid_hi, grid_nodes)
        self.nu = compute_nu(coeffs, self.phi_map, richardson_x0, richardson_depth, richardson_tol)

        x = self.phi_map.x_nodes
        self.x_nodes = x
        self.z_nodes = self.phi_map.phi(x)
        g = drift_ratio(coeffs, self.phi_map, x)
        d = g + 0.5 - self.nu
        self.drift_free = bool(np.max(np.abs(d)) <= DRIFT_NOISE * max(1.0, float(np.max(np.abs(g)))))
        self.d_nodes = np.zeros_like(d) if self.drift_free else d

        self._log_theta_nodes = self._build_log_theta()
        self.V_nodes = self.V_of_x(x)
        if not np.all(np.isfinite(self.V_nodes)):
            raise ConditionError(3, "potential V is not finite on the grid")
        self.V_sup = v_sup_safety * float(np.max(np.abs(self.V_nodes)))

        log_z = np.log(self.z_nodes)
        self._log_z = log_z
        self._V_spline = CubicSpline(log_z, self.V_nodes)
        self._d_spline = CubicSpline(log_z, self.d_nodes)
        self.logger.info(f"Bundle built for {coeffs.label}: nu={self.nu:.12g}, "
                         f"V_sup={self.V_sup:.6g}, drift_free={self.drift_free}")

    # -- original variable ------------------------------------------------

    def A(self, x):
        return self.phi_map.A(x)

    def phi(self, x):
        return self.phi_map.phi(x)

    def phi_prime(self, x):
        return self.phi_map.phi_prime(x)

    def phi_second(self, x):
        return self.phi_map.phi_second(x)

    def psi(self, z):
        """ψ = φ^{-1}, scalar or array."""
        if np.ndim(z) == 0:
            return self.phi_map.psi(z)
        return np.array([self.phi_map.psi(v) for v in np.ravel(z)]).reshape(np.shape(z))

    def G(self, x):
        x = _as_array(x)
        return (2.0 * self.coeffs.b_at(x) - self.coeffs.da(x)) / (4.0 * np.sqrt(self.coeffs.a_at(x)))

    def d(self, x):
        """d(x) = G(x) A(x) + ½ - ν."""
        if self.drift_free:
            return _zero(x)
        return self.G(x) * self.A(x) + 0.5 - self.nu

    def d_prime(self, x):
        """d'(x) by the chain rule when a', b', a'' are known, else by central differences."""
        if self.drift_free:
            return _zero(x)
        x = _as_array(x)
        c = self.coeffs
        if c.has_analytic_derivatives:
            a = c.a_at(x)
            two_b_minus = 2.0 * c.b_at(x) - c.da(x)
            g_prime = ((2.0 * c.db(x) - c.d2a(x)) / (4.0 * np.sqrt(a))
                       - two_b_minus * c.da(x) / (8.0 * a ** 1.5))
            return g_prime * self.A(x) + self.G(x) / np.sqrt(a)
        h = DERIV_STEP * x
        return (self.d(x + h) - self.d(x - h)) / (2.0 * h)

    def V_of_x(self, x):
        """V(φ(x)) = -d²/(4φ) - d'/(2φ') + (1-ν) d/(2φ)."""
        if self.drift_free:
            return _zero(x)
        d = self.d(x)
        phi = self.phi(x)
        return -d * d / (4.0 * phi) - self.d_prime(x) / (2.0 * self.phi_prime(x)) \
            + (1.0 - self.nu) * d / (2.0 * phi)

    def _theta_integrand(self, s):
        return self.d(s) / (self.A(s) * np.sqrt(self.coeffs.a_at(s)))

    def _build_log_theta(self) -> np.ndarray:
        if self.drift_free:
            return np.zeros_like(self.x_nodes)
        first, _ = integrate.quad(lambda s: float(self._theta_integrand(s)), 0.0,
                                  self.x_nodes[0], limit=100)
        segs = self.phi_map.segment_integral(self._theta_integrand,
                                             self.x_nodes[:-1], self.x_nodes[1:])
        return -np.concatenate(([first], first + np.cumsum(segs)))

    def log_theta_x(self, x):
        """log θ(φ(x))."""
        if self.drift_free:
            return _zero(x) if np.ndim(x) else 0.0
        xa = np.atleast_1d(_as_array(x))
        out = np.empty_like(xa)
        inside = xa <= self.x_nodes[-1]
        if inside.any():
            xi = xa[inside]
            idx = np.searchsorted(self.x_nodes, xi, side='right') - 1
            safe = np.clip(idx, 0, None)
            base = np.where(idx >= 0, self._log_theta_nodes[safe], 0.0)
            lo = np.where(idx >= 0, self.x_nodes[safe], 0.0)
            out[inside] = base - self.phi_map.segment_integral(self._theta_integrand, lo, xi)
        for i in np.flatnonzero(~inside):
            top = self.x_nodes[-1]
            extra, _ = integrate.quad(lambda s: float(self._theta_integrand(s)), top, xa[i],
                                      limit=200)
            out[i] = self._log_theta_nodes[-1] - extra
        return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))

    def theta_of_x(self, x):
        """θ(φ(x))."""
        return np.exp(self.log_theta_x(x))

    # -- transformed variable ---------------------------------------------

    def d_tilde(self, z):
        """d̃(z) = d(ψ(z))."""
        return self.d(self.psi(z))

    def d_tilde_fast(self, z):
        """
        Interpolated d̃(z); linear in z below the table, constant above.
        """
        z = _as_array(z)
        if self.drift_free:
            return np.zeros_like(z)
        z0, z1 = self.z_nodes[0], self.z_nodes[-1]
        zc = np.clip(z, z0, z1)
        out = self._d_spline(np.log(zc))
        below = z < z0
        return np.where(below, self.d_nodes[0] * np.maximum(z, 0.0) / z0, out)

    def theta(self, z):
        """θ(z) = exp(-∫_0^z d̃(u)/(2u) du)."""
        return np.exp(self.log_theta_x(self.psi(z)))

    def V(self, z):
        """Interpolated V(z), constant outside the table."""
        z = _as_array(z)
        if self.drift_free:
            return np.zeros_like(z)
        zc = np.clip(z, self.z_nodes[0], self.z_nodes[-1])
        return self._V_spline(np.log(zc))

    def V_exact(self, z):
        """V(z) from the formula at ψ(z), without interpolation."""
        return self.V_of_x(self.psi(z))

    def V_derivatives(self, z, k: int) -> List[np.ndarray]:
        """[V, V', ..., V^{(k)}] at z (k <= 3) from the spline in log z."""
        if k > 3:
            raise DomainError("V derivatives are available up to order 3")
        z = _as_array(z)
        if self.drift_free:
            return [np.zeros_like(z) for _ in range(k + 1)]
        lz = np.log(np.clip(z, self.z_nodes[0], self.z_nodes[-1]))
        s = [self._V_spline(lz, nu=j) for j in range(k + 1)]
        out = [s[0]]
        if k >= 1:
            out.append(s[1] / z)
        if k >= 2:
            out.append((s[2] - s[1]) / z ** 2)
        if k >= 3:
            out.append((s[3] - 3.0 * s[2] + 2.0 * s[1]) / z ** 3)
        return out

    def C_k_V(self, k: int, refine: bool = False) -> float:
        """
        1.25 · max_{j<=k} sup_z |V^{(j)}(z)| on z >= 1e-6.

        With refine=True V is recomputed from the formula on a 4x denser
        grid before sampling.
        """
        if self.drift_free:
            return 0.0
        if not refine:
            z_lo = max(CK_Z_MIN, self.z_nodes[0])
            zs = np.geomspace(z_lo, self.z_nodes[-1], 4 * len(self.z_nodes))
            derivs = self.V_derivatives(zs, k)
            sup = max(float(np.max(np.abs(dv))) for dv in derivs)
            return self.v_sup_safety * max(sup, self.V_sup / self.v_sup_safety)
        xs = np.geomspace(self.x_nodes[0], self.x_nodes[-1], 4 * len(self.x_nodes))
        zs = self.phi(xs)
        vs = self.V_of_x(xs)
        spline = CubicSpline(np.log(zs), vs)
        keep = zs >= CK_Z_MIN
        lz = np.log(zs[keep])
        zk = zs[keep]
        s = [spline(lz, nu=j) for j in range(min(k, 3) + 1)]
        derivs = [s[0]]
        if k >= 1:
            derivs.append(s[1] / zk)
        if k >= 2:
            derivs.append((s[2] - s[1]) / zk ** 2)
        if k >= 3:
            derivs.append((s[3] - 3.0 * s[2] + 2.0 * s[1]) / zk ** 3)
        sup = max(float(np.max(np.abs(dv))) for dv in derivs)
        sup = max(sup, float(np.max(np.abs(vs))))
        self.logger.debug(f"C_{k}^V re-estimated on a denser grid: {self.v_sup_safety * sup:.6g}")
        return self.v_sup_safety * sup

    def theta_derivative_sup(self, k: int, z_max: float) -> float:
        """max_{j<=k} sup_{(0, z_max)} |θ^{(j)}| from θ' = -θ d̃/(2z)."""
        keep = self.z_nodes <= z_max
        if self.drift_free or keep.sum() < 4:
            return 1.0 if self.drift_free else float(np.max(np.exp(self._log_theta_nodes)))
        z = self.z_nodes[keep]
        theta = np.exp(self._log_theta_nodes[keep])
        first = -theta * self.d_nodes[keep] / (2.0 * z)
        sups = [float(np.max(theta)), float(np.max(np.abs(first)))][:k + 1]
        if k >= 2:
            spline = CubicSpline(z, first)
            for j in range(1, k):
                sups.append(float(np.max(np.abs(spline(z, nu=j)))))
        return max(sups)

    def phi_derivative_sup(self, k: int, x_max: float) -> float:
        """max_{j<=k} sup_{(0, x_max)} |φ^{(j)}| sampled on the grid."""
        x = self.x_nodes[self.x_nodes <= x_max]
        x = np.append(x, x_max)
        sups = [float(self.phi(x_max))]
        if k >= 1:
            sups.append(float(np.max(np.abs(self.phi_prime(x)))))
        if k >= 2:
            second = self.phi_second(x)
            sups.append(float(np.max(np.abs(second))))
            if k >= 3:
                spline = CubicSpline(x, second)
                for j in range(1, k - 1):
                    sups.append(float(np.max(np.abs(spline(x, nu=j)))))
        return max(sups)


def build_psi(bundle: TransformBundle, z):
    """ψ(z) with φ(ψ(z)) = z."""
    return bundle.psi(z)


def build_d_tilde(bundle: TransformBundle, z):
    """d̃(z) = d(ψ(z))."""
    return bundle.d_tilde(z)


def build_theta(bundle: TransformBundle, z):
    """θ(z)."""
    return bundle.theta(z)


def build_V(bundle: TransformBundle, z):
    """V(z) from the formula at ψ(z)."""
    return bundle.V_exact(z)


@dataclass
class ConditionReport:
    """Outcome of the structural condition checks."""
    entries: List[Dict] = field(default_factory=list)
    nu: Optional[float] = None

    @property
    def passed(self) -> bool:
        return all(entry['passed'] for entry in self.entries)

    def add(self, condition: int, name: str, passed: bool, detail: str, value=None):
        self.entries.append({'condition': condition, 'check': name, 'passed': bool(passed),
                             'detail': detail, 'value': value})

    def first_failure(self) -> Optional[Dict]:
        for entry in self.entries:
            if not entry['passed']:
                return entry
        return None

    def to_dict(self) -> Dict:
        return {'passed': self.passed, 'nu': self.nu, 'entries': self.entries}


def _blows_up(values: np.ndarray, edge: slice) -> bool:
    values = np.abs(values)
    if not np.all(np.isfinite(values)):
        return True
    tail = values[edge]
    reference = max(float(np.median(values)), 1e-300)
    growing = np.all(np.diff(tail) < 0) if edge.start is None else np.all(np.diff(tail) > 0)
    return bool(growing and tail.max() > 1e3 * max(reference, 1.0))


def validate_conditions(coeffs: Coefficients, **bundle_options) -> ConditionReport:
    """
    Check the structural conditions numerically; failures become report entries.

    Condition 3 can only be falsified on a finite grid, never certified.
    """
    report = ConditionReport()

    try:
        zero = check_integrability_at_zero(coeffs)
        ok = zero['verdict'] == 'finite' or (
            zero['verdict'] == 'indeterminate' and vanishing_order(coeffs) < 2.0)
        report.add(1, 'integrable_at_zero', ok,
                   f"partial sums {zero['verdict']} (tail ratio {zero['ratio']:.6g})", zero['value'])
        inf = check_divergence_at_infinity(coeffs)
        report.add(1, 'divergent_at_infinity', inf['verdict'] != 'finite',
                   f"partial sums {inf['verdict']} (tail ratio {inf['ratio']:.6g})", inf['value'])
    except (DomainError, FloatingPointError) as e:
        report.add(1, 'integrable_at_zero', False, str(e))
        return report
    if not report.passed:
        return report

    try:
        bundle = TransformBundle(coeffs, **bundle_options)
    except ConditionError as e:
        report.add(e.condition, 'limit_exists' if e.condition == 2 else 'bundle', False, e.detail)
        return report
    except (DomainError, ConvergenceError) as e:
        report.add(2, 'limit_exists', False, str(e))
        return report
    report.nu = bundle.nu
    report.add(2, 'limit_exists', True, f"nu = {bundle.nu:.12g} < 1", bundle.nu)

    x = bundle.x_nodes
    with np.errstate(all='ignore'):
        r1 = np.abs(bundle.d(x)) / np.sqrt(bundle.phi(x))
        r2 = np.abs(bundle.d_prime(x)) / bundle.phi_prime(x)
    for name, values in (('d_over_sqrt_phi', r1), ('d_prime_over_phi_prime', r2)):
        falsified = _blows_up(values, slice(None, 10)) or _blows_up(values, slice(-10, None))
        detail = 'falsified on grid' if falsified else 'not falsified on grid'
        if not falsified:
            logger.warning(f"Condition 3 ({name}): not falsified on grid; a finite grid cannot certify it")
        report.add(3, name, not falsified, detail, float(np.max(values)) if np.all(np.isfinite(values)) else None)
    return report
