"""
Closed Forms
Explicit kernels used as references: p_α for a = x^α, its mass loss,
the x^α ∂² + x^β φ ∂ variant through the Duhamel series, and the
half-line reference kernels.
"""

import logging
from typing import Callable, Dict, Optional

import numpy as np
from scipy import integrate, special

from src.duhamel import KernelValue, PotentialKernel
from src.errors import ConvergenceError, DomainError
from src.specfun import DEFAULT_TOLERANCE, EvalTolerance, regularized_upper_gamma
from src.utils import gauss_legendre_on


logger = logging.getLogger(__name__)

REFERENCE_NAMES = ('heat_dirichlet', 'heat_neumann', 'geometric_alpha2',
                   'example4_dirichlet', 'example4_free')

# Sampling grid for the hypotheses on φ and the sup of Λ
VALIDATION_GRID = np.geomspace(1e-8, 1e3, 2000)
DECAY_GRID = np.linspace(200.0, 1000.0, 41)
LAMBDA_SAFETY = 1.25

# Panel layout of the x-space recursion
RECURSION_WIDTHS = 10.0
RECURSION_NODES = 32
RECURSION_EPSREL = 1e-9


def _check_alpha(alpha: float):
    if not 0 < alpha < 2:
        raise DomainError(f"alpha must lie in (0, 2), got {alpha}")


def _check_positive(**values):
    for name, value in values.items():
        if not np.all(np.asarray(value, dtype=float) > 0):
            raise DomainError(f"{name} must be positive")


def eta(alpha: float) -> float:
    """Bessel order 1/(2-α) of p_α."""
    _check_alpha(alpha)
    return 1.0 / (2.0 - alpha)


def phi_power(alpha: float, x):
    """φ(x) = x^{2-α}/(2-α)²."""
    return np.power(np.asarray(x, dtype=float), 2.0 - alpha) / (2.0 - alpha) ** 2


def psi_power(alpha: float, z):
    """ψ(z) = ((2-α)² z)^{1/(2-α)}."""
    return np.power((2.0 - alpha) ** 2 * np.asarray(z, dtype=float), 1.0 / (2.0 - alpha))


def p_alpha(alpha: float, x, y, t):
    """
    Fundamental solution of ∂t u = x^α ∂²x u with absorption at 0.

    x^{1/2} y^{1/2-α} / (t(2-α)) · exp(-(x^{2-α}+y^{2-α})/((2-α)²t)) · I_η(2(xy)^{1-α/2}/((2-α)²t)),
    η = 1/(2-α), evaluated with the exponentially scaled Bessel function.

    Args:
        alpha: Exponent in (0, 2)
        x, y, t: Positive arguments (broadcast)

    Returns:
        p_α(x, y, t)
    """
    _check_alpha(alpha)
    _check_positive(x=x, y=y, t=t)
    x, y, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, t)))
    k = 2.0 - alpha
    sx, sy = np.power(x, k / 2.0), np.power(y, k / 2.0)
    arg = 2.0 * sx * sy / (k * k * t)
    log_pref = 0.5 * np.log(x) + (0.5 - alpha) * np.log(y) - np.log(t * k) - (sx - sy) ** 2 / (k * k * t)
    out = np.exp(log_pref) * special.ive(1.0 / k, arg)
    return out if out.ndim else float(out)


def p_alpha_series(alpha: float, x: float, y: float, t: float,
                   tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    p_α from its power series in (xy)^{2-α}/t², summed in log space.

    Used as an independent check of the Bessel form. The terms peak near
    n ≈ (xy)^{1-α/2}/((2-α)² t); summation stops at the first term past the
    peak that falls below rel_tol of it.

    Raises:
        ConvergenceError: If that term lies beyond tol.max_terms
    """
    _check_alpha(alpha)
    _check_positive(x=x, y=y, t=t)
    k = 2.0 - alpha
    n = np.arange(tol.max_terms, dtype=float)
    log_terms = (n * (k * np.log(x * y) - 2.0 * np.log(t) - 4.0 * np.log(k))
                 - special.gammaln(n + 1.0) - special.gammaln(n + (3.0 - alpha) / k))
    peak = int(np.argmax(log_terms))
    small = np.flatnonzero(log_terms[peak:] < log_terms[peak] + np.log(tol.rel_tol))
    if small.size == 0:
        raise ConvergenceError(
            f"p_alpha series at alpha={alpha}, x={x}, y={y}, t={t} "
            f"did not converge within {tol.max_terms} terms")
    stop = peak + int(small[0]) + 1
    log_pref = (np.log(x) + (1.0 - alpha) * np.log(y) - ((3.0 - alpha) / k) * np.log(t)
                - ((4.0 - alpha) / k) * np.log(k) - (x ** k + y ** k) / (k * k * t))
    return float(np.exp(log_pref + special.logsumexp(log_terms[:stop])))


def mass_loss_T(alpha: float, x: float, t: float) -> float:
    """T = x^{2-α}/((2-α)² t)."""
    return float(x ** (2.0 - alpha) / ((2.0 - alpha) ** 2 * t))


def mass_loss(alpha: float, x: float, t: float) -> float:
    """
    m_α(x, t) = 1 - ∫ p_α(x, y, t) dy = Γ(η, T)/Γ(η).

    Args:
        alpha: Exponent in (0, 2)
        x: Starting point
        t: Time

    Returns:
        Probability absorbed at 0 by time t
    """
    _check_alpha(alpha)
    _check_positive(x=x, t=t)
    return regularized_upper_gamma(eta(alpha), mass_loss_T(alpha, x, t))


def mass_loss_asymptotic(alpha: float, x: float, t: float) -> float:
    """
    Leading behaviour of m_α as α ↗ 2:
    x^{α-1} e^{-T} / (Γ(η) ((2-α)² t)^{(α-1)/(2-α)}) · (1 + (2-α) t / x^{2-α}).
    """
    _check_alpha(alpha)
    _check_positive(x=x, t=t)
    k = 2.0 - alpha
    T = mass_loss_T(alpha, x, t)
    log_lead = ((alpha - 1.0) * np.log(x) - T - special.gammaln(1.0 / k)
                - ((alpha - 1.0) / k) * np.log(k * k * t))
    return float(np.exp(log_lead) * (1.0 + k * t / x ** k))


def mass_loss_log_ratio(alpha: float, x: float, t: float) -> float:
    """-ln m_α(x, t) / T, which tends to 1 as α ↗ 2."""
    _check_alpha(alpha)
    _check_positive(x=x, t=t)
    T = mass_loss_T(alpha, x, t)
    m = mass_loss(alpha, x, t)
    # m_α underflows long before the ratio settles
    log_m = np.log(m) if m > 0 else _log_upper_gamma_tail(eta(alpha), T)
    return float(-log_m / T)


def _log_upper_gamma_tail(s: float, T: float) -> float:
    # ln Γ(s, T)/Γ(s) for very large T from the integral in τ = u - T
    value, _ = integrate.quad(lambda tau: np.exp((s - 1.0) * np.log1p(tau / T) - tau), 0.0, np.inf)
    return float((s - 1.0) * np.log(T) - T - special.gammaln(s) + np.log(value))


def mass_loss_ratio_budget(alpha: float) -> float:
    """Accepted deviation 5(2-α)(1 + ln(1/(2-α))) of the log ratio from 1."""
    k = 2.0 - alpha
    return float(5.0 * k * (1.0 + np.log(1.0 / k)))


def mass_loss_quadrature(alpha: float, x: float, t: float) -> float:
    """1 - ∫_0^∞ p_α(x, y, t) dy by adaptive quadrature in u = y^{(2-α)/2}."""
    _check_alpha(alpha)
    _check_positive(x=x, t=t)
    k = 2.0 - alpha
    centre = x ** (k / 2.0)
    width = k * np.sqrt(t)
    upper = centre + 40.0 * width

    def integrand(u):
        if u <= 0:
            return 0.0
        y = u ** (2.0 / k)
        return p_alpha(alpha, x, y, t) * (2.0 / k) * y / u

    value, _ = integrate.quad(integrand, 0.0, upper, points=(centre,),
                              epsabs=1e-14, epsrel=1e-12, limit=400)
    return float(1.0 - value)


class DriftVariant:
    """
    Kernel of ∂t u = x^α ∂²x u + x^β φ(x) ∂x u with absorption at 0.

    Built from the closed-form change of variables: φ(x) = x^{2-α}/(2-α)²,
    θ(φ(x)) = exp(-½∫_0^x u^{β-α} φ(u) du), V(φ(x)) = Λ(x) and
    ν = (1-α)/(2-α). The Duhamel series of the potential supplies the
    correction terms; p_term rebuilds them independently from p_α and Λ
    by the recursion in x.
    """

    def __init__(self, alpha: float, beta: float, phi_fn: Callable,
                 phi_prime: Optional[Callable] = None, order: Optional[int] = None):
        """
        Args:
            alpha: Exponent of the diffusion coefficient, in (0, 2)
            beta: Exponent of the drift, >= 1
            phi_fn: Vectorised φ; bounded, nonzero at 0, rapidly decaying
            phi_prime: Vectorised φ' (central differences when None)
            order: Fixed Duhamel order (default per t)
        """
        _check_alpha(alpha)
        if not beta >= 1:
            raise DomainError(f"beta must be >= 1, got {beta}")
        self.logger = logging.getLogger(__name__)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.phi_fn = phi_fn
        self.phi_prime = phi_prime if phi_prime is not None else self._numeric_phi_prime
        self.nu = (1.0 - alpha) / (2.0 - alpha)

        self._validate_phi()
        lam = self.lambda_potential(VALIDATION_GRID)
        if not np.all(np.isfinite(lam)):
            raise DomainError("Lambda is not finite on the validation grid")
        self.lambda_sup = LAMBDA_SAFETY * float(np.max(np.abs(lam)))
        self.pk = PotentialKernel(self.nu, self.V, self.lambda_sup, order=order,
                                  label=f"drift_variant(alpha={alpha!r}, beta={beta!r})")
        self.logger.info(f"Drift variant alpha={alpha}, beta={beta}: nu={self.nu:.12g}, "
                         f"sup|Lambda|={self.lambda_sup:.6g}")

    def _numeric_phi_prime(self, x):
        x = np.asarray(x, dtype=float)
        up = x + 1e-6 * np.maximum(1.0, x)
        down = np.maximum(x - 1e-6 * np.maximum(1.0, x), 0.5 * x)
        return (np.asarray(self.phi_fn(up)) - np.asarray(self.phi_fn(down))) / (up - down)

    def _validate_phi(self):
        values = np.asarray(self.phi_fn(VALIDATION_GRID), dtype=float)
        slopes = np.asarray(self.phi_prime(VALIDATION_GRID), dtype=float)
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(slopes))):
            raise DomainError("phi or phi' is not finite on the validation grid")
        if not np.any(values):
            # φ ≡ 0 reduces to p_α
            return
        if abs(values[0]) < 1e-12:
            raise DomainError("phi must have a nonzero limit at 0")
        far = np.asarray(self.phi_fn(DECAY_GRID), dtype=float)
        if np.max(np.abs(far) * DECAY_GRID ** (self.beta + 2.0)) > 1e-6:
            raise DomainError("phi must decay faster than any polynomial at infinity")

    def lambda_potential(self, x):
        """Λ(x) = -x^{2β-α}φ²/4 - (β-α)x^{β-1}φ/2 - x^β φ'/2."""
        return lambda_potential(self.alpha, self.beta, self.phi_fn, self.phi_prime, x)

    def V(self, z):
        return self.lambda_potential(psi_power(self.alpha, z))

    def drift_exponent(self, x: float, y: float) -> float:
        """½ ∫_x^y u^{β-α} φ(u) du, antisymmetric in (x, y)."""
        lo, hi = (x, y) if x <= y else (y, x)
        if lo == hi:
            return 0.0
        value, _ = integrate.quad(
            lambda u: u ** (self.beta - self.alpha) * float(self.phi_fn(u)), lo, hi, limit=200)
        return 0.5 * value if x <= y else -0.5 * value

    def p_base(self, x: float, y: float, t: float) -> float:
        """p_{α,0} = p_α e^{½∫_x^y u^{β-α}φ}."""
        return float(p_alpha(self.alpha, x, y, t) * np.exp(self.drift_exponent(x, y)))

    def p(self, x: float, y: float, t: float, order: Optional[int] = None) -> KernelValue:
        """Order-k partial sum Σ p_{α,n} with its certified tail."""
        _check_positive(x=x, y=y, t=t)
        a = self.alpha
        kv = self.pk.evaluate(float(phi_power(a, x)), float(phi_power(a, y)), t, order)
        phi_prime_y = y ** (1.0 - a) / (2.0 - a)
        return kv.scaled(float(np.exp(self.drift_exponent(x, y)) * phi_prime_y))

    # -- x-space recursion --------------------------------------------------

    def _zeta_nodes(self, x: float, y: float, tau: float, rest: float):
        """
        Nodes and weights in ζ for ∫ p_α(x, ζ, tau) Λ(ζ) r(ζ, y, rest) dζ.

        Panels live in s = ζ^{(2-α)/2}, where both factors are close to
        Gaussians of width (2-α)√(τ/2) around s(x) and s(y).
        """
        k = 2.0 - self.alpha
        sx, sy = x ** (k / 2.0), y ** (k / 2.0)
        wx = RECURSION_WIDTHS * k * np.sqrt(tau / 2.0)
        wy = RECURSION_WIDTHS * k * np.sqrt(rest / 2.0)
        lo = max(0.0, min(sx - wx, sy - wy))
        hi = max(sx + wx, sy + wy)
        edges = np.unique(np.clip([lo, sx - wx, sx, sx + wx, sy - wy, sy, sy + wy, hi], lo, hi))
        edges = edges[np.concatenate(([True], np.diff(edges) > 1e-14 * hi))]
        s_parts, w_parts = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            s, w = gauss_legendre_on(a, b, RECURSION_NODES)
            s_parts.append(s)
            w_parts.append(w)
        s, w = np.concatenate(s_parts), np.concatenate(w_parts)
        # ζ = s^{2/k}, dζ = (2/k) s^{2/k-1} ds
        return np.power(s, 2.0 / k), w * (2.0 / k) * np.power(s, 2.0 / k - 1.0)

    def _lambda_term(self, n: int, x: float, y: float, t: float) -> float:
        """r_0 = p_α, r_n = ∫_0^t ∫ p_α(x, ζ, τ) Λ(ζ) r_{n-1}(ζ, y, t-τ) dζ dτ."""
        if n == 0:
            return float(p_alpha(self.alpha, x, y, t))

        def inner(tau):
            rest = t - tau
            zeta, weights = self._zeta_nodes(x, y, tau, rest)
            left = p_alpha(self.alpha, x, zeta, tau) * self.lambda_potential(zeta)
            if n == 1:
                right = p_alpha(self.alpha, zeta, y, rest)
            else:
                right = np.array([self._lambda_term(n - 1, float(z), y, rest) for z in zeta])
            return float(np.sum(weights * left * right))

        value, _ = integrate.quad(inner, 0.0, t, epsabs=1e-14, epsrel=RECURSION_EPSREL, limit=100)
        return value

    def p_term(self, n: int, x: float, y: float, t: float) -> float:
        """
        p_{α,n}(x, y, t) from the recursion in x-space.

        p_{α,n} = ∫_0^t ∫ p_{α,0}(x, ζ, τ) Λ(ζ) p_{α,n-1}(ζ, y, t-τ) dζ dτ. The
        drift factors telescope to e^{½∫_x^y u^{β-α}φ}, leaving nested
        quadratures of p_α and Λ alone. Cost grows geometrically with n;
        intended for the first few terms.
        """
        if n < 0:
            raise DomainError(f"n must be >= 0, got {n}")
        _check_positive(x=x, y=y, t=t)
        if n > 0 and self.lambda_sup == 0:
            return 0.0
        return float(np.exp(self.drift_exponent(x, y)) * self._lambda_term(n, x, y, t))

    def p_recursive(self, x: float, y: float, t: float, order: int = 1) -> float:
        """Σ_{n<=order} p_{α,n} from the x-space recursion."""
        return sum(self.p_term(n, x, y, t) for n in range(order + 1))

    def ratio_bound(self, t: float) -> float:
        """|p/p_{α,0} - 1| <= e^{‖Λ‖t} - 1."""
        return self.pk.ratio_bound(t)

    def tail_bound(self, t: float, order: int) -> float:
        """|p - Σ_{j<=k} p_{α,j}|/p_{α,0} <= e^{‖Λ‖t}(‖Λ‖t)^{k+1}/(k+1)!."""
        return self.pk.tail_bound(t, order)


def lambda_potential(alpha: float, beta: float, phi_fn: Callable, phi_prime: Callable, x):
    """
    Λ(x) = -x^{2β-α}φ(x)²/4 - (β-α)x^{β-1}φ(x)/2 - x^β φ'(x)/2.

    This is V(φ(x)) for a = x^α, b = x^β φ.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(phi_fn(x), dtype=float)
    fp = np.asarray(phi_prime(x), dtype=float)
    return (-np.power(x, 2.0 * beta - alpha) * f * f / 4.0
            - (beta - alpha) * np.power(x, beta - 1.0) * f / 2.0
            - np.power(x, beta) * fp / 2.0)


def drift_variant_p(alpha: float, beta: float, phi_fn: Callable, x: float, y: float, t: float,
                    order: Optional[int] = None, phi_prime: Optional[Callable] = None) -> KernelValue:
    """
    Kernel of x^α ∂² + x^β φ ∂ at (x, y, t), truncated at the given order.

    With φ ≡ 0 this is p_α exactly.
    """
    return DriftVariant(alpha, beta, phi_fn, phi_prime).p(x, y, t, order)


def heat_dirichlet(x, y, t):
    """(πt)^{-1/2} e^{-(x²+y²)/4t} sinh(xy/2t): √2 B + x killed at 0."""
    gap = (x - y) ** 2 / (4.0 * t)
    return -0.5 * np.exp(-gap) * np.expm1(-x * y / t) / np.sqrt(np.pi * t)


def heat_neumann(x, y, t):
    """(πt)^{-1/2} e^{-(x²+y²)/4t} cosh(xy/2t): |√2 B + x|."""
    gap = (x - y) ** 2 / (4.0 * t)
    return 0.5 * np.exp(-gap) * (1.0 + np.exp(-x * y / t)) / np.sqrt(np.pi * t)


def geometric_alpha2(x, y, t):
    """y^{-2} √(xy/4πt) exp(-(ln y - ln x)²/4t - t/4): x exp(√2 B - t)."""
    return y ** -2.0 * np.sqrt(x * y / (4.0 * np.pi * t)) \
        * np.exp(-(np.log(y) - np.log(x)) ** 2 / (4.0 * t) - t / 4.0)


def example4_dirichlet(x, y, t):
    """y^{-1/2} (πt)^{-1/2} e^{-(x+y)/t} sinh(2√(xy)/t) for x ∂² + ½ ∂ killed at 0."""
    gap = (np.sqrt(x) - np.sqrt(y)) ** 2 / t
    return -0.5 * np.exp(-gap) * np.expm1(-4.0 * np.sqrt(x * y) / t) / np.sqrt(np.pi * t * y)


def example4_free(x, y, t):
    """y^{-1/2} (πt)^{-1/2} e^{-(x+y)/t} cosh(2√(xy)/t): (√x + B/√2)²."""
    gap = (np.sqrt(x) - np.sqrt(y)) ** 2 / t
    return 0.5 * np.exp(-gap) * (1.0 + np.exp(-4.0 * np.sqrt(x * y) / t)) / np.sqrt(np.pi * t * y)


REFERENCE_KERNELS: Dict[str, Callable] = {
    'heat_dirichlet': heat_dirichlet,
    'heat_neumann': heat_neumann,
    'geometric_alpha2': geometric_alpha2,
    'example4_dirichlet': example4_dirichlet,
    'example4_free': example4_free,
}


def reference_kernels(name: str, x, y, t):
    """
    Evaluate a named half-line reference kernel.

    Args:
        name: One of REFERENCE_NAMES
        x, y, t: Positive arguments

    Returns:
        Kernel value (float for scalar input)
    """
    if name not in REFERENCE_KERNELS:
        raise DomainError(f"unknown reference kernel {name!r}; "
                          f"choose from {', '.join(REFERENCE_NAMES)}")
    _check_positive(x=x, y=y, t=t)
    x, y, t = (np.asarray(v, dtype=float) for v in (x, y, t))
    out = REFERENCE_KERNELS[name](x, y, t)
    return float(out) if np.ndim(out) == 0 else out
