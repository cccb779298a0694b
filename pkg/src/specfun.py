"""
Special Functions
Gamma (including negative non-integer arguments), modified Bessel functions
of the first kind and incomplete gamma functions used by the kernel formulas.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import floor
from typing import Union

import numpy as np
from scipy import special

from src.errors import ConvergenceError, DomainError


ArrayLike = Union[float, np.ndarray]

# Largest argument handled by the ascending series; beyond it scipy's
# exponentially scaled algorithm takes over.
SERIES_SWITCHOVER = 30.0

_FPMIN = 1e-300


@dataclass(frozen=True)
class EvalTolerance:
    """
    Tolerances for series and quadrature evaluation.

    Attributes:
        rel_tol: Relative truncation tolerance
        abs_tol: Absolute tolerance
        max_terms: Maximum number of series terms
    """
    rel_tol: float = 1e-12
    abs_tol: float = 1e-300
    max_terms: int = 500

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise DomainError(f"rel_tol must be > 0, got {self.rel_tol}")
        if not self.abs_tol >= 0:
            raise DomainError(f"abs_tol must be >= 0, got {self.abs_tol}")
        if int(self.max_terms) != self.max_terms or self.max_terms < 1:
            raise DomainError(f"max_terms must be a positive integer, got {self.max_terms}")


DEFAULT_TOLERANCE = EvalTolerance()


def _pole_atol(tol: EvalTolerance) -> float:
    return max(tol.abs_tol, 1e-12)


def is_nonpositive_integer(alpha: float, tol: EvalTolerance = DEFAULT_TOLERANCE) -> bool:
    """True when alpha lies within tolerance of 0, -1, -2, ..."""
    return alpha <= _pole_atol(tol) and abs(alpha - round(alpha)) <= _pole_atol(tol)


def gamma(alpha: float, tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    Gamma function.

    For negative non-integer arguments the downward recursion
    Γ(α) = Γ(α + n + 1) / (α(α+1)...(α+n)), n = floor(-α), is used.

    Args:
        alpha: Argument, not a non-positive integer
        tol: Tolerances (abs_tol sets the pole exclusion radius)

    Returns:
        Γ(alpha)
    """
    alpha = float(alpha)
    if is_nonpositive_integer(alpha, tol):
        raise DomainError(f"gamma has a pole at {alpha}")
    if alpha > 0:
        return float(special.gamma(alpha))
    return gamma_recursive(alpha)


def gamma_recursive(alpha: float) -> float:
    """Γ(α) for α < 0 by shifting to (0, 1] and dividing out the product."""
    n = int(floor(-alpha))
    denominator = 1.0
    for j in range(n + 1):
        denominator *= alpha + j
    return float(special.gamma(alpha + n + 1)) / denominator


def rgamma(alpha: ArrayLike) -> ArrayLike:
    """Reciprocal gamma 1/Γ(α), zero at the poles."""
    return special.rgamma(alpha)


def _bessel_series_scalar(order: float, x: float, tol: EvalTolerance) -> float:
    half = 0.5 * x
    quarter_sq = half * half
    term = half ** order * float(rgamma(order + 1.0))
    total = term
    for n in range(tol.max_terms):
        term *= quarter_sq / ((n + 1.0) * (n + 1.0 + order))
        total += term
        ratio = quarter_sq / ((n + 2.0) * (n + 2.0 + order))
        if 0 <= ratio < 1 and abs(term) * ratio / (1.0 - ratio) <= tol.rel_tol * abs(total):
            return total
    raise ConvergenceError(
        f"Bessel series I_{order}({x}) did not converge within {tol.max_terms} terms")


def _bessel_series(order: float, x: np.ndarray, tol: EvalTolerance) -> np.ndarray:
    if x.ndim == 0 or x.size == 1:
        return np.array([_bessel_series_scalar(order, float(v), tol)
                         for v in x.ravel()]).reshape(x.shape)
    half = 0.5 * x
    quarter_sq = half * half
    term = np.power(half, order) * float(rgamma(order + 1.0))
    total = term.copy()
    active = np.ones(x.shape, dtype=bool)
    for n in range(tol.max_terms):
        term = np.where(active, term * quarter_sq / ((n + 1.0) * (n + 1.0 + order)), 0.0)
        total = total + term
        ratio = quarter_sq / ((n + 2.0) * (n + 2.0 + order))
        with np.errstate(divide='ignore', invalid='ignore'):
            tail = np.abs(term) * ratio / (1.0 - ratio)
        done = (ratio >= 0) & (ratio < 1) & (tail <= tol.rel_tol * np.abs(total))
        active &= ~done
        if not active.any():
            return total
    raise ConvergenceError(
        f"Bessel series I_{order} did not converge within {tol.max_terms} terms")


def _normalize_order(order: float, x: np.ndarray) -> float:
    order = float(order)
    if order < 0 and order == round(order):
        return -order
    if order < 0 and np.any(x == 0):
        raise DomainError(f"I_{order}(0) is infinite for negative non-integer order")
    return order


def bessel_i(order: float, x: ArrayLike,
             tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    Modified Bessel function of the first kind I_order(x).

    Ascending series for x <= 30, scipy's algorithm beyond.

    Args:
        order: Real order; negative integers use I_{-n} = I_n
        x: Nonnegative argument (scalar or array)
        tol: Series tolerances

    Returns:
        I_order(x), same shape as x
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise DomainError("bessel_i needs x >= 0")
    order = _normalize_order(order, xa)
    small = xa <= SERIES_SWITCHOVER
    out = np.empty_like(xa)
    if small.any():
        out[small] = _bessel_series(order, xa[small], tol)
    if (~small).any():
        out[~small] = special.iv(order, xa[~small])
    return out if out.ndim else float(out)


def bessel_i_scaled(order: float, x: ArrayLike,
                    tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    Exponentially scaled Bessel function e^{-x} I_order(x).

    Kernel products multiply I by decaying exponentials; this form keeps
    intermediate magnitudes near one.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise DomainError("bessel_i_scaled needs x >= 0")
    order = _normalize_order(order, xa)
    small = xa <= SERIES_SWITCHOVER
    out = np.empty_like(xa)
    if small.any():
        xs = xa[small]
        out[small] = _bessel_series(order, xs, tol) * np.exp(-xs)
    if (~small).any():
        out[~small] = special.ive(order, xa[~small])
    return out if out.ndim else float(out)


def _check_gamma_args(s: float, x: ArrayLike):
    if not s > 0:
        raise DomainError(f"incomplete gamma needs s > 0, got {s}")
    if np.any(np.asarray(x) < 0):
        raise DomainError("incomplete gamma needs x >= 0")


def regularized_lower_gamma(s: float, x: ArrayLike) -> ArrayLike:
    """P(s, x) = γ(s, x)/Γ(s)."""
    _check_gamma_args(s, x)
    return special.gammainc(s, x)


def lower_incomplete_gamma(s: float, x: ArrayLike) -> ArrayLike:
    """
    Lower incomplete gamma γ(s, x) = ∫_0^x u^{s-1} e^{-u} du.

    Args:
        s: Positive shape
        x: Nonnegative upper limit

    Returns:
        γ(s, x)
    """
    _check_gamma_args(s, x)
    return special.gammainc(s, x) * special.gamma(s)


def _upper_gamma_continued_fraction(s: float, x: float,
                                    tol: EvalTolerance) -> float:
    # modified Lentz evaluation of the Legendre continued fraction
    b = x + 1.0 - s
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, tol.max_terms + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) <= tol.rel_tol:
            return float(np.exp(-x + s * np.log(x) - special.gammaln(s)) * h)
    raise ConvergenceError(
        f"upper incomplete gamma continued fraction did not converge (s={s}, x={x})")


def regularized_upper_gamma(s: float, x: float,
                            tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    Q(s, x) = Γ(s, x)/Γ(s).

    1 - P(s, x) when x <= s + 1, the continued fraction tail otherwise.
    """
    _check_gamma_args(s, x)
    x = float(x)
    if x <= s + 1.0:
        return float(1.0 - special.gammainc(s, x))
    return _upper_gamma_continued_fraction(s, x, tol)


def upper_incomplete_gamma(s: float, x: float,
                           tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """Γ(s, x) = Γ(s) - γ(s, x)."""
    return regularized_upper_gamma(s, x, tol) * float(special.gamma(s))


@lru_cache(maxsize=None)
def stirling2(k: int, j: int) -> int:
    """Stirling number of the second kind S(k, j)."""
    if k == j:
        return 1
    if j == 0 or j > k:
        return 0
    return j * stirling2(k - 1, j) + stirling2(k - 1, j - 1)


def touchard(k: int, x: float) -> float:
    """Touchard polynomial T_k(x) = Σ_j S(k, j) x^j, with T_0 = 1."""
    return float(sum(stirling2(k, j) * x ** j for j in range(k + 1)))
