"""
Model Kernels
Explicit fundamental solutions q_σ of ∂t v = z∂²z v + ν∂z v with absorption
at 0, the zero-flux companion q*, the extended family Q_{ν+k}, derivative
recurrences, total mass, upper bounds, convolution identities and the
model-equation solutions v_g.
"""

import logging
from dataclasses import dataclass
from math import comb, erfc, sqrt, pi
from typing import Callable, Union

import numpy as np
from scipy import integrate, special

from src.errors import ConvergenceError, DomainError
from src.specfun import DEFAULT_TOLERANCE, EvalTolerance, bessel_i_scaled


logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Indices within this distance of {2, 3, ...} are rejected
SIGMA_EXCLUSION = 1e-8
INTEGER_ATOL = 1e-12

QUAD_EPSABS = 1e-14
QUAD_EPSREL = 1e-12
QUAD_LIMIT = 200


@dataclass(frozen=True)
class KernelPoint:
    """
    Arguments of a kernel evaluation.

    Attributes:
        z: Backward variable
        w: Forward variable
        t: Time
    """
    z: float
    w: float
    t: float

    def __post_init__(self):
        for name in ('z', 'w', 't'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be a positive finite number, got {value}")

    def swapped(self) -> 'KernelPoint':
        return KernelPoint(self.w, self.z, self.t)


@dataclass(frozen=True)
class QuadResult:
    """Quadrature value with its error estimate and certified tail bound."""
    value: float
    error: float
    tail_bound: float

    @property
    def total_error(self) -> float:
        return self.error + self.tail_bound


def check_nu(nu: float):
    """Reject ν >= 1 (0 must be attainable)."""
    if not nu < 1:
        raise DomainError(f"nu must be < 1, got {nu}")


def check_sigma(sigma: float):
    """Reject σ in (or within 1e-8 of) {2, 3, 4, ...}."""
    nearest = round(sigma)
    if nearest >= 2 and abs(sigma - nearest) < SIGMA_EXCLUSION:
        raise DomainError(f"sigma = {sigma} lies in the excluded set {{2, 3, ...}}")


def is_negative_integer_index(nu: float) -> bool:
    """True when -ν ∈ {0, 1, 2, ...}."""
    return nu <= INTEGER_ATOL and abs(nu - round(nu)) <= INTEGER_ATOL


def _check_positive(**values):
    for name, value in values.items():
        arr = np.asarray(value, dtype=float)
        if not np.all(arr > 0):
            raise DomainError(f"{name} must be positive")


def _gap_squared(z: ArrayLike, w: ArrayLike) -> ArrayLike:
    # (√z - √w)² without cancellation when z ≈ w
    return (z - w) ** 2 / (np.sqrt(z) + np.sqrt(w)) ** 2


def q_sigma(sigma: float, z: ArrayLike, w: ArrayLike, t: ArrayLike,
            tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    Model kernel q_σ(z, w, t).

    Computed in scaled Bessel form
    exp(½(1-σ)ln(z/w) - ln t - (√z-√w)²/t) · e^{-X} I_{1-σ}(X), X = 2√(zw)/t,
    which keeps intermediate magnitudes near one.

    Args:
        sigma: Index, not in {2, 3, ...}
        z: Backward variable (> 0)
        w: Forward variable (> 0)
        t: Time (> 0)
        tol: Bessel series tolerances

    Returns:
        q_σ(z, w, t), broadcast over array arguments
    """
    check_sigma(sigma)
    _check_positive(z=z, w=w, t=t)
    z, w, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (z, w, t)))
    x = 2.0 * np.sqrt(z * w) / t
    log_pref = 0.5 * (1.0 - sigma) * (np.log(z) - np.log(w)) - np.log(t) - _gap_squared(z, w) / t
    out = np.exp(log_pref) * bessel_i_scaled(1.0 - sigma, x, tol)
    return out if out.ndim else float(out)


def log_q_sigma(sigma: float, z: ArrayLike, w: ArrayLike, t: ArrayLike) -> ArrayLike:
    """
    Natural logarithm of q_σ for σ < 2, where the kernel is positive.

    Uses scipy's scaled Bessel function directly; this is the form the
    Duhamel weights are computed in.
    """
    if not sigma < 2:
        raise DomainError(f"log_q_sigma needs sigma < 2, got {sigma}")
    z, w, t = (np.asarray(v, dtype=float) for v in (z, w, t))
    x = 2.0 * np.sqrt(z * w) / t
    with np.errstate(divide='ignore'):
        log_bessel = np.log(special.ive(1.0 - sigma, x))
    return (0.5 * (1.0 - sigma) * (np.log(z) - np.log(w)) - np.log(t)
            - _gap_squared(z, w) / t + log_bessel)


def q_sigma_series(sigma: float, z: float, w: float, t: float,
                   tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    q_σ from its power series, summed in log space.

    (z^{1-σ}/t^{2-σ}) e^{-(z+w)/t} Σ_n (zw)^n / (t^{2n} n! Γ(n+2-σ)).
    Terms with Γ at a pole vanish, so integer σ >= 2 are summable here
    (they reproduce q_{2-σ}(w, z, t)).
    """
    _check_positive(z=z, w=w, t=t)
    half_x = sqrt(z * w) / t
    n_terms = int(half_x + 12.0 * sqrt(half_x) + 40)
    log_y = np.log(z) + np.log(w) - 2.0 * np.log(t)
    log_pref = (1.0 - sigma) * np.log(z) - (2.0 - sigma) * np.log(t) - (z + w) / t

    while True:
        n = np.arange(n_terms, dtype=float)
        a = n + 2.0 - sigma
        pole = (a <= 0) & (np.abs(a - np.round(a)) < INTEGER_ATOL)
        sign = np.where(pole, 0.0, special.gammasgn(np.where(pole, 1.0, a)))
        log_terms = n * log_y - special.gammaln(n + 1.0) - special.gammaln(np.where(pole, 1.0, a))
        live = sign != 0
        peak = np.max(log_terms[live])
        if log_terms[-1] - peak < np.log(tol.rel_tol) - 10.0 or n_terms >= 100 * tol.max_terms:
            break
        n_terms *= 2

    scaled = np.sum(np.where(live, sign * np.exp(np.where(live, log_terms - peak, 0.0)), 0.0))
    if scaled == 0.0:
        return 0.0
    return float(np.sign(scaled) * np.exp(log_pref + peak + np.log(abs(scaled))))


def q_star(nu: float, z: ArrayLike, w: ArrayLike, t: ArrayLike,
           tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    Zero-flux kernel q*_ν(z, w, t).

    (w^{ν-1}/t^ν) e^{-(z+w)/t} Σ (zw)^n/(t^{2n} n! Γ(ν+n)), i.e.
    w^{(ν-1)/2} z^{(1-ν)/2} t^{-1} e^{-(z+w)/t} I_{ν-1}(2√(zw)/t).
    Solutions built from it satisfy lim z^ν ∂z v = 0.
    """
    check_nu(nu)
    _check_positive(z=z, w=w, t=t)
    z, w, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (z, w, t)))
    x = 2.0 * np.sqrt(z * w) / t
    log_pref = 0.5 * (nu - 1.0) * (np.log(w) - np.log(z)) - np.log(t) - _gap_squared(z, w) / t
    out = np.exp(log_pref) * bessel_i_scaled(nu - 1.0, x, tol)
    return out if out.ndim else float(out)


def Q(nu: float, k: int, z: ArrayLike, w: ArrayLike, t: ArrayLike,
      tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    Extended kernel family Q_{ν+k}.

    q_{ν+k}(z, w, t), except when -ν ∈ ℕ and k >= 2-ν, where it is
    q_{2-ν-k}(w, z, t).
    """
    check_nu(nu)
    if k < 0:
        raise DomainError(f"k must be >= 0, got {k}")
    if is_negative_integer_index(nu):
        nu_int = int(round(nu))
        if k >= 2 - nu_int:
            return q_sigma(2 - nu_int - k, w, z, t, tol)
        return q_sigma(nu_int + k, z, w, t, tol)
    return q_sigma(nu + k, z, w, t, tol)


def dz_k_q(nu: float, k: int, z: ArrayLike, w: ArrayLike, t: ArrayLike,
           tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """
    k-th z-derivative of q_ν.

    ∂z^k q_ν = t^{-k} Σ_j C(k, j) (-1)^{k-j} Q_{ν+j}.
    """
    check_nu(nu)
    total = 0.0
    for j in range(k + 1):
        total = total + comb(k, j) * (-1) ** (k - j) * Q(nu, j, z, w, t, tol)
    return total / np.power(t, k)


def S_k(nu: float, k: int, z: ArrayLike, w: ArrayLike, t: ArrayLike,
        tol: EvalTolerance = DEFAULT_TOLERANCE) -> ArrayLike:
    """S_k = Σ_m C(k, m) Q_{ν+m}; the envelope of ∂z^k estimates."""
    check_nu(nu)
    total = 0.0
    for m in range(k + 1):
        total = total + comb(k, m) * Q(nu, m, z, w, t, tol)
    return total


def total_mass(nu: float, z: ArrayLike, t: ArrayLike) -> ArrayLike:
    """
    ∫_0^∞ q_ν(z, w, t) dw = γ(1-ν, z/t)/Γ(1-ν).

    This is the survival probability of the absorbed model process.
    """
    check_nu(nu)
    _check_positive(z=z, t=t)
    return special.gammainc(1.0 - nu, np.asarray(z, dtype=float) / np.asarray(t, dtype=float))


def q_upper_bound(sigma: float, z: ArrayLike, w: ArrayLike, t: ArrayLike) -> ArrayLike:
    """
    Explicit upper bound for |q_σ(z, w, t)|.

    σ < 1: c z^{1-σ}/t^{2-σ} e^{-(√z-√w)²/t}, c = max(1, 1/Γ(2-σ)).

    σ >= 1 (m = [σ-2], y = zw/t²): the sum of
    z^{1-σ}/t^{2-σ} (y ∨ 1)^{m+1} (m+2)!/Γ(4-σ+m) e^{-(z+w)/t}   and
    c2 z^{1-σ}/t^{2-σ} y^{m+2} e^{-(√z-√w)²/t},  c2 = max(1, 1/((m+2)! Γ(4+m-σ))).

    Args:
        sigma: Index, not in {2, 3, ...}
        z, w, t: Kernel arguments

    Returns:
        Bound, broadcast over array arguments
    """
    check_sigma(sigma)
    _check_positive(z=z, w=w, t=t)
    z, w, t = (np.asarray(v, dtype=float) for v in (z, w, t))
    log_base = (1.0 - sigma) * np.log(z) - (2.0 - sigma) * np.log(t)
    gauss = -_gap_squared(z, w) / t
    if sigma < 1:
        c = max(1.0, float(special.rgamma(2.0 - sigma)))
        out = c * np.exp(log_base + gauss)
    else:
        m = int(np.floor(sigma - 2.0))
        log_y = np.log(z) + np.log(w) - 2.0 * np.log(t)
        head_const = float(special.factorial(m + 2)) / float(special.gamma(4.0 - sigma + m))
        head = head_const * np.exp(log_base + (m + 1) * np.maximum(log_y, 0.0) - (z + w) / t)
        c2 = max(1.0, 1.0 / (float(special.factorial(m + 2)) * float(special.gamma(4.0 + m - sigma))))
        tail = c2 * np.exp(log_base + (m + 2) * log_y + gauss)
        out = head + tail
    return out if np.ndim(out) else float(out)


def Q_upper_bound(nu: float, k: int, z: ArrayLike, w: ArrayLike, t: ArrayLike) -> ArrayLike:
    """Upper bound for |Q_{ν+k}| following the same branch selection as Q."""
    if is_negative_integer_index(nu):
        nu_int = int(round(nu))
        if k >= 2 - nu_int:
            return q_upper_bound(2 - nu_int - k, w, z, t)
        return q_upper_bound(nu_int + k, z, w, t)
    return q_upper_bound(nu + k, z, w, t)


def gaussian_tail_integral(z: float, t: float, upper: float) -> float:
    """
    ∫_W^∞ e^{-(√w-√z)²/t} dw with W = upper², upper > √z.

    Substituting u = √w gives t e^{-(U-√z)²/t} + √(πt) √z erfc((U-√z)/√t).
    """
    gap = upper - sqrt(z)
    return t * np.exp(-gap * gap / t) + sqrt(pi * t) * sqrt(z) * erfc(gap / sqrt(t))


def _sample_sup(g: Callable[[float], float], lo: float, hi: float) -> float:
    grid = np.linspace(lo, hi, 33)
    return float(max(abs(g(v)) for v in grid))


def integrate_against(kernel: Callable[[float], float],
                      bound: Callable[[float], float],
                      g: Callable[[float], float],
                      z: float, t: float,
                      points=(),
                      epsabs: float = QUAD_EPSABS,
                      epsrel: float = QUAD_EPSREL,
                      limit: int = QUAD_LIMIT,
                      tail_sigmas: float = 12.0) -> QuadResult:
    """
    ∫_0^∞ kernel(w) g(w) dw with a certified truncation of the tail.

    The integral is cut at W = (√z + k√t)². The tail is bounded by
    sup|g| on [W, 4W] times the integral of the kernel bound beyond W;
    k is widened until the tail bound is negligible.

    Args:
        kernel: w -> kernel value
        bound: w -> upper bound of |kernel|
        g: Integrand weight
        z: Backward variable (centre of the kernel in √w)
        t: Time scale of the Gaussian decay
        points: Extra breakpoints for the adaptive rule
        epsabs, epsrel, limit: scipy.integrate.quad controls
        tail_sigmas: Initial cutoff width k

    Returns:
        QuadResult with value, quadrature error estimate and tail bound
    """
    k = tail_sigmas
    while True:
        upper = sqrt(z) + k * sqrt(t)
        cutoff = upper * upper
        g_sup = _sample_sup(g, cutoff, 4.0 * cutoff)
        if g_sup == 0.0:
            tail = 0.0
        else:
            tail_kernel, _ = integrate.quad(bound, cutoff, np.inf, limit=limit)
            tail = g_sup * tail_kernel
        if tail <= max(epsabs, 1e-300) or k >= 60:
            break
        k += 6.0

    breaks = sorted({p for p in points if 0 < p < cutoff})
    value, error, info = _quad(lambda v: kernel(v) * g(v), 0.0, cutoff, breaks,
                               epsabs, epsrel, limit)
    return QuadResult(value=value, error=error, tail_bound=tail)


def _quad(f, a, b, breaks, epsabs, epsrel, limit):
    value, error, info = integrate.quad(
        f, a, b, points=breaks or None, epsabs=epsabs, epsrel=epsrel,
        limit=limit, full_output=1)[:3]
    if error > max(1e3 * epsabs, 1e3 * epsrel * abs(value), 1e-8 * abs(value)):
        raise ConvergenceError(
            f"quadrature on [{a:.3g}, {b:.3g}] did not converge (error estimate {error:.3g})",
            estimate=value)
    if error > max(epsabs, epsrel * abs(value)):
        logger.debug(f"quadrature on [{a:.3g}, {b:.3g}] above target: {error:.3g}")
    return value, error, info


def v_g_detailed(nu: float, g: Callable[[float], float], z: float, t: float,
                 tol: EvalTolerance = DEFAULT_TOLERANCE) -> QuadResult:
    """v_g with its quadrature error and tail bound."""
    check_nu(nu)
    _check_positive(z=z, t=t)
    return integrate_against(
        lambda w: q_sigma(nu, z, w, t, tol),
        lambda w: q_upper_bound(nu, z, w, t),
        g, z, t, points=(z,))


def v_g(nu: float, g: Callable[[float], float], z: float, t: float,
        tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    Solution of the model equation with initial data g.

    v_g(z, t) = ∫_0^∞ q_ν(z, w, t) g(w) dw.

    Args:
        nu: Model index (< 1)
        g: Continuous initial data, at most exponential growth in √w
        z: Backward variable
        t: Time
        tol: Bessel series tolerances

    Returns:
        v_g(z, t)
    """
    return v_g_detailed(nu, g, z, t, tol).value


def dz_k_v_g(nu: float, k: int, g_k: Callable[[float], float], z: float, t: float,
             tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    k-th z-derivative of v_g from the k-th derivative of g.

    ∂z^k v_g = ∫_0^∞ Q_{ν+k}(z, w, t) g^{(k)}(w) dw.
    """
    check_nu(nu)
    _check_positive(z=z, t=t)
    result = integrate_against(
        lambda w: Q(nu, k, z, w, t, tol),
        lambda w: Q_upper_bound(nu, k, z, w, t),
        g_k, z, t, points=(z,))
    return result.value


def zero_flux_solution(nu: float, g: Callable[[float], float], z: float, t: float,
                       tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """v(z, t) = ∫ q*_ν(z, w, t) g(w) dw, the solution with zero flux at 0."""
    if not 0 < nu < 1:
        raise DomainError(f"zero-flux solutions need 0 < nu < 1, got {nu}")
    _check_positive(z=z, t=t)
    # q* ≈ q_ν for large w; the bound below only cuts the tail
    bound_const = 2.0
    result = integrate_against(
        lambda w: q_star(nu, z, w, t, tol),
        lambda w: bound_const * float(q_upper_bound(nu, z, w, t)) * (w / z + 1.0),
        g, z, t, points=(z,))
    return result.value


def check_conv_admissible(nu: float, k: int, l: int):
    """(ν non-integer and k <= [1-ν]) or -ν ∈ ℕ, with 0 <= l <= k."""
    check_nu(nu)
    if not 0 <= l <= k:
        raise DomainError(f"need 0 <= l <= k, got k={k}, l={l}")
    if is_negative_integer_index(nu):
        return
    if k > int(np.floor(1.0 - nu)):
        raise DomainError(f"(nu={nu}, k={k}) is not admissible: need k <= [1-nu]")


def conv_Q(nu: float, k: int, l: int, z: float, w: float, t: float, s: float,
           tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    ∫_0^∞ Q_{ν+k}(z, ξ, t) Q_{ν+l}(ξ, w, s) dξ by adaptive quadrature.
    """
    check_conv_admissible(nu, k, l)
    _check_positive(z=z, w=w, t=t, s=s)
    reach = max(sqrt(z), sqrt(w)) + 12.0 * sqrt(max(t, s))
    cutoff = reach * reach
    breaks = sorted({z, w})
    breaks = [p for p in breaks if p < cutoff]
    value, _, _ = _quad(lambda xi: Q(nu, k, z, xi, t, tol) * Q(nu, l, xi, w, s, tol),
                        0.0, cutoff, breaks, QUAD_EPSABS, 1e-11, QUAD_LIMIT)
    return value


def conv_Q_closed(nu: float, k: int, l: int, z: float, w: float, t: float, s: float,
                  tol: EvalTolerance = DEFAULT_TOLERANCE) -> float:
    """
    Closed form of conv_Q:
    (t+s)^{-(k-l)} Σ_j C(k-l, j) t^j s^{k-l-j} Q_{ν+l+j}(z, w, t+s).
    """
    check_conv_admissible(nu, k, l)
    _check_positive(z=z, w=w, t=t, s=s)
    d = k - l
    total = 0.0
    for j in range(d + 1):
        total += comb(d, j) * t ** j * s ** (d - j) * Q(nu, l + j, z, w, t + s, tol)
    return total / (t + s) ** d


def ck_residual_q(nu: float, z: float, w: float, t: float, s: float) -> float:
    """|q_ν(z, w, t+s) - ∫ q_ν(z, ξ, t) q_ν(ξ, w, s) dξ|."""
    return abs(q_sigma(nu, z, w, t + s) - conv_Q(nu, 0, 0, z, w, t, s))


def symmetry_residual_q(nu: float, z: ArrayLike, w: ArrayLike, t: ArrayLike) -> ArrayLike:
    """Relative residual of w^{1-ν} q_ν(z, w, t) = z^{1-ν} q_ν(w, z, t)."""
    left = np.asarray(w, dtype=float) ** (1.0 - nu) * q_sigma(nu, z, w, t)
    right = np.asarray(z, dtype=float) ** (1.0 - nu) * q_sigma(nu, w, z, t)
    return np.abs(left - right) / np.maximum(np.abs(left), np.abs(right))


def backward_residual_q(nu: float, z: float, w: float, t: float, h: float) -> float:
    """Central-difference residual of (∂t - z∂²z - ν∂z) q_ν at (z, w, t)."""
    q = lambda zz, tt: q_sigma(nu, zz, w, tt)
    dt = (q(z, t + h) - q(z, t - h)) / (2 * h)
    dz = (q(z + h, t) - q(z - h, t)) / (2 * h)
    dzz = (q(z + h, t) - 2 * q(z, t) + q(z - h, t)) / (h * h)
    return abs(dt - z * dzz - nu * dz)


def forward_residual_q(nu: float, z: float, w: float, t: float, h: float) -> float:
    """Central-difference residual of ∂t q - (w∂²w + (2-ν)∂w) q in the forward variable."""
    q = lambda ww, tt: q_sigma(nu, z, ww, tt)
    dt = (q(w, t + h) - q(w, t - h)) / (2 * h)
    dw = (q(w + h, t) - q(w - h, t)) / (2 * h)
    dww = (q(w + h, t) - 2 * q(w, t) + q(w - h, t)) / (h * h)
    return abs(dt - w * dww - (2.0 - nu) * dw)


def total_mass_quadrature(nu: float, z: float, t: float) -> QuadResult:
    """∫ q_ν(z, w, t) dw by quadrature, for comparison with total_mass."""
    return v_g_detailed(nu, lambda w: 1.0, z, t)
