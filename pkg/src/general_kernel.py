"""
General Kernel
Fundamental solution of ∂t u = a ∂²x u + b ∂x u on (0, ∞) with absorption at 0,

    p(x, y, t) = q_ν^V(φ(x), φ(y), t) · θ(φ(x))/θ(φ(y)) · φ'(y),

its approximants, the solutions u_f and the consistency residuals.
"""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np

from src.duhamel import KernelValue, PotentialKernel, ck_residual_qV
from src.errors import DomainError
from src.model_kernel import S_k, check_conv_admissible, integrate_against, q_sigma, q_upper_bound
from src.specfun import DEFAULT_TOLERANCE, EvalTolerance, touchard
from src.transform import Coefficients, TransformBundle
from src.utils import finite_difference, gauss_legendre, oracle_step


logger = logging.getLogger(__name__)


class GeneralKernel:
    """
    p(x, y, t) assembled from a TransformBundle and its potential kernel.

    Immutable after construction; evaluations are pure.
    """

    def __init__(self, bundle: TransformBundle, pk: Optional[PotentialKernel] = None,
                 order: Optional[int] = None, quad_options: Optional[Dict] = None,
                 tol: EvalTolerance = DEFAULT_TOLERANCE):
        """
        Args:
            bundle: Transform bundle of the coefficient pair
            pk: Potential kernel (built from the bundle when None)
            order: Fixed Duhamel order (None picks it per t from the tail bound)
            quad_options: epsabs, epsrel, limit and tail_sigmas for u_f
            tol: Bessel series tolerances for the model kernel
        """
        self.logger = logging.getLogger(__name__)
        self.bundle = bundle
        self.pk = pk if pk is not None else PotentialKernel.from_bundle(bundle, order=order)
        if abs(self.pk.nu - bundle.nu) > 1e-12:
            raise DomainError(f"potential kernel index {self.pk.nu} differs from bundle nu {bundle.nu}")
        self.nu = bundle.nu
        self.quad_options = dict(quad_options or {})
        self.tol = tol

    @classmethod
    def from_coefficients(cls, coeffs: Coefficients, order: Optional[int] = None,
                          **bundle_options) -> 'GeneralKernel':
        return cls(TransformBundle(coeffs, **bundle_options), order=order)

    @property
    def coeffs(self) -> Coefficients:
        return self.bundle.coeffs

    @staticmethod
    def _check(**values):
        for name, value in values.items():
            if not np.all(np.asarray(value, dtype=float) > 0):
                raise DomainError(f"{name} must be positive")

    def _gauge(self, x, y):
        """θ(φ(x))/θ(φ(y)) · φ'(y)."""
        b = self.bundle
        return np.exp(b.log_theta_x(x) - b.log_theta_x(y)) * b.phi_prime(y)

    def p(self, x: float, y: float, t: float, order: Optional[int] = None) -> KernelValue:
        """
        p(x, y, t) with its Duhamel truncation bound and quadrature estimate.

        Args:
            x: Backward point
            y: Forward point
            t: Time
            order: Duhamel order (default per t)

        Returns:
            KernelValue scaled by the gauge factor
        """
        self._check(x=x, y=y, t=t)
        b = self.bundle
        kv = self.pk.evaluate(float(b.phi(x)), float(b.phi(y)), t, order)
        return kv.scaled(float(self._gauge(x, y)))

    def p_many_x(self, x, y: float, t: float, order: Optional[int] = None) -> List[KernelValue]:
        """p(x_i, y, t) for many backward points."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self._check(x=x, y=y, t=t)
        b = self.bundle
        values = self.pk.evaluate_many(b.phi(x), float(b.phi(y)), t, order)
        gauge = self._gauge(x, np.full_like(x, y))
        return [kv.scaled(float(g)) for kv, g in zip(values, gauge)]

    def p_many_y(self, x: float, y, t: float, order: Optional[int] = None) -> List[KernelValue]:
        """
        p(x, y_i, t) for many forward points, through the symmetry
        q^V(z, w, t) = (z/w)^{1-ν} q^V(w, z, t).
        """
        y = np.atleast_1d(np.asarray(y, dtype=float))
        self._check(x=x, y=y, t=t)
        b = self.bundle
        z, w = float(b.phi(x)), b.phi(y)
        values = self.pk.evaluate_many(w, z, t, order)
        factor = (z / w) ** (1.0 - self.nu) * self._gauge(np.full_like(y, x), y)
        return [kv.scaled(float(f)) for kv, f in zip(values, factor)]

    def p_approx(self, x: float, y: float, t: float) -> float:
        """q_ν in place of q_ν^V."""
        self._check(x=x, y=y, t=t)
        b = self.bundle
        return float(q_sigma(self.nu, b.phi(x), b.phi(y), t, self.tol) * self._gauge(x, y))

    def p_approx_k(self, k: int, x: float, y: float, t: float) -> float:
        """Order-k partial Duhamel sum in place of q_ν^V."""
        if k < 0:
            raise DomainError(f"k must be >= 0, got {k}")
        return self.p(x, y, t, order=k).value

    def ratio_bound(self, t: float) -> float:
        """|p/p_approx - 1| <= e^{‖V‖t} - 1."""
        return self.pk.ratio_bound(t)

    def u_f(self, f: Callable[[float], float], x: float, t: float) -> float:
        """
        u_f(x, t) = ∫_0^∞ p(x, y, t) f(y) dy.

        Computed in w = φ(y), where it reads ∫ q^V(φ(x), w, t) θ(φ(x))/θ(w) f(ψ(w)) dw;
        the tail beyond the cutoff is bounded through q_upper_bound.
        """
        self._check(x=x, t=t)
        b = self.bundle
        z = float(b.phi(x))
        log_theta_z = float(b.log_theta_x(x))

        def kernel(w):
            if self.pk.V_sup == 0:
                return float(q_sigma(self.nu, z, w, t, self.tol))
            # symmetry keeps (z, t) as the memoised pair
            return (z / w) ** (1.0 - self.nu) * self.pk.evaluate(w, z, t).value

        def g(w):
            y = b.psi(w)
            weight = 1.0 if b.drift_free else np.exp(log_theta_z - float(b.log_theta_x(y)))
            return weight * float(f(y))

        if self.pk.V_sup > 0:
            reach = (np.sqrt(z) + 24.0 * np.sqrt(t)) ** 2
            self.pk.evaluate_many(np.geomspace(1e-10, reach, 64), z, t)

        growth = float(np.exp(t * self.pk.V_sup))
        result = integrate_against(kernel, lambda w: growth * float(q_upper_bound(self.nu, z, w, t)),
                                   g, z, t, points=(z,), **self.quad_options)
        self.logger.debug(f"u_f({x}, {t}) = {result.value:.17g} "
                          f"(quad {result.error:.3g}, tail {result.tail_bound:.3g})")
        return result.value

    def symmetry_weight(self, u):
        """m(u) = φ(u)^{1-ν} θ(φ(u))² / φ'(u)."""
        b = self.bundle
        return b.phi(u) ** (1.0 - self.nu) * np.exp(2.0 * b.log_theta_x(u)) / b.phi_prime(u)

    def symmetry_residual(self, x: float, y: float, t: float, order: Optional[int] = None) -> float:
        """|m(y) p(x, y, t) - m(x) p(y, x, t)|."""
        left = float(self.symmetry_weight(y)) * self.p(x, y, t, order).value
        right = float(self.symmetry_weight(x)) * self.p(y, x, t, order).value
        return abs(left - right)

    def _u_quadrature(self, x: float, y: float, t: float, s: float,
                      panels: int = 10, nodes: int = 24):
        """Nodes u_i and weights for ∫ du, laid out in √φ(u)."""
        b = self.bundle
        reach = max(np.sqrt(b.phi(x)), np.sqrt(b.phi(y))) + 10.0 * np.sqrt(max(t, s))
        edges = np.linspace(0.0, reach, panels + 1)
        g, wt = gauss_legendre(nodes)
        half = 0.5 * np.diff(edges)
        r = (edges[:-1, None] + half[:, None] * (g + 1.0)).ravel()
        xi = r * r
        u = b.psi(xi)
        weights = (half[:, None] * wt).ravel() * 2.0 * r / b.phi_prime(u)
        return u, weights

    def ck_residual(self, x: float, y: float, t: float, s: float,
                    order: Optional[int] = None) -> float:
        """|p(x, y, t+s) - ∫ p(x, u, t) p(u, y, s) du|."""
        self._check(x=x, y=y, t=t, s=s)
        u, weights = self._u_quadrature(x, y, t, s)
        first = np.array([kv.value for kv in self.p_many_y(x, u, t, order)])
        second = np.array([kv.value for kv in self.p_many_x(u, y, s, order)])
        integral = float(np.sum(weights * first * second))
        return abs(self.p(x, y, t + s, order).value - integral)

    def ck_residual_transformed(self, x: float, y: float, t: float, s: float) -> float:
        """CK residual of q^V at (φ(x), φ(y)) scaled by the gauge factor."""
        b = self.bundle
        return float(self._gauge(x, y)) * ck_residual_qV(self.pk, float(b.phi(x)),
                                                         float(b.phi(y)), t, s)

    def pde_residual_backward(self, x: float, y: float, t: float, h: float,
                              order: Optional[int] = None) -> float:
        """|(∂t - a(x)∂²x - b(x)∂x) p| by finite differences in x and t."""
        self._check(x=x, y=y, t=t)
        if not 0 < h < t:
            raise DomainError(f"need 0 < h < t, got h={h}")
        xs, one_sided = _stencil(x, h)
        values = np.array([kv.value for kv in self.p_many_x(xs, y, t, order)])
        d1, d2 = _derivatives(values, h, one_sided)
        dt = (self.p(x, y, t + h, order).value - self.p(x, y, t - h, order).value) / (2 * h)
        a, bx = float(self.coeffs.a_at(x)), float(self.coeffs.b_at(x))
        return abs(dt - a * d2 - bx * d1)

    def pde_residual_forward(self, x: float, y: float, t: float, h: float,
                             order: Optional[int] = None) -> float:
        """|∂t p - ∂²y(a p) + ∂y(b p)| by finite differences in y and t."""
        self._check(x=x, y=y, t=t)
        if not 0 < h < t:
            raise DomainError(f"need 0 < h < t, got h={h}")
        ys, one_sided = _stencil(y, h)
        p = np.array([kv.value for kv in self.p_many_y(x, ys, t, order)])
        ap = self.coeffs.a_at(ys) * p
        bp = self.coeffs.b_at(ys) * p
        _, d2_ap = _derivatives(ap, h, one_sided)
        d1_bp, _ = _derivatives(bp, h, one_sided)
        dt = (self.p(x, y, t + h, order).value - self.p(x, y, t - h, order).value) / (2 * h)
        return abs(dt - d2_ap + d1_bp)

    def p_derivative_bound_check(self, k: int, M: float, t: float, n_grid: int = 6,
                                 order: Optional[int] = None) -> Dict:
        """
        Check |∂x^k p| <= C^θ 𝔗_k(C^φ) e^{3^k C_k^V t} (1/t + k + 1)^k S_k(φx, φy, t) |φ'(y)|/θ(φy)
        on a geometric grid in (0, M)².

        Returns:
            Dictionary with pass, worst_point, worst_ratio and the constants used
        """
        check_conv_admissible(self.nu, k, 0)
        b = self.bundle
        c_theta = b.theta_derivative_sup(k, float(b.phi(M)))
        c_phi = b.phi_derivative_sup(k, M)
        c_v = self.pk.C_k(k)
        prefactor = c_theta * touchard(k, c_phi) * np.exp(3 ** k * c_v * t) * (1.0 / t + k + 1.0) ** k

        grid = np.geomspace(M * 1e-2, M * (1.0 - 1e-3), n_grid)
        worst_ratio, worst_point = 0.0, None
        for x in grid:
            h = oracle_step(x)
            for y in grid:
                lhs, _ = finite_difference(lambda xx: self.p(xx, y, t, order).value, x, k, h)
                rhs = prefactor * float(S_k(self.nu, k, b.phi(x), b.phi(y), t)) \
                    * abs(float(b.phi_prime(y))) / float(b.theta_of_x(y))
                ratio = abs(lhs) / rhs if rhs > 0 else float('inf')
                if ratio > worst_ratio:
                    worst_ratio, worst_point = ratio, (float(x), float(y))
        passed = worst_ratio <= 1.0 + 1e-6
        self.logger.info(f"p derivative bound k={k}, M={M}, t={t}: worst ratio {worst_ratio:.4g}")
        return {'pass': bool(passed), 'worst_point': worst_point, 'worst_ratio': float(worst_ratio),
                'grid': [float(v) for v in grid], 'C_theta': float(c_theta),
                'C_phi': float(c_phi), 'C_k_V': float(c_v)}


def _stencil(x: float, h: float):
    """Points for first/second derivatives; forward stencil when x < 3h."""
    if x < 3 * h:
        return x + h * np.arange(4.0), True
    return x + h * np.array([-1.0, 0.0, 1.0]), False


def _derivatives(values: np.ndarray, h: float, one_sided: bool):
    if one_sided:
        f0, f1, f2, f3 = values
        return (-3 * f0 + 4 * f1 - f2) / (2 * h), (2 * f0 - 5 * f1 + 4 * f2 - f3) / (h * h)
    down, centre, up = values
    return (up - down) / (2 * h), (up - 2 * centre + down) / (h * h)


def p(gk: GeneralKernel, x: float, y: float, t: float) -> KernelValue:
    """p(x, y, t) for a general kernel."""
    return gk.p(x, y, t)


def p_approx(gk: GeneralKernel, x: float, y: float, t: float) -> float:
    return gk.p_approx(x, y, t)


def p_approx_k(gk: GeneralKernel, k: int, x: float, y: float, t: float) -> float:
    return gk.p_approx_k(k, x, y, t)


def u_f(gk: GeneralKernel, f: Callable[[float], float], x: float, t: float) -> float:
    return gk.u_f(f, x, t)
