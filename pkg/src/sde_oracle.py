"""
SDE Oracle
Monte Carlo simulation of the absorbed model process

    dY = √(2|Y|) dB + (ν + d̃(Y)) dt,   Y frozen at 0 after it first reaches 0,

and of the general process X = ψ(Ỹ(φ(x), t)). Produces survival
probabilities, survivor histograms and hitting times, used as an
independent statistical check of the kernels.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import integrate, stats
from tqdm import tqdm

from src.errors import DomainError
from src.utils import resolve_threads


logger = logging.getLogger(__name__)

SCHEMES = ('lamperti', 'euler')
MIN_EXPECTED = 5.0


@dataclass
class SimConfig:
    """
    Discretisation and sampling parameters.

    Attributes:
        dt: Time step (the last step is shortened to land on t)
        n_paths: Number of paths
        seed: Master seed; block b draws from Philox(SeedSequence([seed, b]))
        absorb_below: Absorption threshold for Y
        bridge_correction: Kill survivors with the Brownian-bridge crossing probability
        block_size: Paths per random stream
        n_bins: Histogram bins (ignored when bin_edges is given)
        bin_edges: Explicit histogram edges in the output variable
        threads: Worker cap (None reads DEGENKERNEL_THREADS)
        scheme: 'lamperti' steps R = √Y (constant noise), 'euler' steps Y itself
        progress: Show a tqdm bar over blocks
    """
    dt: float = 1e-4
    n_paths: int = 100_000
    seed: int = 0
    absorb_below: float = 0.0
    bridge_correction: bool = True
    block_size: int = 4096
    n_bins: int = 40
    bin_edges: Optional[Sequence[float]] = None
    threads: Optional[int] = None
    scheme: str = 'lamperti'
    progress: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if int(self.n_paths) < 1:
            raise DomainError(f"n_paths must be >= 1, got {self.n_paths}")
        if not self.absorb_below >= 0:
            raise DomainError(f"absorb_below must be >= 0, got {self.absorb_below}")
        if int(self.block_size) < 1:
            raise DomainError(f"block_size must be >= 1, got {self.block_size}")
        if self.scheme not in SCHEMES:
            raise DomainError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.bin_edges is None and int(self.n_bins) < 1:
            raise DomainError(f"n_bins must be >= 1, got {self.n_bins}")
        self.n_paths = int(self.n_paths)
        self.block_size = int(self.block_size)
        self.seed = int(self.seed)


@dataclass
class SimResult:
    """
    Path statistics at time t.

    Histogram masses are fractions of all paths, so
    sum(bin_masses) + overflow = survival.
    """
    survival: float
    survival_se: float
    bin_edges: np.ndarray
    bin_masses: np.ndarray
    bin_se: np.ndarray
    overflow: float
    hitting_times: np.ndarray
    n_paths: int
    n_absorbed: int
    t: float
    space: str = 'z'
    config: Dict = field(default_factory=dict)

    @property
    def n_survivors(self) -> int:
        return self.n_paths - self.n_absorbed

    @property
    def absorbed_fraction(self) -> float:
        return self.n_absorbed / self.n_paths

    @property
    def mean_hitting_time(self) -> Optional[float]:
        if self.hitting_times.size == 0:
            return None
        return float(np.mean(self.hitting_times))

    def histogram_records(self) -> List[Dict]:
        """Rows (bin_lo, bin_hi, mass, se) for CSV output."""
        return [{'bin_lo': float(lo), 'bin_hi': float(hi), 'mass': float(m), 'se': float(se)}
                for lo, hi, m, se in zip(self.bin_edges[:-1], self.bin_edges[1:],
                                         self.bin_masses, self.bin_se)]

    def to_dict(self) -> Dict:
        return {
            'space': self.space,
            't': self.t,
            'n_paths': self.n_paths,
            'n_absorbed': self.n_absorbed,
            'survival': self.survival,
            'survival_se': self.survival_se,
            'absorbed_fraction': self.absorbed_fraction,
            'overflow': self.overflow,
            'mean_hitting_time': self.mean_hitting_time,
            'n_bins': int(self.bin_masses.size),
            'config': self.config,
        }


@dataclass
class _BlockOutcome:
    counts: np.ndarray
    overflow: int
    n_absorbed: int
    hitting_times: np.ndarray


class _Stepper:
    """One discretisation of the absorbed square-root diffusion."""

    def __init__(self, nu: float, d_tilde: Optional[Callable], cfg: SimConfig):
        self.nu = nu
        self.d_tilde = d_tilde
        self.cfg = cfg

    def mu(self, y: np.ndarray) -> np.ndarray:
        if self.d_tilde is None:
            return np.full_like(y, self.nu)
        return self.nu + np.asarray(self.d_tilde(y), dtype=float)

    def run(self, z0: float, t: float, n: int, rng: np.random.Generator,
            z_edges: np.ndarray) -> _BlockOutcome:
        cfg = self.cfg
        n_steps = max(1, int(np.ceil(t / cfg.dt - 1e-9)))
        h = t / n_steps
        b = cfg.absorb_below
        lamperti = cfg.scheme == 'lamperti'
        # state is R = √Y for the Lamperti scheme
        level = np.sqrt(b) if lamperti else b
        state = np.full(n, np.sqrt(z0) if lamperti else z0)
        alive = np.arange(n)
        hit = np.full(n, np.nan)

        if z0 <= b:
            return _BlockOutcome(np.zeros(len(z_edges) - 1, dtype=np.int64), 0, n, np.zeros(n))

        for step in range(n_steps):
            x = state[alive]
            noise = rng.standard_normal(x.size)
            if lamperti:
                drift = (self.mu(x * x) - 0.5) / (2.0 * x)
                new = x + drift * h + np.sqrt(0.5 * h) * noise
                var = np.full_like(x, 0.5)
            else:
                var = 2.0 * np.abs(x)
                new = x + self.mu(x) * h + np.sqrt(var * h) * noise
            killed = new <= level
            if cfg.bridge_correction:
                u = rng.random(x.size)
                with np.errstate(over='ignore', divide='ignore', invalid='ignore'):
                    cross = np.exp(-2.0 * (x - level) * (new - level) / (var * h))
                killed |= (~killed) & (u < np.nan_to_num(cross, nan=1.0))
            if killed.any():
                hit[alive[killed]] = (step + 1) * h
                state[alive[killed]] = 0.0
            state[alive[~killed]] = new[~killed]
            alive = alive[~killed]
            if alive.size == 0:
                break

        final = state[alive]
        y = final * final if lamperti else final
        counts, _ = np.histogram(y, bins=z_edges)
        overflow = int(np.sum(y >= z_edges[-1]) + np.sum(y < z_edges[0]))
        times = hit[~np.isnan(hit)]
        return _BlockOutcome(counts.astype(np.int64), overflow, n - alive.size, times)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def _simulate(nu: float, d_tilde: Optional[Callable], z0: float, t: float, cfg: SimConfig,
              z_edges: np.ndarray, out_edges: np.ndarray, space: str) -> SimResult:
    stepper = _Stepper(nu, d_tilde, cfg)
    sizes = [min(cfg.block_size, cfg.n_paths - start)
             for start in range(0, cfg.n_paths, cfg.block_size)]
    workers = min(resolve_threads(cfg.threads), len(sizes))

    def run_block(index: int) -> _BlockOutcome:
        return stepper.run(z0, t, sizes[index], _block_rng(cfg.seed, index), z_edges)

    logger.debug(f"Simulating {cfg.n_paths} paths in {len(sizes)} blocks on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map preserves block order, so the merge is independent of scheduling
        outcomes = list(tqdm(pool.map(run_block, range(len(sizes))), total=len(sizes),
                             desc="Simulating", disable=not cfg.progress))

    counts = np.sum([o.counts for o in outcomes], axis=0)
    overflow = sum(o.overflow for o in outcomes)
    n_absorbed = sum(o.n_absorbed for o in outcomes)
    hitting = np.concatenate([o.hitting_times for o in outcomes])

    n = cfg.n_paths
    survival = (n - n_absorbed) / n
    masses = counts / n
    result = SimResult(
        survival=float(survival),
        survival_se=float(np.sqrt(survival * (1.0 - survival) / n)),
        bin_edges=np.asarray(out_edges, dtype=float),
        bin_masses=masses,
        bin_se=np.sqrt(masses * (1.0 - masses) / n),
        overflow=overflow / n,
        hitting_times=hitting,
        n_paths=n,
        n_absorbed=int(n_absorbed),
        t=float(t),
        space=space,
        config={k: v for k, v in asdict(cfg).items() if k not in ('bin_edges', 'progress', 'threads')},
    )
    logger.info(f"Simulated {n} paths to t={t}: survival {result.survival:.6f} "
                f"± {result.survival_se:.2g}")
    return result


def _default_z_upper(z0: float, t: float) -> float:
    return (np.sqrt(z0) + 5.0 * np.sqrt(t)) ** 2


def simulate_model(nu: float, z0: float, t: float, cfg: SimConfig,
                   d_tilde: Optional[Callable] = None) -> SimResult:
    """
    Simulate Y from z0 up to time t.

    Args:
        nu: Drift constant of the model process (< 1)
        z0: Starting point (> 0)
        t: Horizon (> 0)
        cfg: Simulation parameters
        d_tilde: Optional extra drift z -> d̃(z), vectorised

    Returns:
        SimResult with the histogram in z
    """
    if not nu < 1:
        raise DomainError(f"nu must be < 1, got {nu}")
    if not (z0 > 0 and t > 0):
        raise DomainError("simulate_model needs z0 > 0 and t > 0")
    if cfg.bin_edges is not None:
        edges = np.asarray(cfg.bin_edges, dtype=float)
    else:
        edges = np.linspace(0.0, _default_z_upper(z0, t), cfg.n_bins + 1)
    return _simulate(nu, d_tilde, z0, t, cfg, edges, edges, 'z')


def simulate_general(gk, x0: float, t: float, cfg: SimConfig) -> SimResult:
    """
    Simulate X = ψ(Ỹ) from x0, with Ỹ started at φ(x0).

    φ is increasing, so X-bins are counted as Ỹ-bins with edges φ(edges).

    Args:
        gk: GeneralKernel or TransformBundle
        x0: Starting point (> 0)
        t: Horizon (> 0)
        cfg: Simulation parameters

    Returns:
        SimResult with the histogram in x
    """
    bundle = getattr(gk, 'bundle', gk)
    if not (x0 > 0 and t > 0):
        raise DomainError("simulate_general needs x0 > 0 and t > 0")
    z0 = float(bundle.phi(x0))
    if cfg.bin_edges is not None:
        x_edges = np.asarray(cfg.bin_edges, dtype=float)
    else:
        x_top = float(bundle.psi(_default_z_upper(z0, t)))
        x_edges = np.linspace(0.0, x_top, cfg.n_bins + 1)
    z_edges = np.zeros_like(x_edges)
    positive = x_edges > 0
    z_edges[positive] = bundle.phi(x_edges[positive])
    d_tilde = None if bundle.drift_free else bundle.d_tilde_fast
    return _simulate(bundle.nu, d_tilde, z0, t, cfg, z_edges, x_edges, 'x')


def kernel_bin_masses(density: Callable[[float], float], edges: Sequence[float]) -> np.ndarray:
    """∫ density over each bin [edges[i], edges[i+1]] by adaptive quadrature."""
    edges = np.asarray(edges, dtype=float)
    masses = np.empty(edges.size - 1)
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        value, _ = integrate.quad(lambda y: float(density(y)) if y > 0 else 0.0, lo, hi,
                                  epsabs=1e-12, epsrel=1e-10, limit=200)
        masses[i] = value
    return masses


def bins_within_se(result: SimResult, expected_masses: Sequence[float], k: float = 4.0) -> float:
    """Fraction of bins whose empirical mass lies within k standard errors of the expected one."""
    expected = np.asarray(expected_masses, dtype=float)
    se = np.sqrt(np.maximum(expected * (1.0 - expected), 0.0) / result.n_paths)
    band = k * np.maximum(se, result.bin_se) + 1.0 / result.n_paths
    return float(np.mean(np.abs(result.bin_masses - expected) <= band))


def _pool_small_bins(observed: np.ndarray, expected: np.ndarray):
    pooled_obs, pooled_exp = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= MIN_EXPECTED:
            pooled_obs.append(acc_o)
            pooled_exp.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and pooled_exp:
        pooled_obs[-1] += acc_o
        pooled_exp[-1] += acc_e
    return np.array(pooled_obs), np.array(pooled_exp)


def goodness_of_fit(result: SimResult, expected_masses: Sequence[float],
                    significance: float = 0.01) -> Dict:
    """
    Chi-square test of the survivor histogram against kernel bin masses.

    Expected counts are rescaled to the observed total; adjacent bins with
    expected count below 5 are pooled.

    Returns:
        Dictionary with statistic, p_value, dof, bins and reject
    """
    observed = np.rint(np.asarray(result.bin_masses) * result.n_paths)
    expected = np.asarray(expected_masses, dtype=float)
    if expected.shape != observed.shape:
        raise DomainError("expected_masses must match the histogram bins")
    if expected.sum() <= 0 or observed.sum() <= 0:
        raise DomainError("goodness_of_fit needs positive observed and expected mass")
    expected = expected * observed.sum() / expected.sum()
    obs, exp = _pool_small_bins(observed, expected)
    if obs.size < 2:
        raise DomainError("too few bins left after pooling")
    statistic, p_value = stats.chisquare(obs, exp)
    return {'statistic': float(statistic), 'p_value': float(p_value), 'dof': int(obs.size - 1),
            'bins': int(obs.size), 'reject': bool(p_value < significance)}
