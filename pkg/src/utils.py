"""
Utility Functions for Kernel Computation
Helpers for logging, grids, finite differences, divergence detection and data export
"""

import csv
import json
import logging
import os
from functools import lru_cache
from math import comb
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


THREADS_ENV = 'DEGENKERNEL_THREADS'


def format_number(value: float, precision: int = 17) -> str:
    """
    Format a float with the given significant digits (17 is lossless for doubles).

    Args:
        value: Number to format
        precision: Significant digits

    Returns:
        Decimal string; with 17 digits it parses back to the identical double
    """
    return format(float(value), f".{precision}g")


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """
    Create logarithmically spaced points.

    Args:
        lo: Smallest point (> 0)
        hi: Largest point
        n: Number of points

    Returns:
        Array of n points from lo to hi
    """
    return np.logspace(np.log10(lo), np.log10(hi), n)


def parse_grid_spec(spec: str) -> np.ndarray:
    """
    Parse a grid specification of the form ``lo:hi:n[:log]``.

    A single number is accepted as a one-point grid.

    Args:
        spec: Grid specification text

    Returns:
        Array of grid points
    """
    parts = spec.split(':')
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) not in (3, 4):
        raise ValueError(f"grid spec must be lo:hi:n[:log], got '{spec}'")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1:
        raise ValueError(f"grid spec needs n >= 1, got {n}")
    if n == 1:
        return np.array([lo])
    if len(parts) == 4:
        if parts[3] != 'log':
            raise ValueError(f"unknown grid spacing '{parts[3]}'")
        if lo <= 0:
            raise ValueError("log grid needs lo > 0")
        return log_grid(lo, hi, n)
    return np.linspace(lo, hi, n)


@lru_cache(maxsize=32)
def gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_legendre_on(a: float, b: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [a, b]."""
    nodes, weights = gauss_legendre(n)
    half = 0.5 * (b - a)
    return a + half * (nodes + 1.0), half * weights


def finite_difference(f: Callable[[float], float], x: float, k: int,
                      h: float, lower: float = 0.0) -> Tuple[float, int]:
    """
    k-th derivative of f at x by finite differences.

    Uses the central stencil x + (k - 2j)h, which is second order. When the
    stencil would reach ``lower`` the forward stencil x + jh is used instead
    and the reported order drops to 1.

    Args:
        f: Scalar function
        x: Evaluation point
        k: Derivative order
        h: Step
        lower: Left end of the domain of f

    Returns:
        Tuple of (derivative estimate, order of accuracy)
    """
    if k == 0:
        return float(f(x)), 2
    if x - k * h > lower:
        total = 0.0
        for j in range(k + 1):
            total += (-1) ** j * comb(k, j) * f(x + (k - 2 * j) * h)
        return total / (2.0 * h) ** k, 2
    total = 0.0
    for j in range(k + 1):
        total += (-1) ** (k - j) * comb(k, j) * f(x + j * h)
    return total / h ** k, 1


def oracle_step(z: float) -> float:
    """Finite-difference step h = max(1e-4, 1e-3 z) used by oracle comparisons."""
    return max(1e-4, 1e-3 * z)


def observed_order(hs: Sequence[float], errors: Sequence[float]) -> float:
    """
    Observed convergence order from errors at decreasing step sizes.

    Returns the smallest pairwise order log(e_i/e_{i+1})/log(h_i/h_{i+1}).
    """
    orders = []
    for i in range(len(hs) - 1):
        e0, e1 = abs(errors[i]), abs(errors[i + 1])
        if e1 == 0.0 or e0 == 0.0:
            continue
        orders.append(np.log(e0 / e1) / np.log(hs[i] / hs[i + 1]))
    return float(min(orders)) if orders else float('inf')


def classify_partial_sums(increments: Sequence[float],
                          decay_ratio: float = 0.999,
                          soft_ratio: float = 0.98,
                          threshold: float = 1e8,
                          window: int = 10) -> Dict:
    """
    Decide whether a series of nonnegative increments sums to a finite value.

    The increments come from integrating toward a singular endpoint over
    geometric node intervals (one increment per octave). The tail ratio is
    the geometric mean of consecutive ratios over the last ``window``
    increments.

    Args:
        increments: Per-interval contributions, ordered toward the endpoint
        decay_ratio: Tail ratio at or above which the sum is declared infinite
        soft_ratio: Tail ratio below which the sum is declared finite
        threshold: Partial sum beyond which slowly decaying tails count as divergent
        window: Number of trailing increments inspected

    Returns:
        Dictionary with 'verdict' ('finite', 'infinite', 'indeterminate'),
        'value' (partial sum, inf when infinite) and 'ratio'
    """
    inc = np.abs(np.asarray(increments, dtype=float))
    total = float(np.sum(inc)) if inc.size else 0.0
    if not np.all(np.isfinite(inc)) or not np.isfinite(total):
        return {'verdict': 'infinite', 'value': float('inf'), 'ratio': float('inf')}

    tail = inc[-window:]
    positive = tail[tail > 0]
    if positive.size < 2:
        # tail vanished entirely
        return {'verdict': 'finite', 'value': total, 'ratio': 0.0}
    ratios = positive[1:] / positive[:-1]
    ratio = float(np.exp(np.mean(np.log(ratios))))

    if ratio >= decay_ratio:
        return {'verdict': 'infinite', 'value': float('inf'), 'ratio': ratio}
    if ratio >= soft_ratio:
        if total > threshold:
            return {'verdict': 'infinite', 'value': float('inf'), 'ratio': ratio}
        return {'verdict': 'indeterminate', 'value': total, 'ratio': ratio}
    remainder = positive[-1] * ratio / (1.0 - ratio)
    return {'verdict': 'finite', 'value': total + float(remainder), 'ratio': ratio}


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    Number of worker threads to use.

    The environment variable DEGENKERNEL_THREADS caps the result.

    Args:
        requested: Requested thread count (None means one per CPU)

    Returns:
        Thread count >= 1
    """
    n = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            logging.getLogger(__name__).warning(
                f"Ignoring non-integer {THREADS_ENV}={cap!r}")
    return max(1, int(n))


def export_records_to_json(records: List[Dict], output_file: str):
    """
    Export result records to a JSON file.

    Args:
        records: List of record dictionaries
        output_file: Output JSON file path
    """
    with open(output_file, 'w', encoding='utf-8') as f:
        json.dump(records, f, indent=2, default=str)
        f.write('\n')


def export_records_to_csv(records: List[Dict], output_file: str,
                          fieldnames: Optional[List[str]] = None, precision: int = 17):
    """
    Export result records to a CSV file.

    Floats are written with 17 significant digits so the file re-reads
    bit-exactly.

    Args:
        records: List of record dictionaries
        output_file: Output CSV file path
        fieldnames: Column order (sorted union of keys if None)
    """
    if fieldnames is None:
        keys = set()
        for record in records:
            keys.update(record.keys())
        fieldnames = sorted(keys)

    with open(output_file, 'w', newline='', encoding='utf-8') as f:
        write_csv(records, f, fieldnames, precision)


def write_csv(records: List[Dict], stream, fieldnames: List[str], precision: int = 17):
    """Write records as CSV (header row, LF line endings) to an open stream."""
    writer = csv.DictWriter(stream, fieldnames=fieldnames,
                            lineterminator='\n', extrasaction='ignore')
    writer.writeheader()
    for record in records:
        writer.writerow({
            key: format_number(value, precision) if isinstance(value, (float, np.floating)) else value
            for key, value in record.items()
        })


def setup_logger(name: str, log_file: Optional[str] = None,
                 level: int = logging.INFO, console: bool = True) -> logging.Logger:
    """
    Setup logger with file and console handlers.

    Console output goes to stderr so that stdout stays free for results.

    Args:
        name: Logger name
        log_file: Optional log file path
        level: Logging level
        console: Attach a console handler

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger
