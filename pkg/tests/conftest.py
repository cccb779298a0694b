"""Shared fixtures for the kernel test suite."""

import io
from pathlib import Path

import numpy as np
import pytest

from src.analyzer import KernelAnalyzer
from src.transform import Coefficients, TransformBundle


CONFIG_PATH = str(Path(__file__).resolve().parents[1] / 'config' / 'config.yaml')


@pytest.fixture(scope='session')
def config_path():
    return CONFIG_PATH


@pytest.fixture(scope='session')
def analyzer():
    """Analyzer on built-in defaults, shared so kernels stay cached."""
    return KernelAnalyzer(None)


@pytest.fixture(scope='session')
def heat_bundle():
    return TransformBundle(Coefficients.heat())


@pytest.fixture(scope='session')
def example4_bundle():
    return TransformBundle(Coefficients.linear_half_drift())


@pytest.fixture(scope='session')
def power_bundle():
    """Factory: bundle of a = x^alpha, cached per alpha."""
    cache = {}

    def make(alpha):
        if alpha not in cache:
            cache[alpha] = TransformBundle(Coefficients.power_family(alpha))
        return cache[alpha]
    return make


@pytest.fixture(scope='session')
def drift_coeffs():
    """a = x, b = x^2 exp(-x), with analytic derivatives."""
    return Coefficients.power_drift_family(
        1.0, 2.0,
        lambda x: np.exp(-np.asarray(x, dtype=float)),
        lambda x: -np.exp(-np.asarray(x, dtype=float)))


@pytest.fixture(scope='session')
def drift_bundle(drift_coeffs):
    return TransformBundle(drift_coeffs)


@pytest.fixture
def run_cli(config_path):
    """Run the CLI in-process; returns (exit code, stdout text)."""
    from src.cli import main

    def run(*argv):
        out = io.StringIO()
        code = main(['--config', config_path, *argv], out=out)
        return code, out.getvalue()
    return run
