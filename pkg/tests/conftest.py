import numpy as np
import pytest

from perfquant.model import KineticParams, SampledCurve, gamma_variate


def uniform_curve(values, dt, kind="aif"):
    values = np.asarray(values, dtype=float)
    return SampledCurve(np.arange(values.size) * dt, values, kind)


@pytest.fixture
def gamma_aif():
    """Gamma-variate plasma AIF, 0.5 s sampling over 90 s."""
    t = np.arange(0.0, 90.0 + 1e-9, 0.5)
    return SampledCurve(t, gamma_variate(t), "aif")


@pytest.fixture
def coarse_aif():
    """Gamma-variate plasma AIF sampled at 1 s for 90 samples."""
    t = np.arange(90.0)
    return SampledCurve(t, gamma_variate(t), "aif")


@pytest.fixture
def reference_params():
    return KineticParams(Fp=1.0, vp=0.08, ve=0.18, PS=0.65, delay=0.0)


def rpca_benchmark(seed=0, m=200, n=50, fraction=0.05):
    """Rank-2 matrix of smooth outer products plus large sparse spikes."""
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, m)
    y = np.linspace(0, 1, n)
    L = np.outer(np.sin(2 * np.pi * x) + 1.5, np.cos(np.pi * y) + 2) + np.outer(
        x**2, np.exp(-y))
    S = np.zeros((m, n))
    k = int(round(fraction * m * n))
    idx = rng.choice(m * n, size=k, replace=False)
    S.flat[idx] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(5, 10, size=k)
    return L, S


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per criterion; the lines are repeated in the terminal summary."""

    def report(number, passed, detail):
        line = f"ACCEPTANCE C{number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
