import math

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def _log_beta_fn(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def beta_logpdf(x, a, b):
    """Beta log-density from the standard library's lgamma; independent of the package."""
    return (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - _log_beta_fn(a, b)


def beta_pdf(x, a, b):
    return np.exp(beta_logpdf(x, a, b))


def kl_by_quadrature(p, q, n=400_001, t_max=250.0):
    """KL(Beta(p) || Beta(q)) by the trapezoid rule.

    Integrates in t with x = 1 / (1 + exp(-2t)), so log x and log(1 - x) are
    exact even where x is within 1e-100 of an endpoint; small shape
    parameters put real mass there.
    """
    t = np.linspace(-t_max, t_max, n)
    log_x = -np.logaddexp(0.0, -2.0 * t)
    log_1mx = -np.logaddexp(0.0, 2.0 * t)
    (a, b), (c, d) = p, q
    lp = (a - 1) * log_x + (b - 1) * log_1mx - _log_beta_fn(a, b)
    lq = (c - 1) * log_x + (d - 1) * log_1mx - _log_beta_fn(c, d)
    jac = np.log(2.0) + log_x + log_1mx
    return float(np.trapezoid(np.exp(lp + jac) * (lp - lq), t))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def _record(criterion, passed, detail):
        verdict = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{criterion}] {verdict}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s[1 : s.index("]")].split(".")[0])):
            terminalreporter.write_line(line)
