import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` wrt array ``x`` (modified in place
    and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    """|a - b| / (|a| + |b|).  The floor keeps an exactly-zero gradient from
    turning central-difference round-off (about eps*|f|/h ~ 1e-11) into a
    large relative error."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b)
                 / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, passed, detail=""):
        line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        request.config._acceptance_lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
