from pathlib import Path

import numpy as np
import pytest

from vmrec import kernels
from vmrec.numerics import RngStream

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
_ACCEPTANCE = pytest.StashKey[list]()


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` wrt every entry of array ``x`` (restored afterwards)."""
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


def rel_err(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture(params=sorted(kernels.backends()))
def kernel_impl(request):
    return kernels.backends()[request.param]


class Criterion:
    """Records one acceptance line; ``check`` asserts, ``soft`` only warns."""

    def __init__(self, lines, name):
        self.lines, self.name, self.done = lines, name, False

    def _record(self, status, detail):
        line = f"[{status}] {self.name}: {detail}"
        self.lines.append(line)
        self.done = True
        print(line)

    def check(self, ok, detail):
        self._record("PASS" if ok else "FAIL", detail)
        assert ok, detail

    def soft(self, ok, detail):
        self._record("PASS" if ok else "WARN", detail)
        if not ok:
            import warnings

            warnings.warn(f"{self.name}: {detail}", UserWarning)


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    made = []

    def make(name):
        c = Criterion(lines, name)
        made.append(c)
        return c

    yield make
    for c in made:
        if not c.done:
            c._record("FAIL", "did not complete")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
