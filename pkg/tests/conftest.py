import numpy as np
import pytest

from warpmc.core import RngStream, SystemSpec
from warpmc.systems import bead_chain


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end test")


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture
def chain5():
    """Five-bead 3-D chain with every term type present."""
    return bead_chain((0, 1, 2, 3, 1))


@pytest.fixture
def chain4_2d():
    return bead_chain((0, 1, 2, 0), dimension=2)


def random_conformation(system: SystemSpec, rng, jitter=0.05):
    from warpmc.systems import build_chain

    return build_chain(system) + jitter * rng.normal((system.n_atoms, system.dimension))


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# acceptance criteria report ------------------------------------------------------

ACCEPTANCE = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    """record(n, ok, detail): store one criterion verdict for the end-of-run summary."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
