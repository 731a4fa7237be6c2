import numpy as np
import pytest

from sgtsne import graph_core


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_joint(rng, n, deg=6):
    rows = np.repeat(np.arange(n), deg)
    cols = (rows + rng.integers(1, n, size=rows.size)) % n
    Pc = graph_core.SparseConditionalMatrix.from_triplets(n, rows, cols, rng.random(rows.size) + 0.05)
    return Pc, graph_core.symmetrize(Pc)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(k, ok, detail)`` prints and records one acceptance line, then asserts."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(k, ok, detail):
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
