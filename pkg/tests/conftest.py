import numpy as np
import pytest

from handtcl.hand import default_template
from handtcl.synth import SynthConfig, generate_sequences


@pytest.fixture(scope="session")
def tmpl():
    return default_template()


@pytest.fixture(scope="session")
def small_sequences():
    """Four short default-style sequences, shared across tests (do not mutate)."""
    return generate_sequences(4, SynthConfig(n_frames=40), seed=123)


def central_diff(f, x, h):
    """Numerical gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        name, passed, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if passed else 'FAIL'} | {detail}")
