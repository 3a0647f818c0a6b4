import numpy as np
import pytest

from dtl import autodiff as ad
from dtl.nn import MLP


@pytest.fixture(autouse=True)
def _fresh_counters():
    ad.counters.reset()
    yield


def random_mlp(seed, widths=(4, 6, 5), classes=3, task="t"):
    """Small MLP with non-trivial biases so ReLU kinks are unlikely to sit on a sample."""
    model = MLP.init(list(widths), {task: classes}, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name in model.names:
        if name.endswith("bias"):
            model.params[name] = rng.normal(scale=0.3, size=model.params[name].shape)
    return model


def random_batch(seed, n, d, k):
    rng = np.random.default_rng(seed + 2000)
    return rng.normal(size=(n, d)), rng.integers(0, k, size=n)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
