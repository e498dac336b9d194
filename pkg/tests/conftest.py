import numpy as np
import pytest

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, idx=None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    positions = range(flat.size) if idx is None else idx
    out = np.zeros(len(positions))
    for j, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return out


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise relative error; ``floor`` guards entries near zero."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_grads(loss_fn, tensors, rng=None, max_entries=None, floor=1e-6):
    """Compare autodiff grads of ``loss_fn()`` against central differences.

    ``max_entries`` checks a random subset per tensor. Returns the worst error.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1).copy()
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = list((rng or np.random.default_rng(0)).choice(t.size, max_entries, replace=False))
        numeric = numeric_grad(lambda: loss_fn().item(), t.data, idx)
        worst = max(worst, rel_error(analytic if idx is None else analytic[idx], numeric, floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion lines collected by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
