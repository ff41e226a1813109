import numpy as np
import pytest

from reweightdp.autograd import Tape, backward, param_grads


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def single_example_grads(model, x, y):
    """Oracle: a fresh forward and backward pass for each example alone."""
    out = []
    for i in range(len(y)):
        tape = Tape()
        loss = model.losses(tape, x[i:i + 1], y[i:i + 1], cache=False).sum()
        out.append(param_grads(tape, backward(tape, loss)))
    return out


def oracle_norms(model, x, y):
    grads = single_example_grads(model, x, y)
    return np.array([np.sqrt(sum(float(np.vdot(g, g)) for g in gm.values())) for gm in grads])


def finite_diff(f, x, h=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
