import numpy as np
import pytest

from iclgd.numerics import make_rng
from iclgd.taskgen import TaskConfig, generate_batch


def random_batch(d=3, C=5, n=20, count=16, seed=0):
    return generate_batch(TaskConfig(d, C, n), make_rng(seed), count)


@pytest.fixture
def batch():
    return random_batch()


@pytest.fixture
def rng():
    return make_rng(1234)


def random_weights(D, rng, scale=0.5):
    from iclgd.attention import AttentionWeights
    return AttentionWeights(*(rng.standard_normal((D, D)) * scale for _ in range(4)))


def assert_close(a, b, tol):
    assert np.max(np.abs(np.asarray(a) - np.asarray(b))) <= tol


def finite_difference_check(kind, params, batch, names, h=1e-5, rtol=1e-4, atol=1e-9):
    """Largest violation of |fd - g| <= rtol * max(|fd|, |g|) + atol (<= 0 means pass)."""
    from iclgd.training import loss_and_grad
    _, grads = loss_and_grad(kind, params, batch)
    worst = -np.inf
    for k in names:
        v = params[k]
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp, _ = loss_and_grad(kind, params, batch)
            v[idx] = old - h
            lm, _ = loss_and_grad(kind, params, batch)
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            g = grads[k][idx]
            worst = max(worst, abs(fd - g) - (rtol * max(abs(fd), abs(g)) + atol))
    return worst


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
