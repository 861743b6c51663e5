import numpy as np
import pytest

from khgrec import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build, params, h=1e-5):
    """Compare tape gradients of ``build() -> scalar Tensor`` against finite differences.

    Returns the worst relative error over ``params`` (a list of Tensors).
    """
    with ad.Tape() as tape:
        loss = build()
    grads = tape.gradient(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: float(build().value), p.value, h)
        worst = max(worst, rel_error(g, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
