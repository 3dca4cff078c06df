import numpy as np
import pytest

from arplan.nn import Params
from arplan.tensor import Tensor


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an ndarray."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_param_grads(params: Params, loss_fn, names=None, eps: float = 1e-5,
                      tol: float = 1e-4, atol: float = 1e-6):
    """Backprop vs central finite differences for every named parameter.

    Elementwise |analytic - numeric| <= atol + tol * |numeric|; the absolute
    floor absorbs finite-difference roundoff on directions with exactly zero
    true gradient (e.g. shift-invariant softmax inputs).
    """
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else
                    np.zeros_like(t.data)) for n, t in params.items()}
    for name in (names or params.keys()):
        t = params[name]

        def f(_x, t=t):
            return float(loss_fn().data)

        numeric = fd_grad(f, t.data, eps=eps)
        a, b = analytic[name], numeric
        bad = np.abs(a - b) > atol + tol * np.abs(b)
        assert not bad.any(), (
            f"gradient mismatch for {name}: max abs diff "
            f"{np.abs(a - b).max():.2e}, rel err {rel_err(a, b):.2e}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tparam(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
