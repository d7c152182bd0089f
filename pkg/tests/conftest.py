import numpy as np
import pytest

from damoe import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference(f, params, step=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each parameter node."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            orig = p.data[ij]
            p.data[ij] = orig + step
            f_plus = f()
            p.data[ij] = orig - step
            f_minus = f()
            p.data[ij] = orig
            g[ij] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-2):
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def check_gradients(build_loss, params, rtol=1e-4, step=1e-5):
    """Compare tape gradients of build_loss() against central differences.

    ``build_loss`` must rebuild the loss from the *current* parameter data
    each call (forward passes under perturbed parameters drive the oracle).
    """
    ad.clear_tape()
    for p in params:
        p.zero_grad()
    loss = build_loss()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in params]
    ad.clear_tape()

    def f():
        with ad.no_grad():
            return float(build_loss().data[0, 0])

    numeric = finite_difference(f, params, step=step)
    err = max_relative_error(analytic, numeric)
    assert err < rtol, f"gradient mismatch: max relative error {err:.3e} >= {rtol}"
    return err
