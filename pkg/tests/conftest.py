import numpy as np
import pytest

from unimatch import autodiff as ad


def finite_difference(f, arrays, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    `f` takes the arrays (numpy) and returns a float.  Returns one gradient
    array per input.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*arrays)
            flat[j] = orig - h
            fm = f(*arrays)
            flat[j] = orig
            gf[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build_loss, params, tol=1e-4, h=1e-5):
    """Compare tape gradients of build_loss(*tensors) against central FD."""
    tensors = [ad.parameter(p.copy()) for p in params]
    with ad.Tape():
        loss = build_loss(*tensors)
        gs = ad.grad(loss, tensors)
    analytic = [g.value.copy() for g in gs]

    def f(*arrays):
        consts = [ad.constant(a) for a in arrays]
        with ad.Tape():
            return float(build_loss(*consts).value)

    numeric = finite_difference(f, [p.copy() for p in params], h=h)
    worst = max(rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel error {worst:.3e}"
    return worst


def model_fd_check(loss_fn, params, tol=1e-4, h=1e-5, max_entries=6, seed=0):
    """FD-check in-place parameters against tape gradients of loss_fn().

    loss_fn rebuilds the loss from scratch (deterministically) using the
    given parameter tensors; a random subset of entries per parameter is
    probed when the parameter is large.
    """
    rng_local = np.random.default_rng(seed)
    with ad.Tape():
        loss = loss_fn()
        gs = ad.grad(loss, params)
    analytic = [g.value.copy() for g in gs]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        if flat.size <= max_entries:
            idxs = range(flat.size)
        else:
            idxs = rng_local.choice(flat.size, size=max_entries, replace=False)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(loss_fn().value)
            flat[j] = orig - h
            fm = float(loss_fn().value)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, rel_error(gflat[j], fd, floor=1e-4))
    assert worst < tol, f"model gradient mismatch: max rel error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
