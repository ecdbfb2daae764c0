"""Shared test utilities: central finite-difference gradient checking."""
import numpy as np

from skillroute.tensor import Tensor


def finite_difference(fn, params, step=1e-5):
    """Central finite differences of a scalar-valued fn wrt each param tensor.

    fn is called with no arguments and must read the current .data of the
    given Tensors. Returns one gradient array per param.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def gradcheck(fn, params, step=1e-5, tol=1e-4, subsample=None, rng=None):
    """Assert analytic gradients of fn match central finite differences.

    If subsample is given, only that many randomly chosen coordinates per
    parameter are checked (the analytic pass is still full).
    """
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    loss = fn()
    loss.backward()
    analytic = [np.array(p.grad) for p in params]
    if subsample is None:
        numeric = finite_difference(fn, params, step=step)
        for a, n in zip(analytic, numeric):
            assert rel_err(a, n) < tol, f"gradcheck failed: rel err {rel_err(a, n)}"
        return
    rng = rng or np.random.default_rng(0)
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(subsample, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            ana = a.reshape(-1)[i]
            assert rel_err(ana, num) < tol, (
                f"gradcheck failed at coord {i}: analytic {ana}, numeric {num}")


def as_params(*arrays):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
            for a in arrays]
