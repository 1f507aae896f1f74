import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def gradient_check(f, x, h=1e-3):
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor. The probe runs in ``x``'s dtype,
    so pass a float64 tensor for a tighter check.
    """
    leaf = Tensor._wrap(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.requires_grad:
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = np.zeros(leaf.data.size)
    flat = leaf.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(leaf).item()
            flat[i] = orig - h
            fm = f(leaf).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2 * h)
    return _rel_err(analytic.reshape(-1).astype(np.float64), numeric)


def gradient_check_params(loss_fn, params, h=1e-3, max_coords=None, rng=None):
    """Like :func:`gradient_check` but over the leaves ``params`` of a closure.

    ``loss_fn()`` must rebuild the loss from the current parameter values.
    With ``max_coords`` set, that many coordinates per parameter are probed,
    chosen by ``rng`` (a :class:`~dotfactor.rng.CounterRNG`).
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.permutation(flat.size)[:max_coords])
            numeric = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"loss non-finite near coordinate {i}")
                numeric[j] = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(analytic[coords].astype(np.float64), numeric))
    for p in params:
        p.grad = None
    return worst
