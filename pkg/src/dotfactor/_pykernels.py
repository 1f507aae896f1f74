"""Pure numpy versions of the hot kernels (same contracts as ``_ckernels``)."""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64_fill(key, start, n):
    with np.errstate(over="ignore"):
        ctr = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(start)
        z = np.uint64(key) + ctr * GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    dt = p.dtype.type
    lr, b1, b2, eps, bc1, bc2 = (dt(s) for s in (lr, b1, b2, eps, bc1, bc2))
    m *= b1
    m += (dt(1) - b1) * g
    v *= b2
    v += (dt(1) - b2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def bce_logits(logits, target):
    l = logits.astype(np.float64)
    t = target.astype(np.float64)
    e = np.exp(-np.abs(l))
    loss = (np.maximum(l, 0.0) - t * l + np.log1p(e)).sum(axis=1)
    sig = np.where(l >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return loss, (sig - t).astype(logits.dtype)


def joint_counts(a, b, na, nb):
    flat = np.bincount(a * nb + b, minlength=na * nb)
    return flat.reshape(na, nb).astype(np.int64)
