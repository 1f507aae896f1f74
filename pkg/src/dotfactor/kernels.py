"""Kernel backend selection.

The compiled extension (``dotfactor._ckernels``) is used when it imports;
otherwise the numpy implementations in ``dotfactor._pykernels`` are used.
Set ``DOTFACTOR_KERNELS=python`` to force the fallback.

All kernels share one contract per function:

``splitmix64_fill(key, start, n)``
    uint64 outputs ``mix(key + (start + i + 1) * 0x9E3779B97F4A7C15)`` for
    ``i < n`` (SplitMix64 finaliser).
``adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2)``
    In-place bias-corrected Adam on flat contiguous arrays.
``bce_logits(logits, target)``
    Per-row summed Bernoulli cross-entropy (float64) and its gradient.
``joint_counts(a, b, na, nb)``
    Contingency table of two int64 label arrays.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DOTFACTOR_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels


def use_backend(name):
    """Switch backend at runtime ('compiled' or 'python'); returns previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl, BACKEND = _pykernels, "python"
    elif name == "compiled":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "compiled"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def splitmix64_fill(key, start, n):
    return _impl.splitmix64_fill(int(key), int(start), int(n))


def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    dt = p.dtype.type
    _impl.adam_update(
        p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
        m.reshape(-1), v.reshape(-1),
        dt(lr), dt(b1), dt(b2), dt(eps), dt(bc1), dt(bc2),
    )


def bce_logits(logits, target):
    logits = np.ascontiguousarray(logits)
    target = np.ascontiguousarray(target, dtype=logits.dtype)
    return _impl.bce_logits(logits, target)


def joint_counts(a, b, na, nb):
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    return _impl.joint_counts(a, b, int(na), int(nb))
