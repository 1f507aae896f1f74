import numpy as np
import pytest

from dotfactor import _pykernels, kernels
from dotfactor.rng import CounterRNG

ckernels = pytest.importorskip("dotfactor._ckernels")


def test_backend_selected_at_import():
    assert kernels.BACKEND in {"compiled", "python"}


def test_splitmix64_reference_values():
    # published SplitMix64 outputs for seed 0
    out = kernels.splitmix64_fill(0, 0, 3)
    assert [hex(v) for v in out] == ["0xe220a8397b1dcdaf", "0x6e789e6aa1b965f4", "0x6c45d188009454f"]


@pytest.mark.parametrize("key,start,n", [(0, 0, 17), (2**64 - 1, 5, 100), (123456789, 2**40, 3)])
def test_splitmix64_backends_identical(key, start, n):
    np.testing.assert_array_equal(_pykernels.splitmix64_fill(key, start, n),
                                  ckernels.splitmix64_fill(key, start, n))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_backends_bitwise_identical(dtype):
    rng = CounterRNG(9)
    p0 = rng.normal((257,), dtype)
    states = []
    for impl in (_pykernels, ckernels):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        for t in range(1, 8):
            g = CounterRNG(t).normal((257,), dtype)
            d = np.dtype(dtype).type
            impl.adam_update(p, g, m, v, d(1e-3), d(0.9), d(0.999), d(1e-8),
                             d(1 - 0.9 ** t), d(1 - 0.999 ** t))
        states.append((p, m, v))
    for a, b in zip(*states):
        assert a.tobytes() == b.tobytes()


def test_bce_backends_agree():
    rng = CounterRNG(4)
    logits = (rng.normal((8, 300)) * 6).astype(np.float32)
    target = (rng.uniform((8, 300)) > 0.5).astype(np.float32)
    la, ga = _pykernels.bce_logits(logits, target)
    lb, gb = ckernels.bce_logits(logits, target)
    np.testing.assert_allclose(la, lb, rtol=1e-12)
    np.testing.assert_allclose(ga, gb, atol=1e-7)


def test_joint_counts_backends_identical():
    rng = CounterRNG(2)
    a, b = rng.integers(7, 1000), rng.integers(5, 1000)
    np.testing.assert_array_equal(_pykernels.joint_counts(a, b, 7, 5),
                                  ckernels.joint_counts(a, b, 7, 5))
    assert kernels.joint_counts(a, b, 7, 5).sum() == 1000


def test_use_backend_switches_and_restores():
    prev = kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
    finally:
        kernels.use_backend(prev)
    assert kernels.BACKEND == prev


# ---- CounterRNG ----

def test_rng_identical_seed_identical_stream():
    assert CounterRNG(3).normal((50,)).tobytes() == CounterRNG(3).normal((50,)).tobytes()
    assert CounterRNG(3).normal((50,)).tobytes() != CounterRNG(4).normal((50,)).tobytes()


def test_rng_children_are_independent_streams():
    root = CounterRNG(1)
    a, b = root.child("noise").raw(10), root.child("shuffle").raw(10)
    assert not np.intersect1d(a, b).size
    assert root.child("noise", 2).raw(4).tobytes() == CounterRNG(1).child("noise", 2).raw(4).tobytes()


def test_rng_counter_advances():
    r = CounterRNG(8)
    first, second = r.raw(4), r.raw(4)
    np.testing.assert_array_equal(np.concatenate([first, second]), CounterRNG(8).raw(8))


def test_rng_normal_moments():
    z = CounterRNG(0).normal((200_000,), np.float64)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


def test_rng_uniform_and_integers_range():
    r = CounterRNG(5)
    u = r.uniform((10_000,))
    assert u.min() >= 0 and u.max() < 1
    k = r.integers(6, 60_000)
    counts = np.bincount(k, minlength=6)
    assert k.min() == 0 and k.max() == 5
    # chi-square, 5 dof, 99.9% quantile 20.5
    assert ((counts - 10_000) ** 2 / 10_000).sum() < 20.5


def test_rng_permutation_is_permutation():
    p = CounterRNG(1).permutation(100)
    np.testing.assert_array_equal(np.sort(p), np.arange(100))
