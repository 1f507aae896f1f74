"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-``repeat`` time for each
backend and the speedup. Exits 1 if the compiled extension is missing.
"""

import argparse
import sys
import timeit

import numpy as np

from dotfactor import kernels


def cases():
    rng = np.random.default_rng(0)
    n = 1 << 18
    p = rng.standard_normal(n).astype(np.float32)
    g = rng.standard_normal(n).astype(np.float32)
    m = np.zeros(n, np.float32)
    v = np.zeros(n, np.float32)
    logits = rng.standard_normal((64, 1024)).astype(np.float32)
    target = (rng.random((64, 1024)) > 0.5).astype(np.float32)
    a = rng.integers(0, 20, 768)
    b = rng.integers(0, 8, 768)
    return {
        "splitmix64_fill n=262144": lambda: kernels.splitmix64_fill(12345, 0, n),
        "adam_update n=262144 f32": lambda: kernels.adam_update(
            p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
        "bce_logits 64x1024": lambda: kernels.bce_logits(logits, target),
        "joint_counts n=768": lambda: kernels.joint_counts(a, b, 20, 8),
    }


def best_time(fn, repeat):
    number = 5
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    try:
        kernels.use_backend("compiled")
    except ImportError:
        print("compiled extension not built; run `pip install -e .` first", file=sys.stderr)
        return 1
    print(f"{'kernel':28s} {'compiled':>12s} {'python':>12s} {'speedup':>8s}")
    for name, fn in cases().items():
        kernels.use_backend("compiled")
        tc = best_time(fn, args.repeat)
        kernels.use_backend("python")
        tp = best_time(fn, args.repeat)
        print(f"{name:28s} {tc * 1e6:10.1f}us {tp * 1e6:10.1f}us {tp / tc:7.2f}x")
    kernels.use_backend("compiled")
    return 0


if __name__ == "__main__":
    sys.exit(main())
