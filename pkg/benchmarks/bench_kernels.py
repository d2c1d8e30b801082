"""Compare the compiled and NumPy kernel backends.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 64]

Prints the median wall time per call for each kernel and backend, the
speed-up, and the maximum difference between the two results.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from vrnet import _pykernels
from vrnet.fftsolver import element_matrices
from vrnet.mandel import DEFAULT_PHASES, plane_strain_stiffness

try:
    from vrnet import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return statistics.median(ts)


def cases(n, rng):
    phase = (rng.random((n, n)) < 0.5).astype(np.uint8)
    ke = np.stack([element_matrices(plane_strain_stiffness(p), n, n)[0] for p in DEFAULT_PHASES])
    u = rng.standard_normal((3, 2, n, n))
    sym = rng.standard_normal((2000, 6, 6))
    sym = sym + np.swapaxes(sym, 1, 2)
    mask = rng.random((n, n)) < 0.5
    return {
        "fe_apply": lambda m: m.fe_apply(u, phase, ke),
        "jacobi_eigh (2000 x 6x6)": lambda m: m.jacobi_eigh(sym, 1e-15, 60),
        "label_periodic": lambda m: m.label_periodic(mask),
    }


def _diff(a, b, name):
    if name.startswith("jacobi"):
        return float(np.max(np.abs(np.sort(a[0], axis=-1) - np.sort(b[0], axis=-1))))
    if name.startswith("label"):
        return float(abs(a[1] - b[1]))
    return float(np.max(np.abs(a - b)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=64)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run: pip install -e . --no-build-isolation")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython [ms]':>12s} {'numpy [ms]':>12s} {'speed-up':>9s} {'max diff':>10s}")
    for name, fn in cases(args.n, rng).items():
        tc = _time(lambda: fn(_ckernels), args.repeat)
        tp = _time(lambda: fn(_pykernels), args.repeat)
        d = _diff(fn(_ckernels), fn(_pykernels), name)
        print(f"{name:28s} {1e3 * tc:12.3f} {1e3 * tp:12.3f} {tp / tc:9.1f} {d:10.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
