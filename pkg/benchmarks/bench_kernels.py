"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--cells 200] [--windows 5000] [--repeat 3]

The last rows time a full Bohl spectrum in a subprocess per backend, since the
backend is fixed at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bohlspec import _pykernels

try:
    from bohlspec import _ckernels
except ImportError:
    _ckernels = None

END_TO_END = (
    "import time; from bohlspec.spectrum import bohl_spectrum;"
    "from bohlspec.system import ExampleSpec, build_example;"
    "s = build_example(ExampleSpec('{name}')); t = time.perf_counter(); bohl_spectrum(s);"
    "print(time.perf_counter() - t)"
)


def workloads(n_cells, n_windows, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 1, (2, n_cells))
    c = rng.uniform(-3, 3, n_cells)
    lengths = rng.uniform(0.1, 20, n_cells)
    U0 = rng.normal(size=(8, 2))
    U0 /= np.linalg.norm(U0, axis=1, keepdims=True)
    dirs, gains = _pykernels.forward_closed(a, b, c, lengths, U0)
    traj = rng.integers(0, 8, n_windows)
    i = rng.integers(0, n_cells, n_windows)
    j = np.minimum(i + rng.integers(0, 50, n_windows), n_cells - 1)
    o = rng.uniform(0, 1, n_windows) * lengths[i]
    o2 = np.where(j == i, o + rng.uniform(0, 1, n_windows) * (lengths[i] - o), rng.uniform(0, 1, n_windows) * lengths[j])
    U = rng.normal(size=(n_windows, 2))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    bnd = np.array([0.0, 1.0, 2.0, 4.0, 8.0, 16.0])
    mats = np.array([[[-1.0, 1.0], [0.0, -9.0]], [[-1.0, 1.0], [0.0, 2.5]]] * 3)[:5]
    Q = np.zeros((2, 2, 2))
    Q[1, 0, 0] = 1.0
    return {
        "tri_step": lambda k: [k.tri_step(-1.0, 0.5, 2.0, 0.6, 0.8, t) for t in lengths],
        "forward_closed": lambda k: k.forward_closed(a, b, c, lengths, U0),
        "window_closed": lambda k: k.window_closed(a, b, c, lengths, dirs, gains, traj, i, o, j, o2),
        "transport_closed": lambda k: k.transport_closed(a, b, c, lengths, i, o, j, o2, U),
        "span_sums": lambda k: k.span_sums(lengths, gains, traj, i, j),
        "dp45_piecewise": lambda k: k.dp45_piecewise(bnd, mats, Q, np.array([0.1, 0.1]), 16.0, 1e-10, 1e-300, 1e6, 10**6),
    }


def end_to_end(name, pure):
    env = dict(os.environ, BOHLSPEC_PURE_PYTHON="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", END_TO_END.format(name=name)], env=env, capture_output=True, text=True, check=True)
    return float(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=200)
    ap.add_argument("--windows", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--examples", nargs="*", default=["prop52", "sec6"])
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the fallback is available", file=sys.stderr)
        return 1
    print(f"{'kernel':<22}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}")
    for name, fn in workloads(args.cells, args.windows, args.seed).items():
        tp = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<22}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}")
    for name in args.examples:
        tp, tc = end_to_end(name, True), end_to_end(name, False)
        print(f"{'bohl ' + name:<22}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
