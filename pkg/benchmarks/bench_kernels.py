"""Compare the compiled and pure Python hot loops on identical inputs.

Usage: python benchmarks/bench_kernels.py [--bins N] [--events N] [--repeat R]
"""

import argparse
import time

import numpy as np

from mqarch import _pykernels
from mqarch.model import zhawkes_model

try:
    from mqarch import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def rel_diff(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        return np.inf
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300)))


def mqarch_case(n_bins):
    model = zhawkes_model(
        np.array([[0.4, 0.1], [0.1, 0.4]]), 0.1, np.array([[0.1, 0.0], [0.0, 0.1]]), 0.05, [1.2, 0.8], 50
    )
    xi = np.random.default_rng(0).standard_normal((2, n_bins))
    args = (model.phi, model.leverage, model.k, None, model.phi_cross, None, model.sigma_inf_sq, 0.0, xi, 1e-12)
    return lambda mod: mod.mqarch_path(*args)


def exp_states_case(n_events):
    rng = np.random.default_rng(1)
    times = np.cumsum(rng.exponential(1.0, n_events))
    marks = rng.choice([-1.0, 1.0], n_events)
    return lambda mod: mod.exp_states(times, marks, 0.05)


def thinning_case(horizon):
    lam = np.array([0.01])
    wH, bH = np.array([[0.7 * 0.04]]), np.array([[0.04]])
    wZ, bZ = np.array([[0.0]]), np.array([[1.0]])
    wL, bL = np.array([[0.0]]), np.array([[1.0]])

    def run(mod):
        rng = np.random.default_rng(2)
        return mod.thinning(lam, wH, bH, wZ, bZ, wL, bL, horizon, rng.standard_exponential, rng.random)

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bins", type=int, default=100000)
    parser.add_argument("--events", type=int, default=200000)
    parser.add_argument("--horizon", type=float, default=2e6)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    cases = [
        (f"mqarch_path ({args.bins} bins, q=50, 2 assets)", mqarch_case(args.bins)),
        (f"exp_states ({args.events} events)", exp_states_case(args.events)),
        (f"thinning (horizon {args.horizon:g})", thinning_case(args.horizon)),
    ]
    print(f"{'kernel':45s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}  max rel diff")
    for name, fn in cases:
        t_py, out_py = best_of(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:45s} {t_py:10.4f} {'n/a':>10s}")
            continue
        t_c, out_c = best_of(lambda: fn(_ckernels), args.repeat)
        diff = max(rel_diff(a, b) for a, b in zip(out_py, out_c))
        print(f"{name:45s} {t_py:10.4f} {t_c:10.4f} {t_py / t_c:8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
