"""Time the compiled and pure-Python kernels on the same inputs.

Usage: ``python3 benchmarks/bench_kernels.py [--n 2000] [--repeat 3]``
"""

import argparse
import timeit

import numpy as np

from spqrx import _pykernels
from spqrx.splines import build_basis

try:
    from spqrx import _ckernels
except ImportError:
    _ckernels = None


def inputs(n, K, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.beta(2.0, 5.0, n)
    basis = build_basis(K, 3, y)
    W = rng.dirichlet(np.ones(K), n)
    xi = rng.uniform(-0.3, 0.4, n)
    return basis, W, xi, y


def cases(mod, basis, W, xi, y):
    t, d = basis.knots, basis.order
    T = np.tile(np.linspace(0.01, 0.99, 8), (y.size, 1))
    return {
        "bulk_eval": lambda: mod.bulk_eval(t, d, W, y[:, None]),
        "spqr_quantile": lambda: mod.spqr_quantile(t, d, W, T),
        "bgp_eval": lambda: mod.bgp_eval(t, d, W, xi, y[:, None], 0.9, 0.99, 25.0, 5.0),
        "loss_nll": lambda: mod.spqrx_loss(t, d, W, xi, y, 0.9, 0.99, 25.0, 5.0, 0.0, 128, True),
        "loss_penalized": lambda: mod.spqrx_loss(t, d, W, xi, y, 0.9, 0.99, 25.0, 5.0, 100.0,
                                                 128, True),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--K", type=int, default=25)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    data = inputs(args.n, args.K)
    py = cases(_pykernels, *data)
    cy = cases(_ckernels, *data) if _ckernels is not None else None
    print(f"n={args.n} K={args.K}; best of {args.repeat}, seconds per call")
    print(f"{'kernel':<16}{'python':>12}{'cython':>12}{'speedup':>10}")
    for name, f in py.items():
        tp = min(timeit.repeat(f, number=1, repeat=args.repeat))
        if cy is None:
            print(f"{name:<16}{tp:>12.4f}{'n/a':>12}{'':>10}")
            continue
        tc = min(timeit.repeat(cy[name], number=1, repeat=args.repeat))
        print(f"{name:<16}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
