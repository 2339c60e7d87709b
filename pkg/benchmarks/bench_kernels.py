"""Compare the compiled and numpy trilinear kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--dims 48] [--repeats 5]

Prints best-of-N wall time per kernel for each backend, the speedup, and
the largest absolute difference between the two backends' outputs.
"""
import argparse
import json
import time

import numpy as np
from scipy.ndimage import gaussian_filter

from arcreg import _pykernels

try:
    from arcreg import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(n, rng):
    shape = (n, n, n)
    d = gaussian_filter(rng.standard_normal(shape + (3,)), (2, 2, 2, 0)) * 4.0
    axes = [np.arange(k, dtype=np.float64) for k in shape]
    pos = np.ascontiguousarray((np.stack(np.meshgrid(*axes, indexing="ij"), -1) + d).reshape(-1, 3))
    g = np.ascontiguousarray(rng.standard_normal(d.shape))
    gflat = np.ascontiguousarray(g.reshape(-1, 3))
    return {
        "interp": lambda k: k.interp(d, pos),
        "interp_grad": lambda k: k.interp_grad(d, pos),
        "interp_adjoint": lambda k: k.interp_adjoint(pos, gflat, shape),
        "compose_backward": lambda k: k.compose_backward(d, g),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=48)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    cases = _cases(args.dims, np.random.default_rng(0))
    rows = []
    print(f"grid {args.dims}^3, best of {args.repeats}")
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, call in cases.items():
        t_py = _best(lambda: call(_pykernels), args.repeats)
        row = {"kernel": name, "numpy_ms": 1e3 * t_py}
        if _ckernels is not None:
            t_c = _best(lambda: call(_ckernels), args.repeats)
            diff = float(np.abs(_flat(call(_pykernels)) - _flat(call(_ckernels))).max())
            row.update(cython_ms=1e3 * t_c, speedup=t_py / t_c, max_abs_diff=diff)
            print(f"{name:<18}{1e3 * t_py:>10.2f}{1e3 * t_c:>11.2f}{t_py / t_c:>8.1f}x{diff:>12.2e}")
        else:
            print(f"{name:<18}{1e3 * t_py:>10.2f}{'n/a':>11}")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"dims": args.dims, "repeats": args.repeats, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
