"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--n 400] [--repeat 5]

Each kernel is checked for agreement between backends before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from gcrfcast import _kernels
from gcrfcast.gcrf import _factor_ldl


def _ldl_inputs(n, rng):
    # banded SPD precision: path graph Laplacian plus a positive diagonal
    side = int(np.sqrt(n))
    grid = sparse.csr_matrix(csgraph.laplacian(
        sparse.diags([1.0, 1.0], [-1, 1], shape=(side * side, side * side))
        + sparse.diags([1.0, 1.0], [-side, side], shape=(side * side, side * side))))
    Q = (grid + sparse.diags(rng.uniform(0.5, 1.5, side * side))).tocsc()
    perm = csgraph.reverse_cuthill_mckee(sparse.csr_matrix(Q), symmetric_mode=True)
    lu, d = _factor_ldl(Q[perm][:, perm].tocsc())
    L = sparse.tril(lu.L, k=-1).tocsc()
    L.sort_indices()
    return L.indptr.astype(np.int32), L.indices.astype(np.int32), L.data, d


def cases(n, rng):
    X = rng.random((n, 12))
    P = rng.random((n, 10))
    P /= P.sum(axis=1, keepdims=True)
    S = rng.random((n, n))
    S = (S + S.T) / 2
    y = rng.standard_normal(n)
    edges = np.linspace(0.0, 1.0, 21)
    return {
        "common_history": (X,),
        "jsd_matrix": (P,),
        "pair_bin_stats": (S, y, edges),
        "selected_inverse": _ldl_inputs(n, rng),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=400, help="number of nodes")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    compiled = _kernels.compiled_backend
    if compiled is None:
        print("compiled backend unavailable; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':18s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, inputs in cases(args.n, rng).items():
        py = getattr(_kernels.python_backend, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:18s} {t_py:10.2f} {'-':>12s} {'-':>8s}")
            continue
        c = getattr(compiled, name)
        if not _same(py(*inputs), c(*inputs)):
            raise SystemExit(f"{name}: backends disagree")
        t_c = min(timeit.repeat(lambda: c(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:18s} {t_py:10.2f} {t_c:12.2f} {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
