"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with typed loops.
"""
from bisect import bisect_left

import numpy as np


def common_history(X, expansion=False):
    """Pairwise ``exp(-mean |x_i - x_j|)`` over history rows of ``X`` (N x h).

    With ``expansion=True`` the absolute value is taken of the summed
    differences instead of each difference.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    h = X.shape[1]
    diff = X[:, None, :] - X[None, :, :]
    if expansion:
        dist = np.abs(diff.sum(axis=2)) / h
    else:
        dist = np.abs(diff).sum(axis=2) / h
    return np.exp(-dist)


def _kld_terms(p, m):
    out = np.zeros(np.broadcast(p, m).shape)
    pb = np.broadcast_to(p, out.shape)
    mb = np.broadcast_to(m, out.shape)
    mask = pb > 0
    out[mask] = pb[mask] * np.log(pb[mask] / mb[mask])
    return out


def jsd_matrix(P):
    """Pairwise Jensen-Shannon divergence (nats) between rows of ``P``."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    A = P[:, None, :]
    B = P[None, :, :]
    M = 0.5 * (A + B)
    jsd = 0.5 * (_kld_terms(A, M).sum(axis=2) + _kld_terms(B, M).sum(axis=2))
    jsd = 0.5 * (jsd + jsd.T)
    np.fill_diagonal(jsd, 0.0)
    return np.clip(jsd, 0.0, None)


def pair_bin_stats(S, y, edges):
    """Count pairs i<j per similarity bin and sum ``(y_i - y_j)^2 / 2``."""
    S = np.asarray(S, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nb = len(edges) - 1
    iu, ju = np.triu_indices(len(y), k=1)
    s = S[iu, ju]
    idx = np.searchsorted(edges, s, side="right") - 1
    idx = np.clip(idx, 0, nb - 1)
    half_sq = 0.5 * (y[iu] - y[ju]) ** 2
    counts = np.bincount(idx, minlength=nb).astype(np.int64)
    sums = np.bincount(idx, weights=half_sq, minlength=nb)
    return counts, sums


def selected_inverse(indptr, indices, data, d):
    """Entries of ``(L D L^T)^{-1}`` on the pattern of a unit lower factor.

    ``indptr/indices/data`` hold the strictly lower part of ``L`` in CSC
    form with sorted row indices; ``d`` is the pivot vector.  Returns the
    inverse values on the same pattern plus its diagonal (Takahashi
    recurrences, processed from the last column backwards).
    """
    n = len(d)
    zdata = np.zeros(len(data))
    zdiag = np.zeros(n)
    cols = [indices[indptr[j]:indptr[j + 1]].tolist() for j in range(n)]

    def lookup(r, c):
        if r == c:
            return zdiag[r]
        if r < c:
            r, c = c, r
        rows = cols[c]
        pos = bisect_left(rows, r)
        if pos == len(rows) or rows[pos] != r:
            raise ValueError("selected inverse: pattern is not closed under fill")
        return zdata[indptr[c] + pos]

    for i in range(n - 1, -1, -1):
        lo, hi = indptr[i], indptr[i + 1]
        rows = cols[i]
        vals = data[lo:hi]
        for a, j in enumerate(rows):
            acc = 0.0
            for b, k in enumerate(rows):
                acc += vals[b] * lookup(k, j)
            zdata[lo + a] = -acc
        acc = 0.0
        for a in range(hi - lo):
            acc += vals[a] * zdata[lo + a]
        zdiag[i] = 1.0 / d[i] - acc
    return zdata, zdiag
