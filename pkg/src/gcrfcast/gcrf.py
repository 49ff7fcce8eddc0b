"""Gaussian conditional random fields over node predictions.

The model couples per-node unstructured predictions ``R_k`` with graph
smoothing.  Its conditional density is Gaussian with precision

    Q = 2 diag(sum_k alpha_k) + 2 sum_l beta_l Lap(S_l)

(``Lap`` is the weighted graph Laplacian) and mean ``Q^{-1} b`` with
``b = 2 sum_k alpha_k R_k``.  Parameters are kept in log space,
``alpha = exp(u)``, ``beta = exp(v)``, so every finite parameter vector
gives a positive definite ``Q``.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.linalg import lapack
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from . import _kernels
from .similarity import SimilarityMatrix

DENSE_LIMIT = 500
PIVOT_MIN = 1e-12
RIDGE = 1e-10
LOG_2PI = np.log(2.0 * np.pi)


class GcrfError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


def laplacian(S):
    """Weighted graph Laplacian ``D - S`` of a symmetric similarity (sparse CSR)."""
    if isinstance(S, SimilarityMatrix):
        S = S.values
    S = sparse.csr_matrix(S, dtype=np.float64)
    S = S - sparse.diags(S.diagonal())
    S.eliminate_zeros()
    deg = np.asarray(S.sum(axis=1)).ravel()
    return (sparse.diags(deg) - S).tocsr()


@dataclass(frozen=True, eq=False)
class GcrfSnapshot:
    """Inputs of one target timestep.

    ``R`` is ``K x N`` (one row per unstructured predictor).  ``sigma2``
    (same shape) carries the predictors' predictive variances and
    ``features`` (``N x D``) the per-node inputs of neural alpha functions;
    both are only required by the models that read them.
    """

    R: np.ndarray
    S_list: tuple = ()
    y: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    features: np.ndarray | None = None
    horizon: int | None = None
    label: object = None

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        N = R.shape[1]
        object.__setattr__(self, "R", R)
        lap = []
        for S in self.S_list:
            L = laplacian(S)
            if L.shape != (N, N):
                raise GcrfError(f"similarity of shape {L.shape} does not match N={N}")
            lap.append(L)
        object.__setattr__(self, "S_list", tuple(self.S_list))
        object.__setattr__(self, "laplacians", tuple(lap))
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64)
            if y.shape != (N,):
                raise GcrfError(f"y has shape {y.shape}, expected ({N},)")
            object.__setattr__(self, "y", y)
        if self.sigma2 is not None:
            s2 = np.atleast_2d(np.asarray(self.sigma2, dtype=np.float64))
            if s2.shape != R.shape:
                raise GcrfError(f"sigma2 has shape {s2.shape}, expected {R.shape}")
            object.__setattr__(self, "sigma2", s2)
        if self.features is not None:
            F = np.asarray(self.features, dtype=np.float64)
            if F.ndim == 1:
                F = F[:, None]
            if F.shape[0] != N:
                raise GcrfError(f"features have {F.shape[0]} rows, expected {N}")
            object.__setattr__(self, "features", F)

    def with_values(self, R, y=None, label=None):
        """Same graph with new predictor outputs and targets (Laplacians reused)."""
        R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        if R.shape[1] != self.N:
            raise GcrfError(f"R has {R.shape[1]} columns, expected N={self.N}")
        out = copy.copy(self)
        object.__setattr__(out, "R", R)
        object.__setattr__(out, "label", label)
        y = None if y is None else np.asarray(y, dtype=np.float64)
        if y is not None and y.shape != (self.N,):
            raise GcrfError(f"y has shape {y.shape}, expected ({self.N},)")
        object.__setattr__(out, "y", y)
        return out

    @cached_property
    def dense_laplacians(self):
        return tuple(L.toarray() for L in self.laplacians)

    @property
    def K(self):
        return self.R.shape[0]

    @property
    def N(self):
        return self.R.shape[1]

    @property
    def L(self):
        return len(self.laplacians)


@dataclass(eq=False)
class GcrfParams:
    """Log-parameters of a GCRF.

    ``u`` has shape ``(K,)`` in shared mode and ``(K, N)`` in per-node mode;
    ``v`` has one entry per similarity type.
    """

    u: np.ndarray
    v: np.ndarray
    mode: str = "shared"
    info: dict = field(default_factory=dict, repr=False)

    model = "gcrf"

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        if self.mode not in ("shared", "per-node"):
            raise GcrfError(f"unknown alpha mode {self.mode!r}")
        if self.mode == "shared" and self.u.ndim != 1:
            raise GcrfError("shared mode expects u of shape (K,)")
        if self.mode == "per-node" and self.u.ndim != 2:
            raise GcrfError("per-node mode expects u of shape (K, N)")

    @classmethod
    def initial(cls, K, L, N=None, mode="shared"):
        u = np.zeros(K) if mode == "shared" else np.zeros((K, N))
        return cls(u, np.zeros(L), mode)

    @property
    def alpha(self):
        return np.exp(self.u)

    @property
    def beta(self):
        return np.exp(self.v)

    def alphas(self, snapshot):
        if self.mode == "shared":
            if len(self.u) != snapshot.K:
                raise GcrfError(f"params have K={len(self.u)}, snapshot has K={snapshot.K}")
            return np.repeat(self.alpha[:, None], snapshot.N, axis=1)
        if self.u.shape != snapshot.R.shape:
            raise GcrfError(f"per-node params shape {self.u.shape} != snapshot {snapshot.R.shape}")
        return self.alpha

    def betas(self, snapshot):
        if len(self.v) != snapshot.L:
            raise GcrfError(f"params have L={len(self.v)}, snapshot has L={snapshot.L}")
        return self.beta

    # flat-vector plumbing for optimizers
    def pack(self):
        return np.concatenate([self.u.ravel(), self.v])

    def unpack(self, theta):
        n = self.u.size
        return GcrfParams(theta[:n].reshape(self.u.shape), theta[n:], self.mode)

    def chain(self, snapshot, g_logalpha, g_logbeta):
        """Map gradients w.r.t. log alpha (K x N) and log beta to ``(du, dv)``."""
        du = g_logalpha.sum(axis=1) if self.mode == "shared" else g_logalpha
        return du, g_logbeta


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


def precision_from(alpha, beta, laplacians):
    """``Q`` from per-node alphas (K x N), betas (L,) and Laplacians."""
    alpha = np.atleast_2d(alpha)
    Q = sparse.diags(2.0 * alpha.sum(axis=0))
    for b, L in zip(beta, laplacians):
        Q = Q + 2.0 * b * L
    return sparse.csc_matrix(Q)


def dense_precision_from(alpha, beta, dense_laplacians):
    """Dense counterpart of :func:`precision_from`."""
    alpha = np.atleast_2d(alpha)
    N = alpha.shape[1]
    Q = np.zeros((N, N))
    for b, L in zip(beta, dense_laplacians):
        Q += (2.0 * b) * L
    Q[np.diag_indices(N)] += 2.0 * alpha.sum(axis=0)
    return Q


def b_from(alpha, R):
    return 2.0 * (np.atleast_2d(alpha) * np.atleast_2d(R)).sum(axis=0)


def assemble_precision(params, snapshot):
    return precision_from(params.alphas(snapshot), params.betas(snapshot), snapshot.laplacians)


def assemble_b(params, snapshot):
    return b_from(params.alphas(snapshot), snapshot.R)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


@dataclass(eq=False)
class GcrfPosterior:
    """Posterior moments and ``log det Q``.

    ``cov`` is the dense inverse for small problems, otherwise a sparse
    matrix holding the inverse on the factor's sparsity pattern (enough for
    traces against matrices with the pattern of ``Q``).
    """

    mu: np.ndarray
    var_diag: np.ndarray
    log_det_Q: float
    cov: object
    ridge: float = 0.0
    method: str = "dense"

    def trace_product(self, M):
        """``tr(Q^{-1} M)`` for symmetric ``M`` whose pattern is inside ``Q``'s."""
        M = sparse.coo_matrix(M)
        if isinstance(self.cov, np.ndarray):
            return float(np.dot(M.data, self.cov[M.row, M.col]))
        return float(self.cov.multiply(M).sum())


def _dense_posterior(Q, b):
    Qd = Q.toarray() if sparse.issparse(Q) else np.asarray(Q, dtype=np.float64)
    Qd = 0.5 * (Qd + Qd.T)
    ridge = 0.0
    try:
        L = np.linalg.cholesky(Qd)
        min_piv = float(np.min(np.diag(L)) ** 2)
    except np.linalg.LinAlgError:
        min_piv = -np.inf
    if min_piv < PIVOT_MIN:
        ridge = RIDGE
        try:
            L = np.linalg.cholesky(Qd + ridge * np.eye(len(Qd)))
        except np.linalg.LinAlgError:
            raise GcrfError(f"precision factorization failed (min pivot {min_piv:.3g})") from None
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise GcrfError("inverse from Cholesky factor failed")
    cov = np.tril(inv) + np.tril(inv, -1).T
    mu = linalg.cho_solve((L, True), b)
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    return GcrfPosterior(mu, np.diag(cov).copy(), logdet, cov, ridge, "dense")


def _factor_ldl(A):
    lu = splu(
        A, permc_spec="NATURAL", diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    if not (np.array_equal(lu.perm_r, np.arange(A.shape[0]))
            and np.array_equal(lu.perm_c, np.arange(A.shape[0]))):
        raise GcrfError("sparse factorization pivoted; precision is not usable as SPD")
    return lu, lu.U.diagonal()


def _sparse_posterior(Q, b):
    Q = sparse.csc_matrix(Q)
    N = Q.shape[0]
    perm = csgraph.reverse_cuthill_mckee(sparse.csr_matrix(Q), symmetric_mode=True)
    A = Q[perm][:, perm].tocsc()
    ridge = 0.0
    lu, d = _factor_ldl(A)
    if d.min() < PIVOT_MIN:
        ridge = RIDGE
        lu, d = _factor_ldl((A + ridge * sparse.eye(N)).tocsc())
        if d.min() <= 0:
            raise GcrfError(f"precision factorization failed (min pivot {d.min():.3g})")
    Lf = sparse.tril(lu.L, k=-1).tocsc()
    Lf.sort_indices()
    zdata, zdiag = _kernels.selected_inverse(
        Lf.indptr.astype(np.int32), Lf.indices.astype(np.int32), Lf.data, d
    )
    cols = np.repeat(np.arange(N), np.diff(Lf.indptr))
    rows = Lf.indices
    oi, oj = perm[rows], perm[cols]
    cov = sparse.coo_matrix(
        (np.concatenate([zdata, zdata, zdiag]),
         (np.concatenate([oi, oj, perm]), np.concatenate([oj, oi, perm]))),
        shape=(N, N),
    ).tocsr()
    mu = np.empty(N)
    mu[perm] = lu.solve(np.asarray(b, dtype=np.float64)[perm])
    var = np.empty(N)
    var[perm] = zdiag
    return GcrfPosterior(mu, var, float(np.log(d).sum()), cov, ridge, "sparse")


def posterior(Q, b, method="auto"):
    """Solve ``Q mu = b`` and extract ``diag(Q^{-1})`` and ``log det Q``.

    ``method`` is ``"dense"``, ``"sparse"`` (RCM ordering, LDL^T
    factorization and selected inversion) or ``"auto"`` (dense below
    ``DENSE_LIMIT`` nodes).
    """
    N = Q.shape[0]
    if method == "auto":
        method = "dense" if N < DENSE_LIMIT else "sparse"
    if method == "dense":
        return _dense_posterior(Q, b)
    if method == "sparse":
        return _sparse_posterior(Q, b)
    raise GcrfError(f"unknown posterior method {method!r}")


def infer(alpha, beta, snapshot, method="auto"):
    if method == "dense" or (method == "auto" and snapshot.N < DENSE_LIMIT):
        Q = dense_precision_from(alpha, beta, snapshot.dense_laplacians)
        return Q, _dense_posterior(Q, b_from(alpha, snapshot.R))
    Q = precision_from(alpha, beta, snapshot.laplacians)
    return Q, posterior(Q, b_from(alpha, snapshot.R), method)


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------


def snapshot_loglik(alpha, beta, snapshot, grad=True, method="auto"):
    """Log-likelihood of ``snapshot.y`` and its gradient in log alpha / log beta.

    Returns ``(ll, g_logalpha, g_logbeta)`` with ``g_logalpha`` of shape
    ``K x N``.
    """
    if snapshot.y is None:
        raise GcrfError("snapshot has no observed y")
    alpha = np.atleast_2d(alpha)
    beta = np.asarray(beta, dtype=np.float64)
    y = snapshot.y
    Q, post = infer(alpha, beta, snapshot, method)
    mu = post.mu
    r = y - mu
    ll = -0.5 * r @ (Q @ r) + 0.5 * post.log_det_Q - 0.5 * snapshot.N * LOG_2PI
    if not grad:
        return float(ll), None, None
    common = -(y ** 2 - mu ** 2) + post.var_diag
    g_alpha = 2.0 * r[None, :] * snapshot.R + common[None, :]
    g_beta = np.array([
        -(y @ (L @ y) - mu @ (L @ mu)) + post.trace_product(L) for L in snapshot.laplacians
    ])
    return float(ll), alpha * g_alpha, beta * g_beta


def log_likelihood(params, snapshot):
    """``-1/2 (y-mu)^T Q (y-mu) + 1/2 log det Q - N/2 log 2 pi``."""
    ll, _, _ = snapshot_loglik(params.alphas(snapshot), params.betas(snapshot), snapshot, grad=False)
    return ll


def likelihood_gradient(params, snapshot):
    """Analytic gradient of :func:`log_likelihood` w.r.t. ``(u, v)``."""
    _, ga, gb = snapshot_loglik(params.alphas(snapshot), params.betas(snapshot), snapshot)
    return params.chain(snapshot, ga, gb)


def total_loglik(params, snapshots, grad=True):
    """Summed log-likelihood over snapshots and the gradient in packed form."""
    total = 0.0
    g = np.zeros_like(params.pack()) if grad else None
    for snap in snapshots:
        ll, ga, gb = snapshot_loglik(params.alphas(snap), params.betas(snap), snap, grad=grad)
        total += ll
        if grad:
            du, dv = params.chain(snap, ga, gb)
            g += np.concatenate([np.ravel(du), np.ravel(dv)])
    return total, g


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuasiNewtonConfig:
    max_iter: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-12
    memory: int = 10
    bound: float = 30.0  # |u|, |v| box; keeps exp() finite


def maximize(params, snapshots, optimizer=None, fixed=None, penalty=None):
    """L-BFGS ascent of the summed log-likelihood for any params object.

    ``params`` must provide ``pack``/``unpack``/``alphas``/``betas``/``chain``.
    ``fixed`` is an optional boolean mask over the packed vector marking
    entries held at their initial values.  ``penalty(x)`` returns a value
    and gradient (packed) subtracted from the mean per-node log-likelihood.
    """
    cfg = optimizer or QuasiNewtonConfig()
    snapshots = list(snapshots)
    if not snapshots:
        raise GcrfError("no training snapshots")
    x0 = params.pack()
    free = np.ones_like(x0, dtype=bool) if fixed is None else ~np.asarray(fixed, dtype=bool)
    history = []
    last = {}
    # work with the mean per-node log-likelihood so gradients are O(1) and the
    # first quasi-Newton step (identity Hessian guess) stays moderate
    scale = 1.0 / sum(s.N for s in snapshots)

    def objective(z):
        x = x0.copy()
        x[free] = z
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ll, g = total_loglik(params.unpack(x), snapshots)
        except GcrfError:
            # line-search probe outside the numerically usable region
            ll, g = -np.inf, None
        if not np.isfinite(ll) or not np.all(np.isfinite(g)):
            out = (np.inf, np.zeros_like(z))
        else:
            f, gf = -ll * scale, -g * scale
            if penalty is not None:
                pv, pg = penalty(x)
                f, gf = f + pv, gf + pg
            out = (f, gf[free])
        last["z"], last["f"] = z.copy(), out[0]
        return out

    def record(z):
        # L-BFGS-B calls back with the iterate it just evaluated
        f = last["f"] if "z" in last and np.array_equal(last["z"], z) else objective(z)[0]
        history.append(-f / scale)

    bounds = [(-cfg.bound, cfg.bound)] * int(free.sum())
    res = optimize.minimize(
        objective, x0[free], jac=True, method="L-BFGS-B", bounds=bounds, callback=record,
        options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": cfg.ftol, "maxcor": cfg.memory},
    )
    x = x0.copy()
    x[free] = res.x
    out = params.unpack(x)
    out.info = {
        "converged": bool(res.success),
        "message": str(res.message),
        "iterations": int(res.nit),
        "loglik": float(-res.fun / scale),
        "objective_history": history,
    }
    if not res.success:
        warnings.warn(f"training did not converge: {res.message}", ConvergenceWarning, stacklevel=2)
    return out


def train_gcrf(snapshots, init=None, optimizer=None, mode="per-node", fix_beta=False):
    """Maximum-likelihood ``(u, v)`` over the summed training snapshots.

    Starts from ``u = v = 0`` unless ``init`` is given.  On non-convergence a
    :class:`ConvergenceWarning` is issued and the last iterate returned.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise GcrfError("no training snapshots")
    first = snapshots[0]
    if init is None:
        init = GcrfParams.initial(first.K, first.L, first.N, mode)
    fixed = None
    if fix_beta:
        fixed = np.zeros(init.pack().size, dtype=bool)
        fixed[init.u.size:] = True
    return maximize(init, snapshots, optimizer, fixed)
