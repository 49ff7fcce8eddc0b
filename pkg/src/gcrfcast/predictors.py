"""Unstructured autoregressive predictors with predictive variance.

Two families feed the structured models: ordinary least squares on lag
features (with intercept) and Gaussian-process regression with a squared
exponential kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

VARIANCE_FLOOR = 1e-8
MAX_CONDITION = 1e12
JITTER_START = 1e-10
JITTER_MAX = 1e-6


class PredictorError(ValueError):
    pass


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=np.float64))


def _floor(var):
    return np.maximum(var, VARIANCE_FLOOR)


def _as_rows(x_star, k):
    x = np.asarray(x_star, dtype=np.float64)
    single = x.ndim <= 1
    x = np.atleast_2d(x)
    if x.shape[1] != k:
        raise PredictorError(f"feature dimension {x.shape[1]} does not match model dimension {k}")
    return x, single


# --------------------------------------------------------------------------
# linear AR
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearArModel:
    """OLS fit of ``y = w[:k] . x + w[k]``; ``xtx_inv`` is over the augmented design."""

    w: np.ndarray
    sigma_y2: float
    xtx_inv: np.ndarray
    n_train: int
    n_features: int
    lag: int | None = None

    family = "lr"


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def fit_linear_ar(features):
    """Least squares with the ``N - k - 1`` residual-variance denominator."""
    X = np.asarray(features.X, dtype=np.float64)
    y = np.asarray(features.y, dtype=np.float64)
    n, k = X.shape
    if n <= k + 1:
        raise PredictorError(f"insufficient samples: N={n} must exceed k+1={k + 1}")
    Xa = _augment(X)
    xtx = Xa.T @ Xa
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise PredictorError(f"X^T X is ill-conditioned (condition estimate {cond:.3g})")
    xtx_inv = np.linalg.inv(xtx)
    xtx_inv = 0.5 * (xtx_inv + xtx_inv.T)
    w = xtx_inv @ (Xa.T @ y)
    resid = y - Xa @ w
    sigma_y2 = float(resid @ resid) / (n - k - 1)
    return LinearArModel(w, max(sigma_y2, 0.0), xtx_inv, n, k, getattr(features, "lag", None))


def predict_linear(model, x_star):
    x, single = _as_rows(x_star, model.n_features)
    xa = _augment(x)
    mean = xa @ model.w
    quad = np.einsum("ij,jk,ik->i", xa, model.xtx_inv, xa)
    var = _floor(model.sigma_y2 * (1.0 + quad))
    if single:
        return PredictiveDistribution(mean[0], var[0])
    return PredictiveDistribution(mean, var)


# --------------------------------------------------------------------------
# Gaussian process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GpSearch:
    """Hyperparameter search for :func:`fit_gp`.

    Grid ranges are multiples of the target variance (noise, amplitude) and
    of the typical input spread (length scale), all log-spaced.
    """

    grid_size: int = 8
    noise_range: tuple = (1e-4, 1.0)
    amplitude_range: tuple = (1e-2, 10.0)
    length_range: tuple = (0.1, 30.0)
    refine: bool = False
    ard: bool = False
    max_refine_iter: int = 100


@dataclass(frozen=True)
class GpModel:
    X_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    sigma_y2: float
    kernel_amplitude: float
    length_scales: np.ndarray
    C_chol: np.ndarray
    weights: np.ndarray  # C^{-1} (y - y_mean)
    jitter: float = 0.0
    log_marginal_likelihood: float = float("nan")
    lag: int | None = None

    family = "gp"

    @property
    def n_features(self):
        return self.X_train.shape[1]


def gaussian_kernel(A, B, amplitude, length_scales):
    """``amplitude * exp(-0.5 * sum_d (a_d - b_d)^2 / w_d^2)``."""
    ls = np.broadcast_to(np.asarray(length_scales, dtype=np.float64), (A.shape[1],))
    As, Bs = A / ls, B / ls
    sq = (As ** 2).sum(1)[:, None] + (Bs ** 2).sum(1)[None, :] - 2.0 * As @ Bs.T
    return amplitude * np.exp(-0.5 * np.maximum(sq, 0.0))


def _chol_with_jitter(C):
    """Cholesky factor of ``C``, escalating a diagonal jitter if needed."""
    try:
        return np.linalg.cholesky(C), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    scale = max(np.mean(np.diag(C)), 1.0)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(C + jitter * scale * np.eye(len(C))), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise PredictorError("covariance factorization failed after jitter escalation to 1e-6")


def log_marginal_likelihood(X, yc, noise, amplitude, length_scales):
    """Exact GP log evidence of centred targets ``yc``."""
    C = gaussian_kernel(X, X, amplitude, length_scales) + noise * np.eye(len(yc))
    L, _ = _chol_with_jitter(C)
    a = linalg.cho_solve((L, True), yc)
    return float(-0.5 * yc @ a - np.log(np.diag(L)).sum() - 0.5 * len(yc) * np.log(2 * np.pi))


def _grid_axes(X, yc, search):
    v = float(np.var(yc))
    if not v > 0:
        v = 1e-6
    spread = np.std(X, axis=0)
    sx = float(np.median(spread[spread > 0])) if np.any(spread > 0) else 1.0
    g = search.grid_size
    noise = v * np.logspace(*np.log10(search.noise_range), g)
    amp = v * np.logspace(*np.log10(search.amplitude_range), g)
    length = sx * np.logspace(*np.log10(search.length_range), g)
    return noise, amp, length


def _grid_lml(X, yc, noise, amp, length):
    """LML over the full grid, shape (len(noise), len(amp), len(length))."""
    n = len(yc)
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    E = np.exp(-0.5 * sq[None] / (length[:, None, None] ** 2))  # (nl, n, n)
    KE = amp[:, None, None, None] * E[None]  # (na, nl, n, n)
    out = np.full((len(noise), len(amp), len(length)), -np.inf)
    eye = np.eye(n)
    const = 0.5 * n * np.log(2 * np.pi)
    for i, s2 in enumerate(noise):
        C = (KE + s2 * eye).reshape(-1, n, n)
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            L = None
        vals = np.full(len(C), -np.inf)
        if L is not None:
            z = np.linalg.solve(L, np.broadcast_to(yc, (len(C), n))[..., None])[..., 0]
            logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(-1)
            vals = -0.5 * (z ** 2).sum(-1) - logdet - const
        else:
            for m in range(len(C)):
                try:
                    Lm, _ = _chol_with_jitter(C[m])
                except PredictorError:
                    continue
                z = linalg.solve_triangular(Lm, yc, lower=True)
                vals[m] = -0.5 * z @ z - np.log(np.diag(Lm)).sum() - const
        out[i] = vals.reshape(len(amp), len(length))
    return out


def _neg_lml_and_grad(log_theta, X, yc, n_ls):
    noise, amp = np.exp(log_theta[0]), np.exp(log_theta[1])
    ls = np.exp(log_theta[2:2 + n_ls])
    n = len(yc)
    K = gaussian_kernel(X, X, amp, ls)
    C = K + noise * np.eye(n)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(log_theta)
    a = linalg.cho_solve((L, True), yc)
    lml = -0.5 * yc @ a - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(a, a) - linalg.cho_solve((L, True), np.eye(n))
    grad = np.empty_like(log_theta)
    grad[0] = 0.5 * np.sum(W * (noise * np.eye(n)))
    grad[1] = 0.5 * np.sum(W * K)
    if n_ls == 1:
        sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
        grad[2] = 0.5 * np.sum(W * K * sq / ls[0] ** 2)
    else:
        for d in range(n_ls):
            sq = (X[:, None, d] - X[None, :, d]) ** 2
            grad[2 + d] = 0.5 * np.sum(W * K * sq / ls[d] ** 2)
    return -lml, -grad


def fit_gp(features, hyper_search=None):
    """Fit a zero-mean GP to centred targets, choosing hyperparameters by evidence.

    The grid search is deterministic; with ``refine=True`` the best grid
    point seeds an L-BFGS ascent of the log marginal likelihood (per-dimension
    length scales when ``ard=True``).
    """
    search = hyper_search or GpSearch()
    X = np.asarray(features.X, dtype=np.float64)
    y = np.asarray(features.y, dtype=np.float64)
    if len(y) < 2:
        raise PredictorError(f"insufficient samples: N={len(y)}, need at least 2")
    y_mean = float(y.mean())
    yc = y - y_mean
    noise_ax, amp_ax, len_ax = _grid_axes(X, yc, search)
    lml = _grid_lml(X, yc, noise_ax, amp_ax, len_ax)
    if not np.isfinite(lml).any():
        raise PredictorError("covariance factorization failed for every grid point")
    i, j, k = np.unravel_index(np.argmax(lml), lml.shape)
    noise, amp = noise_ax[i], amp_ax[j]
    ls = np.full(X.shape[1], len_ax[k])
    best = lml[i, j, k]

    if search.refine or search.ard:
        n_ls = X.shape[1] if search.ard else 1
        x0 = np.concatenate([[np.log(noise), np.log(amp)], np.log(ls[:n_ls])])
        res = optimize.minimize(
            _neg_lml_and_grad, x0, args=(X, yc, n_ls), jac=True, method="L-BFGS-B",
            bounds=[(-30.0, 10.0)] * len(x0), options={"maxiter": search.max_refine_iter},
        )
        if np.isfinite(res.fun) and -res.fun >= best:
            noise, amp = np.exp(res.x[0]), np.exp(res.x[1])
            ls = np.broadcast_to(np.exp(res.x[2:]), (X.shape[1],)).copy()
            best = -res.fun

    C = gaussian_kernel(X, X, amp, ls) + noise * np.eye(len(y))
    L, jitter = _chol_with_jitter(C)
    weights = linalg.cho_solve((L, True), yc)
    return GpModel(
        X, y, y_mean, float(noise), float(amp), np.asarray(ls, dtype=np.float64), L, weights,
        jitter, float(best), getattr(features, "lag", None),
    )


def predict_gp(model, x_star):
    x, single = _as_rows(x_star, model.n_features)
    ks = gaussian_kernel(x, model.X_train, model.kernel_amplitude, model.length_scales)
    mean = ks @ model.weights + model.y_mean
    v = linalg.solve_triangular(model.C_chol, ks.T, lower=True)
    c_star = model.kernel_amplitude + model.sigma_y2
    var = _floor(c_star - (v ** 2).sum(0))
    if single:
        return PredictiveDistribution(mean[0], var[0])
    return PredictiveDistribution(mean, var)


# --------------------------------------------------------------------------
# family dispatch and selection
# --------------------------------------------------------------------------

FAMILIES = ("lr", "gp")


def fit_predictor(family, features, gp_search=None):
    if family == "lr":
        return fit_linear_ar(features)
    if family == "gp":
        return fit_gp(features, gp_search)
    raise PredictorError(f"unknown predictor family {family!r}")


def predict(model, x_star):
    if isinstance(model, LinearArModel):
        return predict_linear(model, x_star)
    if isinstance(model, GpModel):
        return predict_gp(model, x_star)
    raise PredictorError(f"not a fitted predictor: {type(model).__name__}")


@dataclass(frozen=True)
class Candidate:
    family: str
    lag: int
    rmse: float
    model: object = field(default=None, compare=False)


def validation_rmse(model, validation):
    if len(validation) == 0:
        raise PredictorError("empty validation window")
    pred = predict(model, validation.X).mean
    return float(np.sqrt(np.mean((np.atleast_1d(pred) - validation.y) ** 2)))


def select_best_predictor(candidates, validation=None):
    """Pick the lowest-RMSE candidate per family; ties go to the smaller lag.

    ``candidates`` are :class:`Candidate` records with precomputed RMSE, or
    fitted models paired with ``validation``, a mapping lag -> validation
    :class:`~gcrfcast.dataset.LagFeatureMatrix`.
    """
    candidates = list(candidates)
    if not candidates:
        raise PredictorError("no candidates")
    scored = []
    for c in candidates:
        if isinstance(c, Candidate):
            scored.append(c)
            continue
        if not validation:
            raise PredictorError("empty validation")
        lag = c.lag if c.lag is not None else c.n_features
        scored.append(Candidate(c.family, lag, validation_rmse(c, validation[lag]), c))
    best = {}
    for c in sorted(scored, key=lambda c: (c.family, c.rmse, c.lag)):
        best.setdefault(c.family, c)
    return best
