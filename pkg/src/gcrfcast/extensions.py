"""Uncertainty-aware alpha functions: uGCRF and ufGCRF.

uGCRF rescales each predictor's alpha by the inverse of that predictor's
own predictive variance at the node, with one coefficient per prediction
horizon and a validation coverage multiplier.  ufGCRF makes log alpha a
small tanh network of per-node input features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gcrf import (
    GcrfError,
    GcrfParams,
    QuasiNewtonConfig,
    infer,
    maximize,
    total_loglik,
    train_gcrf,
)
from .predictors import VARIANCE_FLOOR, PredictiveDistribution, predict

CI_FLOOR = 0.01
Z95 = 1.96


# --------------------------------------------------------------------------
# coverage quality index
# --------------------------------------------------------------------------


def coverage_fraction(mean, variance, truth):
    mean, variance, truth = (np.asarray(a, dtype=np.float64) for a in (mean, variance, truth))
    if truth.size == 0:
        raise GcrfError("empty validation window")
    return float(np.mean(np.abs(truth - mean) <= Z95 * np.sqrt(variance)))


def compute_ci_index(predictor, validation=None, horizon=None, ci_floor=CI_FLOOR):
    """Fraction of validation targets inside the predictor's 95% interval.

    ``predictor`` is a fitted base model evaluated on ``validation`` (a lag
    feature matrix), or directly a ``(mean, variance, truth)`` triple of
    arrays already restricted to ``horizon``.  The result is floored at
    ``ci_floor``.
    """
    if isinstance(predictor, tuple):
        mean, variance, truth = predictor
    else:
        if validation is None or len(validation) == 0:
            raise GcrfError("empty validation window")
        dist = predict(predictor, validation.X)
        mean, variance, truth = dist.mean, dist.variance, validation.y
    return max(coverage_fraction(mean, variance, truth), ci_floor)


# --------------------------------------------------------------------------
# uGCRF
# --------------------------------------------------------------------------


def ugcrf_alpha(u, ci, sigma2):
    """``exp(u) * ci / sigma2``."""
    return np.exp(u) * ci / np.maximum(sigma2, VARIANCE_FLOOR)


@dataclass(eq=False)
class UgcrfParams:
    """``u`` is ``K x P`` (or ``K x 1`` when one coefficient is shared by all
    horizons); ``ci`` is always ``K x P``."""

    u: np.ndarray
    v: np.ndarray
    ci: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    model = "ugcrf"

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        self.ci = np.atleast_2d(np.asarray(self.ci, dtype=np.float64))
        if self.u.shape[0] != self.ci.shape[0]:
            raise GcrfError("u and ci disagree on the number of predictors")
        if self.u.shape[1] not in (1, self.ci.shape[1]):
            raise GcrfError("u must have one column or one per horizon")
        if (self.ci <= 0).any() or (self.ci > 1).any():
            raise GcrfError("ci values must lie in (0, 1]")

    @property
    def P(self):
        return self.ci.shape[1]

    @property
    def shared_u(self):
        return self.u.shape[1] == 1 and self.P > 1

    def _column(self, snapshot):
        if snapshot.sigma2 is None:
            raise GcrfError("uGCRF needs the predictors' variance (sigma2) channel")
        p = snapshot.horizon if snapshot.horizon is not None else 1
        if not 1 <= p <= self.P:
            raise GcrfError(f"horizon {p} outside 1..{self.P}")
        return p - 1, (0 if self.u.shape[1] == 1 else p - 1)

    def alphas(self, snapshot):
        pc, uc = self._column(snapshot)
        if snapshot.K != self.u.shape[0]:
            raise GcrfError(f"params have K={self.u.shape[0]}, snapshot has K={snapshot.K}")
        return ugcrf_alpha(self.u[:, uc][:, None], self.ci[:, pc][:, None], snapshot.sigma2)

    def betas(self, snapshot):
        if len(self.v) != snapshot.L:
            raise GcrfError(f"params have L={len(self.v)}, snapshot has L={snapshot.L}")
        return np.exp(self.v)

    def pack(self):
        return np.concatenate([self.u.ravel(), self.v])

    def unpack(self, theta):
        n = self.u.size
        return UgcrfParams(theta[:n].reshape(self.u.shape), theta[n:], self.ci)

    def chain(self, snapshot, g_logalpha, g_logbeta):
        _, uc = self._column(snapshot)
        du = np.zeros_like(self.u)
        du[:, uc] = g_logalpha.sum(axis=1)
        return du, g_logbeta


def train_ugcrf(snapshots, ci, init=None, optimizer=None, shared_u=False):
    """Fit ``u`` (per predictor and horizon) and ``v`` with ``ci`` held fixed."""
    snapshots = list(snapshots)
    if not snapshots:
        raise GcrfError("no training snapshots")
    ci = np.atleast_2d(np.asarray(ci, dtype=np.float64))
    for s in snapshots:
        if s.sigma2 is None:
            raise GcrfError("missing sigma2 channel in a training snapshot")
    first = snapshots[0]
    if init is None:
        cols = 1 if shared_u else ci.shape[1]
        init = UgcrfParams(np.zeros((first.K, cols)), np.zeros(first.L), ci)
    return maximize(init, snapshots, optimizer or QuasiNewtonConfig())


# --------------------------------------------------------------------------
# ufGCRF network
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: int = 8
    activation: str = "tanh"

    @property
    def n_params(self):
        if self.hidden == 0:
            return self.input_dim + 1
        return self.hidden * self.input_dim + 2 * self.hidden + 1


def _split(theta, arch):
    D, H = arch.input_dim, arch.hidden
    if H == 0:
        return theta[:D], theta[D]
    W1 = theta[:H * D].reshape(H, D)
    b1 = theta[H * D:H * D + H]
    w2 = theta[H * D + H:H * D + 2 * H]
    b2 = theta[-1]
    return W1, b1, w2, b2


def nn_forward(theta, x, arch=None):
    """Scalar network output ``u`` for one feature vector or a batch of rows.

    One tanh hidden layer, ``u = w2 . tanh(W1 x + b1) + b2``; with zero
    hidden units the net is the linear map ``u = w . x + b``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    arch = arch or Architecture(X.shape[1])
    if X.shape[1] != arch.input_dim:
        raise GcrfError(f"feature dimension {X.shape[1]} != network input {arch.input_dim}")
    if theta.size != arch.n_params:
        raise GcrfError(f"theta has {theta.size} entries, architecture needs {arch.n_params}")
    if arch.hidden == 0:
        w, b = _split(theta, arch)
        out = X @ w + b
    else:
        W1, b1, w2, b2 = _split(theta, arch)
        out = np.tanh(X @ W1.T + b1) @ w2 + b2
    return out[0] if single else out


def nn_backward(theta, X, arch, upstream):
    """``sum_i upstream_i * d u(x_i) / d theta``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    g = np.asarray(upstream, dtype=np.float64)
    if arch.hidden == 0:
        return np.concatenate([X.T @ g, [g.sum()]])
    W1, b1, w2, _ = _split(np.asarray(theta, dtype=np.float64), arch)
    Hd = np.tanh(X @ W1.T + b1)
    dpre = (g[:, None] * w2[None, :]) * (1.0 - Hd ** 2)
    return np.concatenate([(dpre.T @ X).ravel(), dpre.sum(0), Hd.T @ g, [g.sum()]])


def init_theta(arch, rng, scale=0.1):
    return rng.uniform(-scale, scale, size=arch.n_params)


@dataclass(eq=False)
class UfgcrfParams:
    """Per-predictor network weights ``theta`` (``K x n_params``) and ``v``.

    Features are standardized with the stored ``feature_mean`` and
    ``feature_scale`` before entering the networks.
    """

    theta: np.ndarray
    v: np.ndarray
    arch: Architecture
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    model = "ufgcrf"

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        if self.theta.shape[1] != self.arch.n_params:
            raise GcrfError("theta width does not match the architecture")

    def inputs(self, snapshot):
        if snapshot.features is None:
            raise GcrfError("ufGCRF needs the per-node features channel")
        F = snapshot.features
        if F.shape[1] != self.arch.input_dim:
            raise GcrfError(f"snapshot features have {F.shape[1]} columns, expected {self.arch.input_dim}")
        return (F - self.feature_mean) / self.feature_scale

    def log_alphas(self, snapshot):
        X = self.inputs(snapshot)
        if snapshot.K != self.theta.shape[0]:
            raise GcrfError(f"params have K={self.theta.shape[0]}, snapshot has K={snapshot.K}")
        return np.vstack([nn_forward(t, X, self.arch) for t in self.theta])

    def alphas(self, snapshot):
        return np.exp(self.log_alphas(snapshot))

    def betas(self, snapshot):
        if len(self.v) != snapshot.L:
            raise GcrfError(f"params have L={len(self.v)}, snapshot has L={snapshot.L}")
        return np.exp(self.v)

    def pack(self):
        return np.concatenate([self.theta.ravel(), self.v])

    def unpack(self, z):
        n = self.theta.size
        return UfgcrfParams(
            z[:n].reshape(self.theta.shape), z[n:], self.arch, self.feature_mean, self.feature_scale
        )

    def chain(self, snapshot, g_logalpha, g_logbeta):
        X = self.inputs(snapshot)
        dtheta = np.vstack([
            nn_backward(t, X, self.arch, g_logalpha[k]) for k, t in enumerate(self.theta)
        ])
        return dtheta, g_logbeta


@dataclass(frozen=True)
class GradientAscentConfig:
    hidden: int = 8
    step: float = 1e-2
    max_epochs: int = 2000
    tol: float = 1e-7
    patience: int = 10
    max_halvings: int = 5
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    init_scale: float = 0.1
    warm_start: bool = True
    method: str = "gradient"  # or "lbfgs": quasi-Newton, max_epochs iterations
    weight_decay: float = 0.0  # L2 penalty on network weights (output bias exempt)


def _feature_stats(snapshots):
    F = np.vstack([s.features for s in snapshots])
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    return mean, scale


def train_ufgcrf(snapshots, init=None, config=None):
    """Gradient ascent of the mean per-node log-likelihood through the networks.

    Without ``init`` the networks start from seeded uniform weights; with
    ``warm_start`` the output biases and ``v`` are taken from a shared-alpha
    GCRF fit so the networks only learn deviations from it.  If the
    objective worsens for ``patience`` consecutive epochs the step is
    halved; after ``max_halvings`` halvings training stops.  The best
    iterate seen is returned.

    ``method="lbfgs"`` replaces the fixed-step loop by bounded L-BFGS on the
    same objective, with ``max_epochs`` as the iteration cap.  A positive
    ``weight_decay`` subtracts ``weight_decay / 2 * |w|^2`` over all network
    weights except each output bias.
    """
    cfg = config or GradientAscentConfig()
    if cfg.method not in ("gradient", "lbfgs"):
        raise GcrfError(f"unknown ufGCRF training method {cfg.method!r}")
    snapshots = list(snapshots)
    if not snapshots:
        raise GcrfError("no training snapshots")
    for s in snapshots:
        if s.features is None:
            raise GcrfError("missing features channel in a training snapshot")
    rng = np.random.default_rng(cfg.seed)
    first = snapshots[0]
    if init is None:
        arch = Architecture(first.features.shape[1], cfg.hidden)
        mean, scale = _feature_stats(snapshots)
        theta = np.vstack([init_theta(arch, rng, cfg.init_scale) for _ in range(first.K)])
        v = np.zeros(first.L)
        if cfg.warm_start:
            base = train_gcrf(snapshots, mode="shared", optimizer=QuasiNewtonConfig(max_iter=200))
            theta[:, -1] = base.u
            v = base.v.copy()
        init = UfgcrfParams(theta, v, arch, mean, scale)

    n_nodes = sum(s.N for s in snapshots)
    mask = np.zeros(init.pack().size)
    mask[:init.theta.size] = 1.0
    mask[init.theta.shape[1] - 1:init.theta.size:init.theta.shape[1]] = 0.0

    def penalty(x):
        w = mask * x
        return 0.5 * cfg.weight_decay * float(w @ w), cfg.weight_decay * w

    if cfg.method == "lbfgs":
        out = maximize(init, snapshots, QuasiNewtonConfig(max_iter=cfg.max_epochs, gtol=cfg.tol),
                       penalty=penalty if cfg.weight_decay > 0 else None)
        out.info["loglik_per_node"] = out.info["loglik"] / n_nodes
        out.info["n_nodes"] = n_nodes
        return out
    order = np.arange(len(snapshots))

    def evaluate(p, batch):
        ll, g = total_loglik(p, [snapshots[i] for i in batch])
        w = sum(snapshots[i].N for i in batch)
        pv, pg = penalty(p.pack())
        return ll / w - pv, g / w - pg

    params = init
    z = params.pack()
    best_z, best_obj = z.copy(), -np.inf
    step = cfg.step
    worse_run = halvings = 0
    prev = None
    history = []
    converged = False
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        obj, g = evaluate(params.unpack(z), order)
        if not (np.isfinite(obj) and np.all(np.isfinite(g))):
            halvings += 1
            if halvings > cfg.max_halvings:
                break
            step *= 0.5
            z = best_z.copy()
            continue
        history.append(obj)
        if obj > best_obj:
            best_obj, best_z = obj, z.copy()
        worse_run = worse_run + 1 if prev is not None and obj < prev else 0
        prev = obj
        if worse_run >= cfg.patience:
            halvings += 1
            if halvings > cfg.max_halvings:
                break
            step *= 0.5
            worse_run = 0
            z, prev = best_z.copy(), best_obj
            continue
        if np.max(np.abs(g), initial=0.0) < cfg.tol:
            converged = True
            break
        if cfg.batch_size:
            perm = rng.permutation(len(snapshots))
            for i in range(0, len(perm), cfg.batch_size):
                _, gb = evaluate(params.unpack(z), perm[i:i + cfg.batch_size])
                z = z + step * gb
        else:
            z = z + step * g
    out = params.unpack(best_z)
    out.info = {
        "converged": converged,
        "epochs": epoch,
        "final_step": step,
        "halvings": halvings,
        "loglik_per_node": best_obj,
        "objective_history": history,
        "n_nodes": n_nodes,
    }
    return out


def default_features(lag_values, sigma2):
    """Per-node network inputs: lag values followed by log predictor variances."""
    lag_values = np.atleast_2d(np.asarray(lag_values, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    return np.hstack([lag_values, np.log(np.maximum(s2, VARIANCE_FLOOR)).T])


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def predict_structured(model, snapshot, method="auto"):
    """Posterior mean and marginal variance for any of the three models."""
    if not isinstance(model, (GcrfParams, UgcrfParams, UfgcrfParams)):
        raise GcrfError(f"not a structured model: {type(model).__name__}")
    alpha = model.alphas(snapshot)
    beta = model.betas(snapshot)
    _, post = infer(alpha, beta, snapshot, method)
    return PredictiveDistribution(post.mu, post.var_diag)
