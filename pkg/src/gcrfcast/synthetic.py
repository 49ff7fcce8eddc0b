"""Seeded evolving-graph datasets with planted structure.

All randomness comes from numpy's PCG64 bit generator seeded with the
configured integer, so a config file fully determines the output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import linalg

from .dataset import TemporalGraphDataset
from .gcrf import GcrfSnapshot, precision_from, b_from
from .kvconfig import ConfigError, as_bool, dumps_kv, parse_kv
from .similarity import SimilarityMatrix

RNG_NAME = "PCG64"


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    Deviations from each node's base level follow

        z_t = ar1 * z_{t-1} + homophily * mean_{j ~ i} z_{j,t-1} + seasonal_t + eps_t

    on a planted community graph.  ``noise_low``/``noise_high`` bound the
    per-node innovation variance (equal values give homoscedastic noise).
    With ``regime_threshold`` set, a node whose previous target value
    (level plus deviation, i.e. its lag-1 feature) exceeds the threshold
    draws its innovation with ``regime_factor`` times the variance.

    ``obs_noise`` adds independent measurement noise (standard deviation)
    to the reported targets without feeding it back into the dynamics.
    ``community_noise`` is the variance of an innovation shared by all
    members of a community.  ``common_phase`` gives every community the
    same seasonal phase (zero) instead of a random one.
    """

    n_nodes: int = 50
    n_timesteps: int = 120
    seed: int = 0
    homophily: float = 0.5
    ar1: float = 0.3
    noise_low: float = 0.01
    noise_high: float = 0.01
    seasonal_amplitude: float = 0.0
    seasonal_period: int = 12
    n_communities: int = 5
    p_in: float = 0.5
    p_out: float = 0.02
    level_spread: float = 1.0
    level_offset: float = 0.1
    aux_noise: float = 0.05
    regime_threshold: float | None = None
    regime_factor: float = 10.0
    burn_in: int = 50
    obs_noise: float = 0.0
    community_noise: float = 0.0
    common_phase: bool = False
    rng: str = RNG_NAME

    def __post_init__(self):
        if self.n_nodes < 2 or self.n_timesteps < 2:
            raise SynthError("need at least 2 nodes and 2 timesteps")
        if not -1 < self.ar1 < 1:
            raise SynthError("ar1 coefficient must lie in (-1, 1)")
        if self.homophily < 0:
            raise SynthError("homophily must be >= 0")
        if not 0 < self.noise_low <= self.noise_high:
            raise SynthError("need 0 < noise_low <= noise_high")
        if self.obs_noise < 0 or self.community_noise < 0:
            raise SynthError("obs_noise and community_noise must be >= 0")
        if self.rng != RNG_NAME:
            raise SynthError(f"unsupported rng {self.rng!r}; only {RNG_NAME} is available")

    @property
    def heteroscedastic(self):
        return self.noise_high > self.noise_low

    def to_text(self):
        d = {k: ("none" if v is None else str(v).lower() if isinstance(v, bool) else v)
             for k, v in asdict(self).items()}
        return dumps_kv(d)

    @classmethod
    def from_mapping(cls, mapping, prefix=""):
        kw = {}
        for f in fields(cls):
            key = prefix + f.name
            if key not in mapping:
                continue
            raw = str(mapping[key]).strip()
            if f.name == "rng":
                kw[f.name] = raw
            elif f.name == "common_phase":
                kw[f.name] = as_bool(raw)
            elif raw.lower() == "none":
                kw[f.name] = None
            elif f.name in ("n_nodes", "n_timesteps", "seed", "seasonal_period",
                            "n_communities", "burn_in"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        known = {prefix + f.name for f in fields(cls)}
        extra = [k for k in mapping if k.startswith(prefix) and k not in known] if prefix else []
        if extra:
            raise ConfigError(f"unknown synthetic config keys: {sorted(extra)}")
        return cls(**kw)

    @classmethod
    def from_text(cls, text):
        mapping = parse_kv(text)
        return cls.from_mapping(mapping)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def community_graph(n_nodes, n_communities, p_in, p_out, rng):
    """Symmetric 0/1 adjacency with planted communities and their labels."""
    labels = np.arange(n_nodes) % max(n_communities, 1)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n_nodes, n_nodes))
    A = np.triu(draw < prob, k=1)
    A = (A | A.T).astype(np.float64)
    return A, labels


def _row_mean_operator(A):
    deg = A.sum(axis=1)
    W = np.zeros_like(A)
    nz = deg > 0
    W[nz] = A[nz] / deg[nz, None]
    return W


def generate_ar_graph(config):
    """Simulate node series on a planted graph.

    Returns the dataset (targets plus an ``aux`` attribute, a noisy copy of
    the targets) and the ground-truth coupling graph.
    """
    cfg = config
    rng = make_rng(cfg.seed)
    N, T = cfg.n_nodes, cfg.n_timesteps
    A, labels = community_graph(N, cfg.n_communities, cfg.p_in, cfg.p_out, rng)
    W = _row_mean_operator(A)
    M = cfg.ar1 * np.eye(N) + cfg.homophily * W
    radius = float(np.max(np.abs(np.linalg.eigvals(M))))
    if radius >= 1.0:
        raise SynthError(f"unstable configuration: spectral radius {radius:.4f} >= 1")

    comm_level = rng.uniform(0.0, cfg.level_spread, size=max(cfg.n_communities, 1))
    level = comm_level[labels] + cfg.level_offset * rng.standard_normal(N)
    if cfg.heteroscedastic:
        noise_var = np.exp(rng.uniform(np.log(cfg.noise_low), np.log(cfg.noise_high), size=N))
    else:
        noise_var = np.full(N, cfg.noise_low)
    phase = rng.uniform(0.0, 2 * np.pi, size=max(cfg.n_communities, 1))[labels]
    if cfg.common_phase:
        phase = np.zeros(N)

    total = T + cfg.burn_in
    z = np.zeros(N)
    Z = np.empty((total, N))
    for t in range(total):
        var = noise_var
        if cfg.regime_threshold is not None:
            var = np.where(level + z > cfg.regime_threshold, noise_var * cfg.regime_factor, noise_var)
        seasonal = cfg.seasonal_amplitude * np.sin(2 * np.pi * t / cfg.seasonal_period + phase)
        z = M @ z + seasonal + np.sqrt(var) * rng.standard_normal(N)
        if cfg.community_noise > 0:
            shock = rng.standard_normal(max(cfg.n_communities, 1))
            z = z + np.sqrt(cfg.community_noise) * shock[labels]
        Z[t] = z
    y = level[None, :] + Z[cfg.burn_in:]
    aux = y + cfg.aux_noise * rng.standard_normal(y.shape)
    if cfg.obs_noise > 0:
        y = y + cfg.obs_noise * rng.standard_normal(y.shape)
    node_ids = tuple(f"n{i:03d}" for i in range(N))
    ds = TemporalGraphDataset(node_ids, tuple(range(T)), y, {"aux": aux})
    return ds, SimilarityMatrix(A, "ground-truth")


def generate_gcrf_exact(n_nodes, alpha, beta, S, R_process=None, n_snapshots=100, seed=0):
    """Snapshots whose targets are exact draws ``y ~ N(Q^{-1} b, Q^{-1})``.

    ``alpha`` has one entry per predictor (``K``) and ``beta`` one per
    similarity in ``S``.  ``R_process(rng, n_nodes)`` returns the ``K x N``
    predictor outputs of a snapshot; by default they are uniform on [0, 1).
    """
    rng = make_rng(seed)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    S_list = list(S) if isinstance(S, (list, tuple)) else [S]
    if (alpha <= 0).any() or (beta < 0).any():
        raise SynthError("alpha must be positive and beta nonnegative")
    if len(beta) != len(S_list):
        raise SynthError("one beta per similarity matrix")
    if R_process is None:
        def R_process(r, n):
            return r.random((len(alpha), n))
    A = np.repeat(alpha[:, None], n_nodes, axis=1)
    proto = GcrfSnapshot(np.zeros((len(alpha), n_nodes)), S_list)
    # Q does not depend on R, so one factorization serves every snapshot
    L = np.linalg.cholesky(precision_from(A, beta, proto.laplacians).toarray())
    out = []
    for i in range(n_snapshots):
        R = np.atleast_2d(R_process(rng, n_nodes))
        mu = linalg.cho_solve((L, True), b_from(A, R))
        y = mu + linalg.solve_triangular(L.T, rng.standard_normal(n_nodes), lower=False)
        out.append(proto.with_values(R, y, label=i))
    return out
