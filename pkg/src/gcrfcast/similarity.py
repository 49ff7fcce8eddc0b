"""Node-similarity graphs and the variogram check used to judge them."""
from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse, stats

from . import _kernels

KINDS = ("comorbidity", "js-divergence", "common-history", "ground-truth", "custom")
JSD_MIN = 1e-6
SYMMETRY_TOL = 1e-12
FORMAT_VERSION = 1


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric nonnegative edge weights with a zero diagonal."""

    values: np.ndarray
    kind: str = "custom"
    timestep: object = None

    def __post_init__(self):
        S = np.array(self.values, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise SimilarityError(f"similarity must be square, got shape {S.shape}")
        if not np.all(np.isfinite(S)):
            raise SimilarityError("similarity contains non-finite values")
        if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(S).max(initial=0.0)):
            raise SimilarityError("similarity matrix is not symmetric")
        if (S < 0).any():
            raise SimilarityError("similarity matrix has negative entries")
        S = 0.5 * (S + S.T)
        np.fill_diagonal(S, 0.0)
        S.setflags(write=False)
        object.__setattr__(self, "values", S)

    @property
    def n_nodes(self):
        return self.values.shape[0]

    def edges(self):
        """Upper-triangle (i, j, s) triples with ``s > 0``."""
        iu, ju = np.nonzero(np.triu(self.values, k=1))
        return list(zip(iu.tolist(), ju.tolist(), self.values[iu, ju].tolist()))

    def to_sparse(self):
        return sparse.csr_matrix(self.values)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def comorbidity_similarity(records: Iterable, node_ids, measure="count", on_unknown="fail"):
    """Co-occurrence of node codes across records.

    ``count`` gives the number of records listing both nodes; ``jaccard``
    divides that by the number of records listing either.
    """
    if measure not in ("count", "jaccard"):
        raise SimilarityError(f"unknown comorbidity measure {measure!r}")
    if on_unknown not in ("fail", "skip"):
        raise SimilarityError(f"on_unknown must be 'fail' or 'skip', got {on_unknown!r}")
    index = {n: i for i, n in enumerate(node_ids)}
    N = len(index)
    both = np.zeros((N, N))
    occurs = np.zeros(N)
    for r, rec in enumerate(records):
        codes = set(rec)
        if not codes:
            raise SimilarityError(f"record {r} lists no disease codes")
        unknown = codes - index.keys()
        if unknown:
            if on_unknown == "fail":
                raise SimilarityError(f"record {r}: unknown codes {sorted(map(str, unknown))}")
            codes -= unknown
        idx = np.array(sorted(index[c] for c in codes), dtype=np.int64)
        occurs[idx] += 1
        both[np.ix_(idx, idx)] += 1
    np.fill_diagonal(both, 0.0)
    if measure == "count":
        return SimilarityMatrix(both, "comorbidity")
    either = occurs[:, None] + occurs[None, :] - both
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.where(either > 0, both / np.where(either > 0, either, 1.0), 0.0)
    return SimilarityMatrix(S, "comorbidity")


def jensen_shannon(p, q):
    """JSD in nats with ``0 log 0 = 0``."""
    P = np.vstack([np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)])
    return float(_kernels.jsd_matrix(P)[0, 1])


def js_divergence_similarity(distributions, s_max=None, timestep=None):
    """``S_ij = 1 / JSD(P_i || P_j)``, capped at ``1 / JSD_MIN``."""
    P = np.asarray(distributions, dtype=np.float64)
    if P.ndim != 2:
        raise SimilarityError("distributions must be an N x B array of histograms")
    if (P < 0).any():
        bad = int(np.argwhere(P < 0)[0, 0])
        raise SimilarityError(f"histogram {bad} has a negative bin")
    sums = P.sum(axis=1)
    off = np.flatnonzero(np.abs(sums - 1.0) > 1e-8)
    if off.size:
        raise SimilarityError(f"histogram {int(off[0])} sums to {sums[off[0]]!r}, not 1")
    s_max = 1.0 / JSD_MIN if s_max is None else s_max
    jsd = _kernels.jsd_matrix(P)
    if jsd.max(initial=0.0) > np.log(2.0) + 1e-12:
        raise SimilarityError("JS divergence exceeded ln 2")
    with np.errstate(divide="ignore"):
        S = np.where(jsd > 0, 1.0 / np.where(jsd > 0, jsd, 1.0), s_max)
    S = np.minimum(S, s_max)
    return SimilarityMatrix(S, "js-divergence", timestep)


def attribute_histograms(dataset, attribute, t, h, bins=10):
    """Per-node normalized histograms of an attribute over timesteps ``t-h .. t-1``.

    All nodes share bin edges spanning the pooled window so the histograms
    have common support.
    """
    if t < h:
        raise SimilarityError(f"insufficient history: t={t} < h={h}")
    window = dataset.attribute(attribute)[t - h:t]
    if np.isnan(window).any():
        raise SimilarityError(f"attribute {attribute!r} not observed over the history window")
    lo, hi = window.min(), window.max()
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    H = np.empty((dataset.n_nodes, bins))
    for j in range(dataset.n_nodes):
        H[j], _ = np.histogram(window[:, j], bins=edges)
    return H / H.sum(axis=1, keepdims=True)


def common_history_similarity(dataset, attribute, h, t, expansion=False):
    """``S_ij = exp(-mean_s |x_i(t-s) - x_j(t-s)|)`` for ``s = 1..h``.

    ``t`` is a timestep index; only data strictly before ``t`` is read.
    ``expansion=True`` takes the absolute value of the summed differences
    instead (the two-step written-out variant).
    """
    if h < 1:
        raise SimilarityError("history length h must be >= 1")
    if t < h:
        raise SimilarityError(f"insufficient history: t={t} < h={h}")
    window = dataset.attribute(attribute)[t - h:t]
    if np.isnan(window).any():
        raise SimilarityError(f"attribute {attribute!r} not observed for all nodes over [t-h, t-1]")
    X = np.ascontiguousarray(window[::-1].T)
    label = dataset.timesteps[t] if t < dataset.n_timesteps else t
    return SimilarityMatrix(_kernels.common_history(X, expansion), "common-history", label)


def sparsify(similarity, top_k=None, threshold=None):
    """Keep each node's ``top_k`` strongest edges and/or edges above ``threshold``.

    An edge survives top-k selection if either endpoint keeps it.  Entries
    at or below ``threshold`` are dropped (``threshold=0`` keeps every
    positive edge).
    """
    if top_k is None and threshold is None:
        raise SimilarityError("give top_k or threshold")
    S = np.array(similarity.values)
    keep = np.ones_like(S, dtype=bool)
    if top_k is not None:
        if top_k < 1:
            raise SimilarityError("top_k must be >= 1")
        chosen = np.zeros_like(keep)
        order = np.argsort(-S, axis=1, kind="stable")
        for i in range(S.shape[0]):
            cand = [j for j in order[i] if j != i and S[i, j] > 0][:top_k]
            chosen[i, cand] = True
        keep &= chosen | chosen.T
    if threshold is not None:
        if threshold < 0:
            raise SimilarityError("threshold must be >= 0")
        keep &= S > threshold
    return SimilarityMatrix(np.where(keep, S, 0.0), similarity.kind, similarity.timestep)


def parse_sparsify_rule(rule):
    """``"none"``, ``"topk:K"`` or ``"threshold:X"`` -> keyword arguments."""
    rule = (rule or "none").strip()
    if rule == "none":
        return {}
    name, _, arg = rule.partition(":")
    if name == "topk":
        return {"top_k": int(arg)}
    if name == "threshold":
        return {"threshold": float(arg)}
    raise SimilarityError(f"unknown sparsify rule {rule!r}")


# --------------------------------------------------------------------------
# variogram
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VariogramReport:
    bins: np.ndarray  # (n_bins, 2) similarity intervals
    gamma: np.ndarray
    overall_variance: float
    n_pairs: np.ndarray
    spearman: float
    spearman_pvalue: float
    verdict: str
    criteria: dict = field(default_factory=dict)


def _merge_small_bins(counts, sums, lo_edges, hi_edges, min_pairs):
    counts, sums = list(counts), list(sums)
    lo_edges, hi_edges = list(lo_edges), list(hi_edges)
    i = 0
    while i < len(counts):
        if counts[i] >= min_pairs or len(counts) == 1:
            i += 1
            continue
        # merge rightward; the last bin merges into its left neighbour
        j = i + 1 if i + 1 < len(counts) else i - 1
        a, b = min(i, j), max(i, j)
        counts[a] += counts[b]
        sums[a] += sums[b]
        hi_edges[a] = hi_edges[b]
        del counts[b], sums[b], lo_edges[b], hi_edges[b]
        i = a
    return np.array(counts), np.array(sums), np.column_stack([lo_edges, hi_edges])


def variogram(similarity, targets, n_bins=20, min_pairs=10, alpha=0.05):
    """Mean half squared target difference of node pairs, binned by similarity.

    Every unordered pair ``i < j`` is binned on ``S_ij`` into equal-width
    bins over ``[min S, max S]``; bins with fewer than ``min_pairs`` pairs
    are merged rightward.  The verdict is ``good`` when the top-similarity
    bin sits below the overall target variance and the bin-index/gamma
    Spearman correlation is negative at one-sided level ``alpha``.
    """
    if n_bins < 2:
        raise SimilarityError("n_bins must be >= 2")
    S = similarity.values if isinstance(similarity, SimilarityMatrix) else np.asarray(similarity)
    y = np.asarray(targets, dtype=np.float64)
    if len(y) != S.shape[0]:
        raise SimilarityError("targets length does not match similarity size")
    iu, ju = np.triu_indices(len(y), k=1)
    s = S[iu, ju]
    smin, smax = float(s.min()), float(s.max())
    if not smax > smin:
        raise SimilarityError("degenerate similarity: all pair similarities are equal")
    edges = np.linspace(smin, smax, n_bins + 1)
    counts, sums = _kernels.pair_bin_stats(np.ascontiguousarray(S), y, edges)
    keep = counts > 0
    counts, sums, bins = _merge_small_bins(
        counts[keep], sums[keep], edges[:-1][keep], edges[1:][keep], min_pairs
    )
    gamma = sums / counts
    overall = float(np.var(y, ddof=1))
    if len(gamma) > 1 and np.ptp(gamma) > 0:
        rho, p_two = stats.spearmanr(np.arange(len(gamma)), gamma)
        rho = float(rho)
        p_one = float(p_two / 2 if rho < 0 else 1 - p_two / 2)
    else:
        rho, p_one = 0.0, 1.0
    if np.all(gamma == 0):
        below, decreasing = True, True
    else:
        below = bool(gamma[-1] < overall)
        decreasing = bool(rho < 0 and p_one < alpha)
    verdict = "good" if below and decreasing else "bad"
    return VariogramReport(
        bins, gamma, overall, counts, rho, p_one, verdict,
        {"top_bin_below_variance": below, "decreasing_trend": decreasing},
    )


# --------------------------------------------------------------------------
# triplet text format
# --------------------------------------------------------------------------


def dumps_similarity(similarity):
    lines = [
        f"# format-version {FORMAT_VERSION}",
        f"kind={similarity.kind} N={similarity.n_nodes} timestep={similarity.timestep}",
    ]
    lines += [f"{i} {j} {s!r}" for i, j, s in similarity.edges()]
    return "\n".join(lines) + "\n"


def loads_similarity(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# format-version"):
        raise SimilarityError("missing format-version line")
    version = int(lines[0].split()[-1])
    if version != FORMAT_VERSION:
        raise SimilarityError(f"unsupported similarity format version {version}")
    header = dict(tok.split("=", 1) for tok in lines[1].split())
    N = int(header["N"])
    ts = header.get("timestep", "None")
    timestep = None if ts == "None" else (int(ts) if ts.lstrip("-").isdigit() else ts)
    S = np.zeros((N, N))
    for ln in lines[2:]:
        i, j, v = ln.split()
        i, j = int(i), int(j)
        if not i < j:
            raise SimilarityError(f"triplet rows need i < j, got {i} {j}")
        S[i, j] = S[j, i] = float(v)
    return SimilarityMatrix(S, header.get("kind", "custom"), timestep)


def save_similarity(similarity, path):
    Path(path).write_text(dumps_similarity(similarity), encoding="utf-8")


def load_similarity(path):
    return loads_similarity(Path(path).read_text(encoding="utf-8"))
