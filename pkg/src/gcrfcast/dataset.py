"""Evolving-graph datasets with target scaling and lag features."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Raised for malformed input files or invalid dataset operations."""


@dataclass(frozen=True)
class TemporalGraphDataset:
    """Node targets and attributes over a fixed node set and ordered timesteps.

    ``targets`` and every attribute array are ``T x N``; unobserved entries
    hold NaN and are flagged False in ``masks``.
    """

    node_ids: tuple
    timesteps: tuple
    targets: np.ndarray
    attributes: dict = field(default_factory=dict)
    masks: np.ndarray | None = None

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        T, N = len(self.timesteps), len(self.node_ids)
        if targets.shape != (T, N):
            raise DatasetError(f"targets shape {targets.shape} != ({T}, {N})")
        masks = ~np.isnan(targets) if self.masks is None else np.asarray(self.masks, dtype=bool)
        attrs = {}
        for name, arr in self.attributes.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (T, N):
                raise DatasetError(f"attribute {name!r} shape {arr.shape} != ({T}, {N})")
            arr.setflags(write=False)
            attrs[name] = arr
        targets.setflags(write=False)
        masks.setflags(write=False)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "timesteps", tuple(self.timesteps))
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "attributes", attrs)

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_timesteps(self):
        return len(self.timesteps)

    def attribute(self, name):
        """Attribute matrix by name; ``"target"`` aliases the targets."""
        if name == "target":
            return self.targets
        try:
            return self.attributes[name]
        except KeyError:
            raise DatasetError(f"unknown attribute {name!r}") from None

    def node_index(self, node):
        try:
            return self.node_ids.index(node)
        except ValueError:
            raise DatasetError(f"unknown node {node!r}") from None

    def fully_observed(self):
        return bool(self.masks.all())

    def __eq__(self, other):
        if not isinstance(other, TemporalGraphDataset):
            return NotImplemented
        return (
            self.node_ids == other.node_ids
            and self.timesteps == other.timesteps
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.targets, other.targets, equal_nan=True)
            and self.attributes.keys() == other.attributes.keys()
            and all(
                np.array_equal(a, other.attributes[k], equal_nan=True)
                for k, a in self.attributes.items()
            )
        )

    __hash__ = None


@dataclass(frozen=True)
class Schema:
    """Column mapping for long-format node series files."""

    timestep: str = "timestep"
    node_id: str = "node_id"
    target: str = "target"
    attributes: tuple | None = None  # None: every remaining column
    delimiter: str = ","


def _parse_float(text, what, lineno):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DatasetError(f"row {lineno}: non-numeric {what} {text!r}") from None


def ingest_node_series(source, schema=None):
    """Read a long-format (timestep, node_id, target, attributes...) table.

    ``source`` is a path or an open text handle.  Timesteps and nodes are
    ordered by first appearance after sorting timesteps numerically; any
    missing (timestep, node) cell is left unobserved.
    """
    schema = schema or Schema()
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest_node_series(fh, schema)

    lines = [ln for ln in source.read().splitlines()]
    offset = 0
    if lines and lines[0].startswith("# format-version"):
        offset = 1
    reader = csv.reader(lines[offset:], delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty file") from None
    header = [h.strip() for h in header]
    for col in (schema.timestep, schema.node_id, schema.target):
        if col not in header:
            raise DatasetError(f"missing column {col!r} in header {header}")
    it, inode, iy = (header.index(c) for c in (schema.timestep, schema.node_id, schema.target))
    if schema.attributes is None:
        attr_names = [h for i, h in enumerate(header) if i not in (it, inode, iy)]
    else:
        attr_names = list(schema.attributes)
        for a in attr_names:
            if a not in header:
                raise DatasetError(f"missing attribute column {a!r}")
    iattr = [header.index(a) for a in attr_names]

    records = {}
    first_row = {}
    node_order = []
    seen_nodes = set()
    for lineno, row in enumerate(reader, start=offset + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        t_text = row[it].strip()
        try:
            t = int(t_text)
        except ValueError:
            raise DatasetError(f"row {lineno}: non-integer timestep {t_text!r}") from None
        node = row[inode].strip()
        key = (t, node)
        if key in records:
            raise DatasetError(
                f"duplicate (timestep, node) {key} at rows {first_row[key]} and {lineno}"
            )
        y = _parse_float(row[iy].strip(), "target", lineno)
        attrs = [_parse_float(row[i].strip(), f"attribute {a!r}", lineno) for a, i in zip(attr_names, iattr)]
        records[key] = (y, attrs)
        first_row[key] = lineno
        if node not in seen_nodes:
            seen_nodes.add(node)
            node_order.append(node)

    if not records:
        raise DatasetError("no data rows")
    timesteps = sorted({t for t, _ in records})
    t_index = {t: i for i, t in enumerate(timesteps)}
    n_index = {n: j for j, n in enumerate(node_order)}
    T, N = len(timesteps), len(node_order)
    targets = np.full((T, N), np.nan)
    attributes = {a: np.full((T, N), np.nan) for a in attr_names}
    for (t, node), (y, attrs) in records.items():
        i, j = t_index[t], n_index[node]
        targets[i, j] = y
        for a, v in zip(attr_names, attrs):
            attributes[a][i, j] = v
    return TemporalGraphDataset(tuple(node_order), tuple(timesteps), targets, attributes)


def _fmt(x):
    return repr(float(x))


def write_node_series(dataset, dest, delimiter=","):
    """Write ``dataset`` in the long-format table read by :func:`ingest_node_series`."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            return write_node_series(dataset, fh, delimiter)
    names = list(dataset.attributes)
    dest.write(f"# format-version {FORMAT_VERSION}\n")
    writer = csv.writer(dest, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["timestep", "node_id", "target", *names])
    for i, t in enumerate(dataset.timesteps):
        for j, node in enumerate(dataset.node_ids):
            if not dataset.masks[i, j]:
                continue
            row = [t, node, _fmt(dataset.targets[i, j])]
            row += [_fmt(dataset.attributes[a][i, j]) for a in names]
            writer.writerow(row)


def dumps_node_series(dataset):
    buf = io.StringIO()
    write_node_series(dataset, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class TargetScaler:
    """Min-max scaler, either one (min, max) pair or one per node."""

    lo: np.ndarray
    hi: np.ndarray
    mode: str = "global"

    def scale(self, y):
        return (np.asarray(y, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def inverse_variance(self, var):
        return np.asarray(var, dtype=np.float64) * (self.hi - self.lo) ** 2


def fit_scaler(dataset, mode="global", rows=None):
    """Fit a min-max scaler on the observed targets in ``rows`` (default all)."""
    if mode not in ("global", "per-node"):
        raise DatasetError(f"unknown normalization mode {mode!r}")
    sl = slice(None) if rows is None else rows
    y = dataset.targets[sl]
    m = dataset.masks[sl]
    if not m.any():
        raise DatasetError("no observed targets in the scaling window")
    if mode == "global":
        vals = y[m]
        lo, hi = np.array(vals.min()), np.array(vals.max())
        if not hi > lo:
            raise DatasetError("constant series: global targets have max == min")
        return TargetScaler(lo, hi, mode)
    lo = np.empty(dataset.n_nodes)
    hi = np.empty(dataset.n_nodes)
    for j, node in enumerate(dataset.node_ids):
        vals = y[m[:, j], j]
        if vals.size == 0 or not vals.max() > vals.min():
            raise DatasetError(f"constant series for node {node!r}")
        lo[j], hi[j] = vals.min(), vals.max()
    return TargetScaler(lo, hi, mode)


def normalize_targets(dataset, mode="global", rows=None):
    """Rescale targets to [0, 1] (over the fitting window) and return the scaler.

    ``rows`` restricts the window used to fit the scaler, e.g.
    ``slice(0, n_train)``; values outside that window may leave [0, 1].
    """
    scaler = fit_scaler(dataset, mode, rows)
    scaled = scaler.scale(dataset.targets)
    return replace(dataset, targets=scaled, masks=dataset.masks), scaler


@dataclass(frozen=True)
class LagFeatureMatrix:
    """Autoregressive design for one node: ``X[r, l]`` is the target at ``t_r - l - 1``."""

    X: np.ndarray
    y: np.ndarray
    timestep_index: np.ndarray
    lag: int

    def __len__(self):
        return len(self.y)


def lag_rows(series, lag, targets_at=None):
    """Lag design from a 1-D series.

    Rows are built for every index ``t >= lag`` (or the given ``targets_at``
    indices) whose window ``series[t-lag .. t]`` is fully observed.
    """
    series = np.asarray(series, dtype=np.float64)
    if lag < 1:
        raise DatasetError("lag must be >= 1")
    idx = np.arange(lag, len(series)) if targets_at is None else np.asarray(targets_at)
    rows, ys, ts = [], [], []
    for t in idx:
        if t < lag or t >= len(series):
            continue
        window = series[t - lag:t + 1]
        if np.isnan(window).any():
            continue
        rows.append(series[t - lag:t][::-1])
        ys.append(series[t])
        ts.append(t)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), lag)
    return LagFeatureMatrix(X, np.array(ys, dtype=np.float64), np.array(ts, dtype=np.int64), lag)


def build_lag_features(dataset, node, lag, window=None):
    """Lag features for ``node``; most recent lag in column 0.

    ``window`` is an optional (start, stop) timestep-index range; rows are
    produced for label timesteps inside it.
    """
    j = dataset.node_index(node) if not isinstance(node, (int, np.integer)) else int(node)
    series = dataset.targets[:, j]
    start, stop = (0, dataset.n_timesteps) if window is None else window
    observed = np.flatnonzero(dataset.masks[:, j])
    if lag < 1:
        raise DatasetError("lag must be >= 1")
    if observed.size < lag + 1:
        raise DatasetError(
            f"node {dataset.node_ids[j]!r}: {observed.size} observations, need at least lag+1={lag + 1}"
        )
    feats = lag_rows(series, lag, targets_at=np.arange(max(start, lag), stop))
    if len(feats) == 0:
        raise DatasetError(f"no complete window of length {lag + 1} for node {dataset.node_ids[j]!r}")
    return feats
