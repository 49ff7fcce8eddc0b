"""Rolling one-step-ahead experiment pipeline.

Stages: load data, scale targets, fit base predictors on sliding windows,
pick the best lag per family, build the monthly graphs, train the
structured models on the months preceding each test month, predict, and
write every output under one directory.

Every quantity used to predict test month ``t`` (scaler, base-model fits,
coverage indices, graphs, structured parameters) is computed from data
strictly before ``t``.
"""
from __future__ import annotations

import contextlib
import hashlib
import logging
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .dataset import Schema, ingest_node_series, lag_rows, normalize_targets, write_node_series
from .evaluation import ModelMonthOutput, build_report
from .extensions import (
    GradientAscentConfig,
    compute_ci_index,
    default_features,
    predict_structured,
    train_ufgcrf,
    train_ugcrf,
)
from .gcrf import ConvergenceWarning, GcrfSnapshot, QuasiNewtonConfig, train_gcrf
from .kvconfig import ConfigError, as_bool, dumps_kv, parse_kv, read_kv
from .predictors import Candidate, GpSearch, PredictorError, fit_predictor, predict, select_best_predictor
from .serialize import save_params
from .similarity import (
    attribute_histograms,
    common_history_similarity,
    js_divergence_similarity,
    parse_sparsify_rule,
    sparsify,
)
from .synthetic import SynthConfig, generate_ar_graph

log = logging.getLogger(__name__)

FAMILY_LABEL = {"lr": "LR", "gp": "GP"}
MODEL_LABEL = {"gcrf": "GCRF", "ugcrf": "uGCRF", "ufgcrf": "ufGCRF"}
FORMAT_VERSION = 1


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # tag every failure with its stage
        raise PipelineError(name, str(exc)) from exc


def _csv(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat key-value experiment settings (see README for every key)."""

    dataset: str = ""
    delimiter: str = ","
    col_timestep: str = "timestep"
    col_node: str = "node_id"
    col_target: str = "target"
    normalize: str = "global"
    similarity: str = "common-history"
    sim_h: int = 3
    sim_attribute: str = "target"
    sim_expansion: bool = False
    sparsify: str = "topk:5"
    jsd_window: int = 12
    jsd_bins: int = 10
    families: tuple = ("lr", "gp")
    lags: tuple = (1, 2, 3)
    models: tuple = ("gcrf", "ugcrf", "ufgcrf")
    base_window: int = 12
    train_window: int = 12
    test_horizon: int = 12
    test_start: int | None = None
    train_end: int | None = None
    horizons: int = 12
    refit: str = "monthly"
    gcrf_mode: str = "per-node"
    ugcrf_shared_u: bool = False
    max_iter: int = 500
    gp_grid: int = 8
    uf_hidden: int = 8
    uf_step: float = 1e-2
    uf_epochs: int = 300
    uf_tol: float = 1e-7
    uf_warm_start: bool = True
    uf_method: str = "gradient"
    uf_weight_decay: float = 0.0
    seed: int = 0
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping):
        kw = {}
        synth = {}
        types = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key == "format_version":
                continue
            if key.startswith("synth."):
                synth[key[len("synth."):]] = raw
                continue
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            default = types[key].default
            if key in ("families", "models"):
                kw[key] = _csv(raw)
            elif key == "lags":
                kw[key] = tuple(int(x) for x in _csv(raw))
            elif key in ("test_start", "train_end"):
                kw[key] = None if raw.lower() == "none" else int(raw)
            elif isinstance(default, bool):
                kw[key] = as_bool(raw)
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        if synth:
            kw["synth"] = synth
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_file(cls, path):
        return cls.from_mapping(read_kv(path))

    def to_mapping(self):
        out = {"format_version": FORMAT_VERSION}
        for f in fields(self):
            if f.name == "synth":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = v
        for k in sorted(self.synth):
            out[f"synth.{k}"] = self.synth[k]
        return out

    def to_text(self):
        return dumps_kv(self.to_mapping(), header=False)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self):
        for fam in self.families:
            if fam not in FAMILY_LABEL:
                raise ConfigError(f"unknown predictor family {fam!r}")
        for m in self.models:
            if m not in MODEL_LABEL:
                raise ConfigError(f"unknown structured model {m!r}")
        if not self.lags or min(self.lags) < 1:
            raise ConfigError("lags must be positive integers")
        if self.uf_method not in ("gradient", "lbfgs"):
            raise ConfigError("uf_method must be 'gradient' or 'lbfgs'")
        if self.refit not in ("monthly", "once"):
            raise ConfigError("refit must be 'monthly' or 'once'")
        if self.normalize not in ("global", "per-node", "none"):
            raise ConfigError("normalize must be global, per-node or none")
        if self.similarity not in ("common-history", "js-divergence", "ground-truth"):
            raise ConfigError(f"unknown similarity kind {self.similarity!r}")
        if self.base_window < max(self.lags) + 1:
            raise ConfigError(
                f"training window {self.base_window} shorter than max lag + 1 = {max(self.lags) + 1}"
            )
        if self.train_window < 1 or self.test_horizon < 1 or self.horizons < 1:
            raise ConfigError("train_window, test_horizon and horizons must be >= 1")
        if (self.test_start is not None and self.train_end is not None
                and self.test_start <= self.train_end):
            raise ConfigError(
                f"test window (starting {self.test_start}) overlaps training window "
                f"(ending {self.train_end})"
            )
        parse_sparsify_rule(self.sparsify)


@dataclass
class ExperimentResult:
    report: object
    predictions: dict
    truths: dict
    selected_lags: dict
    params: dict
    dataset: object
    out_dir: Path | None = None
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def load_dataset(cfg):
    if cfg.dataset:
        schema = Schema(cfg.col_timestep, cfg.col_node, cfg.col_target, None, cfg.delimiter)
        return ingest_node_series(cfg.dataset, schema), None
    synth = SynthConfig.from_mapping(cfg.synth)
    return generate_ar_graph(synth)


def _timeline(cfg, T):
    ts = cfg.test_start if cfg.test_start is not None else T - cfg.test_horizon
    if cfg.train_end is not None and cfg.train_end >= ts:
        raise ConfigError(f"test window (starting {ts}) overlaps training window (ending {cfg.train_end})")
    stop = ts + cfg.test_horizon
    if stop > T:
        raise ConfigError(f"test window [{ts}, {stop}) runs past the {T} available timesteps")
    first = ts - cfg.train_window
    need = cfg.base_window + max(cfg.lags)
    if first < need:
        raise ConfigError(
            f"not enough history: the first training month {first} needs {need} earlier timesteps"
        )
    if cfg.similarity == "common-history" and first < cfg.sim_h:
        raise ConfigError("not enough history for the similarity window")
    return first, ts, stop


def base_predictions(data, family, lag, months, window, gp_search):
    """Out-of-sample one-step predictions for every node and month.

    The model for month ``m`` is fit on label months ``m-window .. m-1``.
    Returns ``(mean, var)`` arrays of shape ``T x N`` (NaN elsewhere).
    """
    T, N = data.targets.shape
    mean = np.full((T, N), np.nan)
    var = np.full((T, N), np.nan)
    for j in range(N):
        series = data.targets[:, j]
        for m in months:
            train = lag_rows(series, lag, targets_at=np.arange(m - window, m))
            x_star = series[m - lag:m][::-1]
            if np.isnan(x_star).any():
                raise PredictorError(f"node {data.node_ids[j]!r}: missing lag inputs at month {m}")
            model = fit_predictor(family, train, gp_search)
            dist = predict(model, x_star)
            mean[m, j], var[m, j] = float(dist.mean), float(dist.variance)
    return mean, var


def similarity_at(cfg, data, m, truth_graph):
    if cfg.similarity == "common-history":
        S = common_history_similarity(data, cfg.sim_attribute, cfg.sim_h, m, cfg.sim_expansion)
    elif cfg.similarity == "js-divergence":
        H = attribute_histograms(data, cfg.sim_attribute, m, cfg.jsd_window, cfg.jsd_bins)
        S = js_divergence_similarity(H, timestep=m)
    else:
        if truth_graph is None:
            raise ConfigError("ground-truth similarity is only available for synthetic data")
        S = truth_graph
    rule = parse_sparsify_rule(cfg.sparsify)
    return sparsify(S, **rule) if rule else S


def _horizon(cfg, m, ts):
    return (m - ts) % cfg.horizons + 1


def _snapshot(data, m, lag, mean, var, S, horizon):
    lags = np.stack([data.targets[m - l - 1] for l in range(lag)], axis=1)
    return GcrfSnapshot(
        mean[m][None, :], (S,), data.targets[m], var[m][None, :],
        default_features(lags, var[m][None, :]), horizon, m,
    )


def _ci_table(cfg, snaps):
    """Coverage index per horizon from the training snapshots (K = 1)."""
    pooled = compute_ci_index((
        np.concatenate([s.R[0] for s in snaps]),
        np.concatenate([s.sigma2[0] for s in snaps]),
        np.concatenate([s.y for s in snaps]),
    ))
    ci = np.full((1, cfg.horizons), pooled)
    for p in range(1, cfg.horizons + 1):
        hs = [s for s in snaps if s.horizon == p]
        if hs:
            ci[0, p - 1] = compute_ci_index((
                np.concatenate([s.R[0] for s in hs]),
                np.concatenate([s.sigma2[0] for s in hs]),
                np.concatenate([s.y for s in hs]),
            ))
    return ci


def _train(cfg, model, snaps, init):
    qn = QuasiNewtonConfig(max_iter=cfg.max_iter)
    if model == "gcrf":
        return train_gcrf(snaps, init=init, optimizer=qn, mode=cfg.gcrf_mode)
    if model == "ugcrf":
        ci = _ci_table(cfg, snaps)
        if init is not None:
            init = type(init)(init.u, init.v, ci)
        return train_ugcrf(snaps, ci, init=init, optimizer=qn, shared_u=cfg.ugcrf_shared_u)
    uf = GradientAscentConfig(
        hidden=cfg.uf_hidden, step=cfg.uf_step, max_epochs=cfg.uf_epochs, tol=cfg.uf_tol,
        seed=cfg.seed, warm_start=cfg.uf_warm_start, method=cfg.uf_method,
        weight_decay=cfg.uf_weight_decay,
    )
    return train_ufgcrf(snaps, init=init, config=uf)


def _slug(name):
    return name.replace(" + ", "_").replace(" ", "_").lower()


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def run_experiment(cfg, out_dir=None, dataset=None, truth_graph=None):
    """Run the full pipeline; write artifacts to ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    marker = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / "INCOMPLETE"
        marker.write_text("run started\n", encoding="utf-8")
    caught = []
    try:
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always", ConvergenceWarning)
            result = _run(cfg, dataset, truth_graph)
            caught = [str(x.message) for x in w if issubclass(x.category, ConvergenceWarning)]
        result.warnings = caught
        if out is not None:
            with stage("output"):
                _write_outputs(cfg, result, out)
            result.out_dir = out
            marker.unlink()
        return result
    except PipelineError as exc:
        if marker is not None:
            marker.write_text(f"failed {exc}\n", encoding="utf-8")
        raise


@dataclass
class PreparedExperiment:
    """Everything the structured models need: scaled data, base forecasts, snapshots."""

    cfg: ExperimentConfig
    data: object
    months: np.ndarray
    test_months: list
    preds: dict  # (family, lag) -> (mean, var), each T x N
    selected: dict  # family -> lag
    snapshots: dict  # family -> month -> GcrfSnapshot

    def training_snapshots(self, family, t):
        return [self.snapshots[family][m] for m in range(t - self.cfg.train_window, t)]


def prepare(cfg, dataset=None, truth_graph=None):
    """Fit base predictors on scaled data, then build the snapshots for every month."""
    with stage("config"):
        cfg.validate()
    with stage("ingest"):
        if dataset is None:
            dataset, truth_graph = load_dataset(cfg)
        if not dataset.fully_observed():
            raise PredictorError("experiments require fully observed node series")
    with stage("config"):
        first, ts, stop = _timeline(cfg, dataset.n_timesteps)
    with stage("normalize"):
        data = dataset
        if cfg.normalize != "none":
            data, _ = normalize_targets(dataset, cfg.normalize, rows=slice(0, ts))
    months = np.arange(first, stop)
    gp_search = GpSearch(grid_size=cfg.gp_grid)

    preds = {}
    with stage("base-predictors"):
        for fam in cfg.families:
            for lag in cfg.lags:
                log.info("fitting %s lag%d", fam, lag)
                preds[fam, lag] = base_predictions(data, fam, lag, months, cfg.base_window, gp_search)

    with stage("selection"):
        val = np.arange(first, ts)
        cands = []
        for (fam, lag), (mean, _) in preds.items():
            err = mean[val] - data.targets[val]
            cands.append(Candidate(fam, lag, float(np.sqrt(np.mean(err ** 2)))))
        selected = {fam: c.lag for fam, c in select_best_predictor(cands).items()}

    with stage("similarity"):
        graphs = {int(m): similarity_at(cfg, data, m, truth_graph) for m in months}

    snapshots = {}
    for fam in cfg.families:
        mean, var = preds[fam, selected[fam]]
        snapshots[fam] = {
            int(m): _snapshot(data, m, selected[fam], mean, var, graphs[int(m)], _horizon(cfg, m, ts))
            for m in months
        }
    return PreparedExperiment(cfg, data, months, list(range(ts, stop)), preds, selected, snapshots)


def train_structured(prep, model, family, t, init=None):
    """Fit ``model`` on ``family``'s snapshots for the months before ``t``."""
    with stage("structured-training"):
        if t not in prep.test_months:
            raise ConfigError(f"month {t} is not a test month")
        return _train(prep.cfg, model, prep.training_snapshots(family, t), init)


def _run(cfg, dataset, truth_graph):
    prep = prepare(cfg, dataset, truth_graph)
    data = prep.data
    truths = {m: data.targets[m].copy() for m in prep.test_months}
    outputs = {}
    for (fam, lag), (mean, var) in prep.preds.items():
        name = f"{FAMILY_LABEL[fam]} lag{lag}"
        outputs[name] = {m: ModelMonthOutput(mean[m].copy(), var[m].copy()) for m in prep.test_months}

    trained = {}
    for fam in cfg.families:
        for model in cfg.models:
            name = f"{MODEL_LABEL[model]} + {FAMILY_LABEL[fam]}"
            outputs[name] = {}
            params = None
            for t in prep.test_months:
                if params is None or cfg.refit == "monthly":
                    params = train_structured(prep, model, fam, t, params)
                    trained[name, t] = params
                with stage("prediction"):
                    dist = predict_structured(params, prep.snapshots[fam][t])
                outputs[name][t] = ModelMonthOutput(dist.mean, dist.variance)

    with stage("evaluation"):
        report = build_report(outputs, truths, node_ids=data.node_ids)
    return ExperimentResult(report, outputs, truths, prep.selected, trained, data)


def dumps_predictions(predictions, truths, node_ids):
    lines = [f"# format-version {FORMAT_VERSION}", "model,month,node_id,mean,variance,truth"]
    for model in sorted(predictions):
        for month, o in predictions[model].items():
            truth = truths[month]
            for j, node in enumerate(node_ids):
                lines.append(
                    f"{model},{month},{node},{o.mean[j]:.10g},{o.variance[j]:.10g},{truth[j]:.10g}"
                )
    return "\n".join(lines) + "\n"


def load_predictions(path):
    """Read a predictions file back into ``(outputs, truths, node_ids)``."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# format-version"):
        raise ConfigError(f"{path}: missing format-version line")
    if int(text[0].split()[-1]) != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version")
    rows = {}
    node_ids = []
    for lineno, line in enumerate(text[2:], start=3):
        parts = line.split(",")
        if len(parts) != 6:
            raise ConfigError(f"{path}:{lineno}: expected 6 columns")
        model, month, node = parts[0], int(parts[1]), parts[2]
        mean, var, truth = (float(x) for x in parts[3:])
        if node not in node_ids:
            node_ids.append(node)
        rows.setdefault(model, {}).setdefault(month, []).append((node, mean, var, truth))
    outputs, truths = {}, {}
    for model, by_month in rows.items():
        outputs[model] = {}
        for month, recs in by_month.items():
            order = sorted(recs, key=lambda r: node_ids.index(r[0]))
            arr = np.array([r[1:] for r in order])
            outputs[model][month] = ModelMonthOutput(arr[:, 0], arr[:, 1])
            truths[month] = arr[:, 2]
    return outputs, truths, node_ids


def _write_outputs(cfg, result, out):
    for sub in ("predictions", "models", "reports"):
        (out / sub).mkdir(exist_ok=True)
    (out / "predictions" / "predictions.csv").write_text(
        dumps_predictions(result.predictions, result.truths, result.dataset.node_ids), encoding="utf-8"
    )

    write_reports(result.report, out / "reports")
    for (name, t), params in result.params.items():
        save_params(params, out / "models" / f"{_slug(name)}_m{t}.params")
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    manifest = {
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "synth_seed": "none" if cfg.dataset else SynthConfig.from_mapping(cfg.synth).seed,
        "selected_lags": ",".join(f"{k}:{v}" for k, v in sorted(result.selected_lags.items())),
        "convergence_warnings": len(result.warnings),
    }
    (out / "manifest.txt").write_text(dumps_kv(manifest), encoding="utf-8")


def write_reports(report, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(report.to_json(), encoding="utf-8")
    for metric in ("rmse", "nlpd", "coverage95", "min_nlpd"):
        (directory / f"{metric}.csv").write_text(report.table(metric), encoding="utf-8")
    for model in report.per_node_nlpd:
        (directory / f"node_nlpd_{_slug(model)}.csv").write_text(
            report.node_nlpd_table(model), encoding="utf-8"
        )
