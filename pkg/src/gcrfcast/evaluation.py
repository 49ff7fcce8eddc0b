"""Accuracy and uncertainty metrics, and monthly report assembly."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .predictors import VARIANCE_FLOOR

Z95 = 1.96
METRICS = ("rmse", "nlpd", "coverage95")
FORMAT_VERSION = 1
RANK_MARKS = ("best", "second", "third")


class EvaluationError(ValueError):
    pass


def _arrays(*arrs):
    out = [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in arrs]
    n = out[0].shape
    if any(a.shape != n for a in out):
        raise EvaluationError("inputs must have equal lengths")
    if out[0].size == 0:
        raise EvaluationError("inputs must be nonempty")
    return out


def rmse(predictions, truths):
    p, t = _arrays(predictions, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def nlpd_terms(predictions, variances, truths, form="stated"):
    """Per-point NLPD, without the constant ``log 2 pi`` term.

    ``stated``:    ``0.5 * (r^2 / s2 + log s2)``, minimized at ``s2 = r^2``.
    ``displayed``: ``0.5 * (r^2 / (2 s2) + log s2)``, minimized at ``s2 = r^2 / 2``.
    """
    p, v, t = _arrays(predictions, variances, truths)
    if (v <= 0).any():
        raise EvaluationError("variances must be positive")
    r2 = (t - p) ** 2
    if form == "stated":
        return 0.5 * (r2 / v + np.log(v))
    if form == "displayed":
        return 0.5 * (r2 / (2.0 * v) + np.log(v))
    raise EvaluationError(f"unknown NLPD form {form!r}")


def nlpd(predictions, variances, truths, form="stated"):
    return float(np.mean(nlpd_terms(predictions, variances, truths, form)))


def min_nlpd_terms(predictions, truths, floor=VARIANCE_FLOOR):
    p, t = _arrays(predictions, truths)
    best = np.maximum((t - p) ** 2, floor)
    return nlpd_terms(p, best, t)


def min_nlpd(predictions, truths, floor=VARIANCE_FLOOR):
    """NLPD at the per-point optimal variance ``max(r^2, floor)``."""
    return float(np.mean(min_nlpd_terms(predictions, truths, floor)))


def coverage95(predictions, variances, truths):
    p, v, t = _arrays(predictions, variances, truths)
    if (v <= 0).any():
        raise EvaluationError("variances must be positive")
    return float(np.mean(np.abs(t - p) <= Z95 * np.sqrt(v)))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelMonthOutput:
    mean: np.ndarray
    variance: np.ndarray | None = None


@dataclass
class EvaluationReport:
    months: list
    models: list
    per_month: dict  # model -> month -> metric -> value
    averages: dict  # model -> metric -> value
    per_node_nlpd: dict = field(default_factory=dict)  # model -> (obtained, minimal) arrays
    ranking: dict = field(default_factory=dict)  # metric -> ordered model names
    node_ids: list | None = None

    def marks(self, metric):
        """Model -> rank mark (best/second/third) for ``metric``."""
        return {m: RANK_MARKS[i] for i, m in enumerate(self.ranking.get(metric, [])[:3])}

    # ---- emitters --------------------------------------------------------

    def records(self):
        out = []
        for model in self.models:
            for month in self.months:
                for metric, value in self.per_month[model][month].items():
                    out.append({"model": model, "month": month, "metric": metric, "value": value})
            for metric, value in self.averages[model].items():
                out.append({"model": model, "month": "average", "metric": metric, "value": value})
        return out

    def to_json(self):
        doc = {
            "format_version": FORMAT_VERSION,
            "months": list(self.months),
            "models": list(self.models),
            "records": self.records(),
            "ranking": self.ranking,
        }
        return json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n"

    def table(self, metric, delimiter=","):
        """Delimited table with an average column followed by one column per month."""
        buf = io.StringIO()
        buf.write(f"# format-version {FORMAT_VERSION}\n")
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow([metric, "average", *self.months, "rank"])
        marks = self.marks(metric)
        for model in self.models:
            if metric not in self.averages[model]:
                continue
            row = [model, _num(self.averages[model][metric])]
            row += [_num(self.per_month[model][m].get(metric, float("nan"))) for m in self.months]
            row.append(marks.get(model, ""))
            w.writerow(row)
        return buf.getvalue()

    def node_nlpd_table(self, model, delimiter=","):
        """Per-node (min_nlpd, obtained_nlpd) sorted by obtained NLPD, descending."""
        obtained, minimal = self.per_node_nlpd[model]
        ids = self.node_ids or list(range(len(obtained)))
        order = sorted(range(len(obtained)), key=lambda i: (-obtained[i], str(ids[i])))
        buf = io.StringIO()
        buf.write(f"# format-version {FORMAT_VERSION}\n")
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["node_id", "min_nlpd", "obtained_nlpd"])
        for i in order:
            w.writerow([ids[i], _num(minimal[i]), _num(obtained[i])])
        return buf.getvalue()


def _num(x):
    return format(float(x), ".10g")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _rank(averages, metric, models):
    scored = [(averages[m][metric], m) for m in models if metric in averages[m]]
    if metric == "coverage95":
        # closest to nominal coverage is best
        key = lambda sm: (abs(sm[0] - 0.95), sm[1])
    else:
        key = lambda sm: (sm[0], sm[1])
    return [m for _, m in sorted(scored, key=key)]


def build_report(outputs, truths, node_ids=None):
    """Per-month and averaged metrics for every model.

    ``outputs`` maps model name -> month -> ``ModelMonthOutput`` (or a bare
    mean vector, or a ``(mean, variance)`` pair); ``truths`` maps month ->
    truth vector.  NLPD and coverage need variances and are skipped for
    models without them.  Averages are plain means over months.  Models are
    ranked per metric with ties broken by name.
    """
    if not outputs:
        raise EvaluationError("no model outputs")
    months = list(truths)
    models = sorted(outputs)
    per_month, averages, per_node = {}, {}, {}
    for model in models:
        by_month = outputs[model]
        if set(by_month) != set(months):
            raise EvaluationError(
                f"month mismatch for model {model!r}: {sorted(map(str, set(by_month) ^ set(months)))}"
            )
        per_month[model] = {}
        node_obt, node_min = [], []
        for month in months:
            out = by_month[month]
            if isinstance(out, ModelMonthOutput):
                mean, var = out.mean, out.variance
            elif isinstance(out, tuple):
                mean, var = out
            else:
                mean, var = out, None
            t = truths[month]
            rec = {"rmse": rmse(mean, t)}
            if var is not None:
                rec["nlpd"] = nlpd(mean, var, t)
                rec["coverage95"] = coverage95(mean, var, t)
                rec["min_nlpd"] = min_nlpd(mean, t)
                node_obt.append(nlpd_terms(mean, var, t))
                node_min.append(min_nlpd_terms(mean, t))
            per_month[model][month] = rec
        metrics = per_month[model][months[0]].keys()
        averages[model] = {
            k: float(np.mean([per_month[model][m][k] for m in months])) for k in metrics
        }
        if node_obt:
            per_node[model] = (np.mean(node_obt, axis=0), np.mean(node_min, axis=0))
    ranking = {metric: _rank(averages, metric, models) for metric in (*METRICS, "min_nlpd")}
    return EvaluationReport(months, models, per_month, averages, per_node, ranking,
                            list(node_ids) if node_ids is not None else None)
