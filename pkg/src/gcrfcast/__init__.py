"""Probabilistic forecasting on evolving graphs with Gaussian conditional random fields."""

__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: E402
from .dataset import Schema, TemporalGraphDataset, ingest_node_series, normalize_targets  # noqa: E402
from .evaluation import build_report, coverage95, min_nlpd, nlpd, rmse  # noqa: E402
from .extensions import predict_structured, train_ufgcrf, train_ugcrf  # noqa: E402
from .gcrf import GcrfParams, GcrfSnapshot, infer, log_likelihood, train_gcrf  # noqa: E402
from .predictors import fit_gp, fit_linear_ar, select_best_predictor  # noqa: E402
from .similarity import SimilarityMatrix, variogram  # noqa: E402

__all__ = [
    "BACKEND", "GcrfParams", "GcrfSnapshot", "Schema", "SimilarityMatrix",
    "TemporalGraphDataset", "build_report", "coverage95", "fit_gp", "fit_linear_ar",
    "infer", "ingest_node_series", "log_likelihood", "min_nlpd", "nlpd",
    "normalize_targets", "predict_structured", "rmse", "select_best_predictor",
    "train_gcrf", "train_ufgcrf", "train_ugcrf", "variogram",
]
