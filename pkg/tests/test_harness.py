import dataclasses

import numpy as np
import pytest

from gcrfcast.harness import (
    ExperimentConfig,
    PipelineError,
    load_dataset,
    load_predictions,
    prepare,
    run_experiment,
)
from gcrfcast.dataset import TemporalGraphDataset, write_node_series
from gcrfcast.kvconfig import read_kv

SMALL = """
families = lr,gp
lags = 1,2
models = gcrf,ugcrf,ufgcrf
base_window = 6
train_window = 6
test_horizon = 3
horizons = 3
sparsify = topk:3
gp_grid = 3
uf_epochs = 15
uf_hidden = 2
max_iter = 40
synth.n_nodes = 8
synth.n_timesteps = 24
synth.seasonal_amplitude = 0.3
synth.seed = 5
"""


@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig.from_text(SMALL)


@pytest.fixture(scope="module")
def small_run(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(small_cfg, out)


def test_output_layout(small_run):
    out = small_run.out_dir
    assert not (out / "INCOMPLETE").exists()
    for name in ("predictions/predictions.csv", "reports/report.json", "reports/rmse.csv",
                 "reports/nlpd.csv", "config.cfg", "manifest.txt"):
        assert (out / name).is_file(), name
    assert list((out / "models").glob("gcrf_lr_m*.params"))
    manifest = read_kv(out / "manifest.txt")
    assert manifest["synth_seed"] == "5"
    assert len(manifest["config_sha256"]) == 64
    first = (out / "predictions" / "predictions.csv").read_text().splitlines()[0]
    assert first == "# format-version 1"


def test_report_lists_every_model(small_run):
    models = set(small_run.report.models)
    for fam in ("LR", "GP"):
        assert {f"GCRF + {fam}", f"uGCRF + {fam}", f"ufGCRF + {fam}", f"{fam} lag1", f"{fam} lag2"} <= models
    assert small_run.report.months == [21, 22, 23]


def test_predictions_file_round_trip(small_run):
    outputs, truths, ids = load_predictions(small_run.out_dir / "predictions" / "predictions.csv")
    assert ids == list(small_run.dataset.node_ids)
    for model, by_month in small_run.predictions.items():
        for m, o in by_month.items():
            np.testing.assert_allclose(outputs[model][m].mean, o.mean, rtol=1e-9)
            np.testing.assert_allclose(outputs[model][m].variance, o.variance, rtol=1e-9)


def test_rerun_from_saved_config_is_byte_identical(small_run, tmp_path):
    cfg = ExperimentConfig.from_file(small_run.out_dir / "config.cfg")
    again = run_experiment(cfg, tmp_path)
    a = (small_run.out_dir / "reports" / "report.json").read_bytes()
    assert (again.out_dir / "reports" / "report.json").read_bytes() == a
    p = (small_run.out_dir / "predictions" / "predictions.csv").read_bytes()
    assert (again.out_dir / "predictions" / "predictions.csv").read_bytes() == p


def test_no_leakage_from_later_months(small_cfg):
    cfg = dataclasses.replace(small_cfg, families=("lr",), refit="monthly")
    data, truth = load_dataset(cfg)
    t0 = 21  # first test month
    y = np.array(data.targets)
    y[t0 + 1:] = y[t0 + 1:] * 3.0 + 1.0
    changed = TemporalGraphDataset(data.node_ids, data.timesteps, y, dict(data.attributes))
    a = run_experiment(cfg, dataset=data, truth_graph=truth)
    b = run_experiment(cfg, dataset=changed, truth_graph=truth)
    for model, by_month in a.predictions.items():
        np.testing.assert_array_equal(by_month[t0].mean, b.predictions[model][t0].mean, err_msg=model)
        np.testing.assert_array_equal(by_month[t0].variance, b.predictions[model][t0].variance)
    # later months do see the change
    assert not np.array_equal(a.predictions["GCRF + LR"][t0 + 2].mean,
                              b.predictions["GCRF + LR"][t0 + 2].mean)


def test_base_predictions_use_only_past(small_cfg):
    cfg = dataclasses.replace(small_cfg, families=("lr",), lags=(1,), models=("gcrf",))
    prep = prepare(cfg)
    mean, _ = prep.preds["lr", 1]
    y = prep.data.targets
    m, j = 21, 3
    # refit by hand on label months m-6 .. m-1
    x = y[m - 7:m - 1, j]
    t = y[m - 6:m, j]
    A = np.column_stack([x, np.ones(6)])
    w = np.linalg.lstsq(A, t, rcond=None)[0]
    assert mean[m, j] == pytest.approx(w[0] * y[m - 1, j] + w[1], rel=1e-10)


def test_overlapping_windows_rejected_before_work(small_cfg):
    cfg = dataclasses.replace(small_cfg, test_start=15, train_end=20)
    with pytest.raises(PipelineError, match=r"\[config\].*overlaps"):
        run_experiment(cfg)


def test_short_history_rejected(small_cfg):
    cfg = dataclasses.replace(small_cfg, train_window=20)
    with pytest.raises(PipelineError, match="not enough history"):
        prepare(cfg)


def test_failure_marks_output_incomplete(small_cfg, tmp_path):
    missing = tmp_path / "absent.csv"
    cfg = dataclasses.replace(small_cfg, dataset=str(missing))
    with pytest.raises(PipelineError, match=r"\[ingest\]"):
        run_experiment(cfg, tmp_path / "out")
    assert (tmp_path / "out" / "INCOMPLETE").read_text().startswith("failed [ingest]")


def test_file_dataset_and_fit_once(small_cfg, tmp_path):
    data, _ = load_dataset(small_cfg)
    path = tmp_path / "series.csv"
    write_node_series(data, path)
    cfg = dataclasses.replace(small_cfg, dataset=str(path), synth={}, families=("lr",),
                              models=("gcrf",), refit="once")
    res = run_experiment(cfg, tmp_path / "out")
    assert len(res.params) == 1
    assert read_kv(tmp_path / "out" / "manifest.txt")["synth_seed"] == "none"


def test_ground_truth_graph_needs_synthetic_data(small_cfg, tmp_path):
    data, _ = load_dataset(small_cfg)
    cfg = dataclasses.replace(small_cfg, similarity="ground-truth", families=("lr",), models=("gcrf",))
    with pytest.raises(PipelineError, match="ground-truth"):
        run_experiment(cfg, dataset=data)
