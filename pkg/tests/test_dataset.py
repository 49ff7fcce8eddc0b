import io

import numpy as np
import pytest

from gcrfcast.dataset import (
    DatasetError,
    Schema,
    TemporalGraphDataset,
    build_lag_features,
    dumps_node_series,
    ingest_node_series,
    lag_rows,
    normalize_targets,
)


def _csv(rows, header="timestep,node_id,target"):
    return io.StringIO(header + "\n" + "\n".join(rows) + "\n")


def test_full_grid():
    rows = [f"{t},{n},{t + i}" for t in (1, 2, 3) for i, n in enumerate("AB")]
    ds = ingest_node_series(_csv(rows))
    assert ds.n_timesteps == 3 and ds.n_nodes == 2
    assert ds.masks.all()
    assert ds.node_ids == ("A", "B")


def test_missing_cell_is_masked():
    rows = [f"{t},{n},1.0" for t in (0, 1, 2) for n in "AB" if not (t == 2 and n == "B")]
    ds = ingest_node_series(_csv(rows))
    assert not ds.masks[2, 1]
    assert np.isnan(ds.targets[2, 1])
    assert ds.masks.sum() == 5


def test_duplicate_row_names_both_rows():
    rows = ["1,A,1.0", "1,B,2.0", "1,A,3.0"]
    with pytest.raises(DatasetError, match=r"rows 2 and 4"):
        ingest_node_series(_csv(rows))


def test_non_numeric_target():
    with pytest.raises(DatasetError, match="non-numeric target"):
        ingest_node_series(_csv(["1,A,abc"]))


def test_missing_column():
    with pytest.raises(DatasetError, match="missing column"):
        ingest_node_series(_csv(["1,A"], header="timestep,node_id"))


def test_custom_schema_and_attributes():
    text = io.StringIO("t;node;y;x\n0;a;1.5;2\n1;a;2.5;3\n")
    ds = ingest_node_series(text, Schema("t", "node", "y", ("x",), ";"))
    assert ds.attribute("x").ravel().tolist() == [2.0, 3.0]
    assert ds.attribute("target").ravel().tolist() == [1.5, 2.5]
    with pytest.raises(DatasetError):
        ds.attribute("nope")


def test_timesteps_sorted_numerically():
    ds = ingest_node_series(_csv(["10,A,1", "2,A,2", "9,A,3"]))
    assert ds.timesteps == (2, 9, 10)
    assert ds.targets[:, 0].tolist() == [2.0, 3.0, 1.0]


def test_series_round_trip(rng):
    y = rng.standard_normal((4, 3))
    y[1, 2] = np.nan
    aux = rng.random((4, 3))
    aux[1, 2] = np.nan  # an unobserved cell has no row, so no attributes either
    ds = TemporalGraphDataset(("a", "b", "c"), (0, 1, 2, 3), y, {"aux": aux})
    back = ingest_node_series(io.StringIO(dumps_node_series(ds)))
    assert back == ds


def test_global_normalization_example():
    ds = TemporalGraphDataset(("a",), (0, 1, 2), np.array([[0.0], [50.0], [100.0]]))
    scaled, _ = normalize_targets(ds)
    assert scaled.targets.ravel().tolist() == [0.0, 0.5, 1.0]


def test_constant_per_node_series_names_node():
    y = np.array([[10.0, 1.0], [10.0, 2.0], [10.0, 3.0]])
    ds = TemporalGraphDataset(("flat", "b"), (0, 1, 2), y)
    with pytest.raises(DatasetError, match="constant series for node 'flat'"):
        normalize_targets(ds, "per-node")


@pytest.mark.parametrize("mode", ["global", "per-node"])
def test_scale_inverse_round_trip(rng, mode):
    ds = TemporalGraphDataset(tuple("abcd"), tuple(range(20)), rng.standard_normal((20, 4)) * 7 + 3)
    scaled, scaler = normalize_targets(ds, mode)
    np.testing.assert_allclose(scaler.inverse(scaled.targets), ds.targets, atol=1e-12)
    assert scaled.targets.min() == pytest.approx(0.0) and scaled.targets.max() == pytest.approx(1.0)


def test_scaler_fit_window_only():
    y = np.array([[0.0], [10.0], [100.0]])
    ds = TemporalGraphDataset(("a",), (0, 1, 2), y)
    scaled, _ = normalize_targets(ds, rows=slice(0, 2))
    assert scaled.targets.ravel().tolist() == [0.0, 1.0, 10.0]


def test_lag1_rows():
    f = lag_rows([1, 2, 3, 4], 1)
    assert f.X.ravel().tolist() == [1, 2, 3]
    assert f.y.tolist() == [2, 3, 4]


def test_lag2_rows_most_recent_first():
    f = lag_rows([1, 2, 3, 4], 2)
    assert f.X.tolist() == [[2, 1], [3, 2]]
    assert f.y.tolist() == [3, 4]


def test_short_series_rejected():
    ds = TemporalGraphDataset(("a",), (0, 1), np.array([[1.0], [2.0]]))
    with pytest.raises(DatasetError):
        build_lag_features(ds, "a", 3)


def test_lag_rows_skip_gaps():
    f = lag_rows([1, np.nan, 3, 4, 5], 1)
    assert f.y.tolist() == [4, 5]
    assert f.timestep_index.tolist() == [3, 4]


def test_build_lag_features_window():
    ds = TemporalGraphDataset(("a",), tuple(range(6)), np.arange(6.0)[:, None])
    f = build_lag_features(ds, "a", 1, window=(3, 5))
    assert f.y.tolist() == [3.0, 4.0]
