"""
Tests for CSV ingestion, export and run-config files.

Covers:
- a valid features/adjacency pair becomes a dense T×N×F dataset
- row order in the features file does not matter
- missing cells, bad numbers and bad headers raise IngestError with line numbers
- duplicate edges are dropped with a warning
- export → ingest reproduces the dataset
- run-config parsing, unknown keys and the DIFFIRM_SEED override
"""
import logging

import numpy as np
import pandas as pd
import pytest

from diffirm.config import settings
from diffirm.dataset import split_timesteps
from diffirm.errors import ConfigError, IngestError
from diffirm.ingest import (
    build_run_config,
    export_csv,
    ingest_csv,
    load_run_config,
    parse_config_text,
    write_csv,
)
from diffirm.models.config import SplitSpec


def _features(steps=6, nodes=("A", "B", "C")):
    rows = [
        {"timestamp": str(t), "node_id": n, "speed": float(10 * t + i), "flow": float(t - i)}
        for t in range(steps) for i, n in enumerate(nodes)
    ]
    return pd.DataFrame(rows)


def _write(tmp_path, features, edges=(("A", "B"), ("B", "C"))):
    fpath, apath = tmp_path / "features.csv", tmp_path / "adjacency.csv"
    features.to_csv(fpath, index=False)
    pd.DataFrame(list(edges), columns=["src", "dst"]).to_csv(apath, index=False)
    return fpath, apath


def test_ingest_dense_grid(tmp_path):
    """Rows land at [timestamp, node, feature]; nodes follow the adjacency file."""
    ds = ingest_csv(*_write(tmp_path, _features()), tau=2, horizon=1)
    assert ds.series.shape == (6, 3, 2)
    assert ds.feature_names == ("speed", "flow")
    assert ds.graph.node_ids == ("A", "B", "C")
    assert ds.series[4, 2, 0] == 42.0
    np.testing.assert_array_equal(ds.graph.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_row_order_does_not_matter(tmp_path):
    """Shuffled rows ingest to the same tensor."""
    base = ingest_csv(*_write(tmp_path, _features()), tau=2, horizon=1)
    shuffled = _features().sample(frac=1.0, random_state=3)
    other = ingest_csv(*_write(tmp_path, shuffled), tau=2, horizon=1)
    np.testing.assert_array_equal(base.series, other.series)
    assert other.timestamps == tuple(str(t) for t in range(6))


def test_iso_timestamps_sorted_chronologically(tmp_path):
    """Datetime stamps are ordered by time, not by string."""
    df = _features(steps=3)
    stamps = {"0": "2024-01-10T00:00", "1": "2024-01-09T12:00", "2": "2024-02-01T00:00"}
    df["timestamp"] = df["timestamp"].map(stamps)
    ds = ingest_csv(*_write(tmp_path, df), tau=1, horizon=1)
    assert ds.timestamps == ("2024-01-09T12:00", "2024-01-10T00:00", "2024-02-01T00:00")


def test_missing_cell(tmp_path):
    """A dropped (timestamp, node) row is reported."""
    df = _features().drop(index=4)
    with pytest.raises(IngestError, match="missing"):
        ingest_csv(*_write(tmp_path, df), tau=2, horizon=1)


def test_non_numeric_value_reports_line(tmp_path):
    """The third data row is file line 4."""
    df = _features().astype({"flow": object})
    df.loc[2, "flow"] = "n/a"
    with pytest.raises(IngestError) as exc:
        ingest_csv(*_write(tmp_path, df), tau=2, horizon=1)
    assert exc.value.row == 4


def test_bad_header(tmp_path):
    """The first two columns must be timestamp,node_id."""
    df = _features().rename(columns={"node_id": "sensor"})
    with pytest.raises(IngestError) as exc:
        ingest_csv(*_write(tmp_path, df), tau=2, horizon=1)
    assert exc.value.row == 1


def test_duplicate_cell(tmp_path):
    """The same (timestamp, node) twice is ambiguous."""
    df = pd.concat([_features(), _features().iloc[[0]]], ignore_index=True)
    with pytest.raises(IngestError, match="duplicate"):
        ingest_csv(*_write(tmp_path, df), tau=2, horizon=1)


def test_duplicate_edges_warn(tmp_path, caplog):
    """Repeated and reversed edges collapse into one with a warning."""
    paths = _write(tmp_path, _features(), edges=(("A", "B"), ("B", "A"), ("B", "C")))
    with caplog.at_level(logging.WARNING, logger="diffirm.ingest"):
        ds = ingest_csv(*paths, tau=2, horizon=1)
    assert ds.graph.adjacency.sum() == 4
    assert "duplicate" in caplog.text


def test_feature_selection(tmp_path):
    """Configured feature names pick and order channels; unknown names fail."""
    paths = _write(tmp_path, _features())
    ds = ingest_csv(*paths, tau=2, horizon=1, feature_names=["flow"])
    assert ds.feature_names == ("flow",)
    with pytest.raises(IngestError):
        ingest_csv(*paths, tau=2, horizon=1, feature_names=["occupancy"])


def test_export_round_trip(tmp_path, make_st):
    """Export then ingest reproduces series, node ids and adjacency."""
    ds = make_st(n_nodes=5, steps=12)
    fpath, apath = tmp_path / "f.csv", tmp_path / "a.csv"
    export_csv(ds, fpath, apath)
    back = ingest_csv(fpath, apath, ds.tau, ds.horizon)
    np.testing.assert_array_equal(back.series, ds.series)
    assert back.graph.node_ids == ds.graph.node_ids
    np.testing.assert_array_equal(back.graph.adjacency, ds.graph.adjacency)


def test_absolute_step_split_on_ingested_grid(tmp_path):
    """172 nodes × 90 steps split first 56 / next 16 / final 16 steps."""
    nodes = [f"s{i}" for i in range(172)]
    rng = np.random.default_rng(0)
    df = pd.DataFrame({
        "timestamp": np.repeat([str(t) for t in range(90)], 172),
        "node_id": nodes * 90,
        "value": rng.standard_normal(90 * 172),
    })
    edges = [(nodes[i], nodes[i + 1]) for i in range(171)]
    ds = ingest_csv(*_write(tmp_path, df, edges), tau=3, horizon=3)
    train, val, test = split_timesteps(ds, SplitSpec(train=56, val=16, test=16, absolute=True))
    assert (train.n_steps, val.n_steps, test.n_steps) == (56, 16, 16)
    assert train.series.shape[1:] == (172, 1)
    assert test.timestamps[0] == "74"


# =============================================
# RUN CONFIG FILES
# =============================================

def test_parse_config_text_nests_dotted_keys():
    """Dotted keys nest, JSON values parse, bare words stay strings, comments are ignored."""
    values = parse_config_text(
        "method = diffirm\n"
        "# learning rates\n"
        "lr.theta = 0.01\n"
        "predictor.backbone = \"mlp\"\n"
        "feature_names = [\"speed\"]\n"
    )
    assert values == {"method": "diffirm", "lr": {"theta": 0.01},
                      "predictor": {"backbone": "mlp"}, "feature_names": ["speed"]}
    config = build_run_config(values)
    assert config.lr.theta == 0.01 and config.predictor.backbone == "mlp"


def test_unknown_key_rejected():
    """A typo fails at load time."""
    with pytest.raises(ConfigError, match="lamda"):
        build_run_config({"lamda": 2.0})


def test_duplicate_and_malformed_lines():
    """Duplicate keys and lines without '=' are config errors."""
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")


def test_env_seed_overrides_file(tmp_path, monkeypatch):
    """A DIFFIRM_SEED setting wins over the seed in the file."""
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\nmethod = erm\n")
    assert load_run_config(path).seed == 5
    monkeypatch.setattr(settings, "seed", 11)
    assert load_run_config(path).seed == 11


def test_missing_config_file():
    """An unreadable file is a config error."""
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.cfg")


def test_write_csv_tags_rows(tmp_path):
    """config_hash and seed become trailing columns."""
    path = write_csv(pd.DataFrame({"a": [1.5, 2.0]}), tmp_path / "out.csv", "abc123", 7)
    assert path.read_text() == "a,config_hash,seed\n1.5,abc123,7\n2,abc123,7\n"
