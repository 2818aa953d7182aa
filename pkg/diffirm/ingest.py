"""
File I/O: dataset CSVs, run-config files and deterministic report writers.

Features CSV:   timestamp,node_id,<feature_0>,...,<feature_{F-1}>
Adjacency CSV:  src,dst  (undirected edge list)

Row numbers in errors are file line numbers (the header is line 1).
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from pandera.errors import SchemaError, SchemaErrors
from pydantic import ValidationError

from diffirm.config import settings
from diffirm.dataset import StDataset
from diffirm.errors import ConfigError, IngestError
from diffirm.graph import Graph
from diffirm.models.config import RunConfig
from diffirm.validation_schemas import adjacency_schema, features_schema

logger = logging.getLogger("diffirm.ingest")

FLOAT_FORMAT = "%.10g"
_HEADER_LINES = 2  # dataframe index 0 is file line 2


# =============================================
# DATA CONVERSION HELPERS
# =============================================

def safe_float(val):
    """Convert value to float, return None if can't."""
    try:
        if pd.isna(val) or val == "":
            return None
        return float(val)
    except (ValueError, TypeError):
        return None


def safe_int(val):
    """Convert value to int, return None if can't (or if it has a fractional part)."""
    f = safe_float(val)
    if f is None or not float(f).is_integer():
        return None
    return int(f)


def _parse_numeric(df: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    out = df.copy()
    for col in columns:
        parsed = pd.to_numeric(df[col].str.strip(), errors="coerce")
        bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=np.float64, na_value=np.nan))
        if bad.any():
            pos = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestError(f"non-numeric value {df[col].iloc[pos]!r} in column {col!r}",
                              row=pos + _HEADER_LINES)
        out[col] = parsed.astype(np.float64)
    return out


def _timestamp_order(values: Sequence[str]) -> list[str]:
    """Unique timestamps sorted as integers when they all are, else as datetimes."""
    unique = list(dict.fromkeys(values))
    as_int = [safe_int(v) for v in unique]
    if all(v is not None for v in as_int):
        return [u for _, u in sorted(zip(as_int, unique))]
    try:
        keys = pd.to_datetime(pd.Series(unique), format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IngestError(f"timestamps are neither integers nor ISO-8601: {exc}") from exc
    return [unique[i] for i in np.argsort(keys.to_numpy(), kind="stable")]


def _validate(schema, df: pd.DataFrame, what: str) -> pd.DataFrame:
    try:
        return schema.validate(df, lazy=True)
    except SchemaErrors as exc:
        cases = exc.failure_cases
        first = cases.iloc[0]
        row = first.get("index")
        row = None if row is None or pd.isna(row) else int(row) + _HEADER_LINES
        raise IngestError(f"{what} failed validation ({len(cases)} problems), first: "
                          f"{first.get('check')} on column {first.get('column')}", row=row) from exc
    except SchemaError as exc:
        raise IngestError(f"{what} failed validation: {exc}") from exc


# =============================================
# INGESTION
# =============================================

def read_adjacency(path) -> tuple[list[str], list[tuple[str, str]]]:
    """Node ids in order of first appearance, and deduplicated undirected edges."""
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestError(f"cannot read adjacency file {path}: {exc}") from exc
    if list(raw.columns) != ["src", "dst"]:
        raise IngestError(f"adjacency header must be src,dst, got {','.join(raw.columns)}", row=1)
    df = _validate(adjacency_schema, raw.apply(lambda c: c.str.strip()), "adjacency CSV")

    nodes: dict[str, None] = {}
    edges: dict[frozenset, tuple[str, str]] = {}
    duplicates = 0
    for pos, (src, dst) in enumerate(zip(df["src"], df["dst"])):
        nodes.setdefault(src)
        nodes.setdefault(dst)
        if src == dst:
            logger.warning("adjacency line %d: self-edge %s ignored", pos + _HEADER_LINES, src)
            continue
        key = frozenset((src, dst))
        if key in edges:
            duplicates += 1
            continue
        edges[key] = (src, dst)
    if duplicates:
        logger.warning("adjacency: %d duplicate edges deduplicated", duplicates)
    return list(nodes), list(edges.values())


def ingest_csv(features_path, adjacency_path, tau: int, horizon: int, target_channel: int = 0,
               feature_names: Sequence[str] | None = None) -> StDataset:
    """Build an StDataset from a dense features CSV and an edge-list CSV.

    Nodes are indexed by first appearance in the adjacency file; nodes that
    only occur in the features file follow in their order of appearance there.
    """
    try:
        raw = pd.read_csv(features_path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestError(f"cannot read features file {features_path}: {exc}") from exc
    header = list(raw.columns)
    if header[:2] != ["timestamp", "node_id"] or len(header) < 3:
        raise IngestError("features header must be timestamp,node_id,<feature>...", row=1)
    columns = header[2:]
    if feature_names is not None:
        unknown = [f for f in feature_names if f not in columns]
        if unknown:
            raise IngestError(f"configured features not in file: {unknown}", row=1)
        columns = list(feature_names)
        raw = raw[["timestamp", "node_id", *columns]]

    raw = raw.assign(timestamp=raw["timestamp"].str.strip(), node_id=raw["node_id"].str.strip())
    df = _validate(features_schema(columns), _parse_numeric(raw, columns), "features CSV")

    dup = df.duplicated(["timestamp", "node_id"])
    if dup.any():
        pos = int(np.flatnonzero(dup.to_numpy())[0])
        raise IngestError(f"duplicate cell ({df['timestamp'].iloc[pos]}, {df['node_id'].iloc[pos]})",
                          row=pos + _HEADER_LINES)

    adj_nodes, edges = read_adjacency(adjacency_path)
    node_ids = list(dict.fromkeys([*adj_nodes, *df["node_id"]]))
    timestamps = _timestamp_order(df["timestamp"].tolist())

    grid = pd.MultiIndex.from_product([timestamps, node_ids], names=["timestamp", "node_id"])
    dense = df.set_index(["timestamp", "node_id"])[columns].reindex(grid)
    missing = dense.index[dense.isna().any(axis=1)]
    if len(missing):
        shown = ", ".join(f"({t}, {n})" for t, n in list(missing)[:10])
        raise IngestError(f"{len(missing)} missing grid cells, first: {shown}")

    series = dense.to_numpy(dtype=np.float64).reshape(len(timestamps), len(node_ids), len(columns))
    index = {n: i for i, n in enumerate(node_ids)}
    graph = Graph.from_edges(len(node_ids), [(index[s], index[d]) for s, d in edges], node_ids)
    logger.info("ingested %d steps x %d nodes x %d features, %d edges",
                len(timestamps), len(node_ids), len(columns), len(edges))
    return StDataset(graph, series, tuple(columns), tuple(timestamps), tau, horizon, target_channel)


def export_csv(ds: StDataset, features_path, adjacency_path) -> None:
    """Write a dataset in the ingestion schema.

    Edges are ordered by their higher endpoint so node order survives
    re-ingestion whenever every node after the first has a lower-index neighbour.
    """
    node_ids = list(ds.graph.node_ids) or [str(i) for i in range(ds.n_nodes)]
    t, n, f = ds.series.shape
    frame = pd.DataFrame(ds.series.reshape(t * n, f), columns=list(ds.feature_names))
    frame.insert(0, "node_id", node_ids * t)
    frame.insert(0, "timestamp", np.repeat(np.asarray(ds.timestamps, dtype=object), n))
    Path(features_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(features_path, index=False, float_format="%.17g")

    ii, jj = np.nonzero(np.triu(ds.graph.adjacency, k=1))
    order = sorted(zip(jj, ii))
    edges = pd.DataFrame({"src": [node_ids[i] for _, i in order], "dst": [node_ids[j] for j, _ in order]})
    edges.to_csv(adjacency_path, index=False)


# =============================================
# RUN CONFIG FILES
# =============================================

def parse_config_text(text: str) -> dict[str, Any]:
    """Flat `key = value` lines into a nested dict; dotted keys nest."""
    nested: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config line {lineno}: {key} conflicts with a scalar key")
        if leaf in node:
            raise ConfigError(f"config line {lineno}: duplicate key {key}")
        node[leaf] = parsed
    return nested


def build_run_config(values: dict[str, Any]) -> RunConfig:
    """Validate a nested dict as a RunConfig; DIFFIRM_SEED overrides the seed."""
    if settings.seed is not None:
        values = {**values, "seed": settings.seed}
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid run config: {problems}") from exc


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_run_config(parse_config_text(text))


# =============================================
# OUTPUT WRITERS
# =============================================

def write_csv(df: pd.DataFrame, path, config_hash: str | None = None, seed: int | None = None,
              index: bool = False) -> Path:
    """Deterministic CSV; config_hash/seed become trailing columns when given."""
    out = df.copy()
    if config_hash is not None:
        out["config_hash"] = config_hash
        out["seed"] = seed
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_json(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n")
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
