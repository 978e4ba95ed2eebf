"""Naive single-threaded reference evaluator for whole pipelines.

Ground truth for equivalence testing: plain Python dicts, loops, and
full sorts over raw records. Deliberately shares no engine machinery --
only the model vocabulary and the declarative operator specs (plain
dataclasses interpreted here from scratch).
"""
from __future__ import annotations

import numpy as np

from .model import Aggregate, AggregateKind, MASK64, WindowSpec, assign_windows
from .operators import (
    CrossFilter,
    ExternalJoin,
    Filter,
    FlatMap,
    KeyedAggregation,
    Pipeline,
    Sample,
    TemporalJoin,
    Window,
)

_CMP = {
    "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b, "!=": lambda a, b: a != b,
}


class OracleError(ValueError):
    """Pipeline uses an operator this evaluator does not model."""


def _rows(source: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(v) for v in r) for r in np.asarray(source, np.uint64)]


def _aggregate(values: list[int], agg: Aggregate) -> list[int]:
    kind = agg.kind
    if kind is AggregateKind.SUM:
        return [sum(values) & MASK64]
    if kind is AggregateKind.COUNT:
        return [len(values)]
    if kind is AggregateKind.AVG:
        return [(sum(values) & MASK64) // len(values)]
    if kind is AggregateKind.MIN:
        return [min(values)]
    if kind is AggregateKind.MAX:
        return [max(values)]
    if kind is AggregateKind.MEDIAN:
        return [sorted(values)[(len(values) - 1) // 2]]
    if kind is AggregateKind.DISTINCT_COUNT:
        return [len(set(values))]
    return sorted(values, reverse=True)[:agg.k]  # top K, descending


def _keyed_aggregation(rows_per_source: list[list[tuple]], spec: KeyedAggregation,
                       wspec: WindowSpec, ts_col: int) -> dict[int, list[tuple]]:
    out: dict[int, list[tuple]] = {}
    groups: dict[tuple, list[int]] = {}
    for rows in rows_per_source:
        for r in rows:
            key = r[spec.key_column] if spec.key_column is not None else None
            val = r[spec.value_column] if spec.value_column is not None else 0
            for w in assign_windows(r[ts_col], wspec):
                groups.setdefault((w, key), []).append(val)
    for (w, key), vals in groups.items():
        for v in _aggregate(vals, spec.aggregate):
            row = (v, w) if key is None else (key, v, w)
            out.setdefault(w, []).append(row)
    return out


def _temporal_join(rows_per_source: list[list[tuple]], spec: TemporalJoin,
                   wspec: WindowSpec, ts_cols: list[int]) -> dict[int, list[tuple]]:
    left, right = rows_per_source
    by_window: dict[int, tuple[list, list]] = {}
    for side, rows in ((0, left), (1, right)):
        for r in rows:
            for w in assign_windows(r[ts_cols[side]], wspec):
                by_window.setdefault(w, ([], []))[side].append(r)
    out: dict[int, list[tuple]] = {}
    for w, (ls, rs) in by_window.items():
        by_key: dict[int, list[tuple]] = {}
        for l in ls:
            by_key.setdefault(l[spec.key_column], []).append(l)
        matches = [
            (r[spec.key_column], l[1], l[2], r[1], r[2])
            for r in rs for l in by_key.get(r[spec.key_column], ())
        ]
        if matches:
            out[w] = matches
    return out


def _cross_filter(rows_per_source: list[list[tuple]], spec: CrossFilter,
                  wspec: WindowSpec, ts_cols: list[int]) -> dict[int, list[tuple]]:
    avg_rows, filter_rows = rows_per_source
    sums: dict[int, list[int]] = {}
    for r in avg_rows:
        for w in assign_windows(r[ts_cols[0]], wspec):
            sums.setdefault(w, []).append(r[spec.avg_column])
    out: dict[int, list[tuple]] = {}
    for r in filter_rows:
        for w in assign_windows(r[ts_cols[1]], wspec):
            vals = sums.get(w)
            threshold = (sum(vals) & MASK64) // len(vals) if vals else 0
            if r[spec.filter_column] > threshold:
                out.setdefault(w, []).append(r)
    return out


def evaluate(pipeline: Pipeline,
             sources: list[np.ndarray]) -> dict[int, list[tuple]]:
    """Per-window multisets (sorted lists) of output rows."""
    if len(sources) != pipeline.n_sources:
        raise OracleError("source count does not match the pipeline")
    rows_per_source = [_rows(s) for s in sources]
    ts_cols = [s.timestamp_column for s in pipeline.source_schemas]
    wspec: WindowSpec | None = None
    result: dict[int, list[tuple]] | None = None
    for op in pipeline.ops:
        if isinstance(op, Window):
            wspec = op.spec
        elif isinstance(op, Filter):
            cmp = _CMP[op.cmp.value]
            rows_per_source = [
                [r for r in rows if cmp(r[op.column], op.operand)]
                for rows in rows_per_source]
        elif isinstance(op, FlatMap):
            rows_per_source = [
                [r for r in rows for _ in range(op.copies)]
                for rows in rows_per_source]
        elif isinstance(op, ExternalJoin):
            table = dict(zip(op.table_keys, op.table_values))
            rows_per_source = [
                [r[:op.key_column] + (table.get(r[op.key_column], r[op.key_column]),)
                 + r[op.key_column + 1:] for r in rows]
                for rows in rows_per_source]
        elif isinstance(op, Sample):
            raise OracleError(
                "sampling depends on bundle partitioning; not modelled here")
        elif isinstance(op, KeyedAggregation):
            if wspec is None:
                raise OracleError("aggregation before any window operator")
            if result is not None:
                # chained aggregation consumes the previous stage's rows,
                # whose window-start column is the new event time
                flat = [r for rs in result.values() for r in rs]
                rows_per_source = [flat]
                ts_cols = [len(flat[0]) - 1 if flat else 0]
            result = _keyed_aggregation(rows_per_source, op, wspec, ts_cols[0])
        elif isinstance(op, TemporalJoin):
            if wspec is None:
                raise OracleError("join before any window operator")
            result = _temporal_join(rows_per_source, op, wspec, ts_cols)
        elif isinstance(op, CrossFilter):
            if wspec is None:
                raise OracleError("cross filter before any window operator")
            result = _cross_filter(rows_per_source, op, wspec, ts_cols)
        else:
            raise OracleError(f"unsupported operator {type(op).__name__}")
    if result is None:
        raise OracleError("pipeline has no terminal operator")
    return {w: sorted(rows) for w, rows in result.items() if rows}
