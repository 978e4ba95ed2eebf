"""Compound streaming operators composed from the grouping primitives.

Operator specs are plain data (so pipelines serialize and the reference
evaluator can interpret them identically); the *Operator classes hold
per-window state and are driven by the runtime's tasks.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from . import primitives as prim
from .hybridmem import HybridMemory
from .model import (
    Aggregate,
    AggregateKind,
    Bundle,
    ConfigError,
    MASK64,
    PoolKind,
    Schema,
    WindowSpec,
)
from .primitives import KPA, Placement

# -- operator specs ------------------------------------------------------


class CmpOp(enum.Enum):
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    EQ = "=="
    NE = "!="


_CMP = {
    CmpOp.LT: np.less, CmpOp.LE: np.less_equal, CmpOp.GT: np.greater,
    CmpOp.GE: np.greater_equal, CmpOp.EQ: np.equal, CmpOp.NE: np.not_equal,
}


@dataclass(frozen=True)
class Filter:
    """Keep records where column <cmp> operand."""

    column: int
    cmp: CmpOp
    operand: int


@dataclass(frozen=True)
class Sample:
    """Keep each record independently with probability rate."""

    rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("sample rate must be in [0, 1]")


@dataclass(frozen=True)
class FlatMap:
    """Emit `copies` duplicates of every record into a fresh bundle."""

    copies: int

    def __post_init__(self) -> None:
        if self.copies < 0:
            raise ConfigError("copies must be >= 0")


@dataclass(frozen=True)
class Window:
    spec: WindowSpec


@dataclass(frozen=True)
class KeyedAggregation:
    """Group per window (by key, or whole-window when key_column is None)
    and aggregate the value column. COUNT needs no value column."""

    key_column: int | None
    value_column: int | None
    aggregate: Aggregate
    early: bool = True

    def __post_init__(self) -> None:
        if self.value_column is None and self.aggregate.kind is not AggregateKind.COUNT:
            raise ConfigError("only count works without a value column")


@dataclass(frozen=True)
class TemporalJoin:
    """Inner join the two input streams on key within each window."""

    key_column: int


@dataclass(frozen=True)
class ExternalJoin:
    """In-place lookup of resident keys against a static table."""

    key_column: int
    table_keys: tuple[int, ...]
    table_values: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.table_keys) != len(self.table_values):
            raise ConfigError("table keys/values length mismatch")


@dataclass(frozen=True)
class CrossFilter:
    """Average one stream's values per window; pass the other stream's
    records whose filter column exceeds that average."""

    avg_column: int
    filter_column: int


OpSpec = Filter | Sample | FlatMap | Window | KeyedAggregation | TemporalJoin \
    | ExternalJoin | CrossFilter


@dataclass(frozen=True)
class Pipeline:
    name: str
    source_schemas: tuple[Schema, ...]
    ops: tuple[OpSpec, ...]

    @property
    def n_sources(self) -> int:
        return len(self.source_schemas)

    def window_op(self) -> Window:
        for op in self.ops:
            if isinstance(op, Window):
                return op
        raise ConfigError("pipeline has no window operator")


# -- stateless pieces ----------------------------------------------------


def filter_mask(spec: Filter, column_values: np.ndarray) -> np.ndarray:
    return _CMP[spec.cmp](column_values, np.uint64(spec.operand))


def sample_mask(spec: Sample, run_seed: int, bundle_id: int, n: int) -> np.ndarray:
    """Deterministic per-bundle coin flips, independent of worker count."""
    rng = np.random.default_rng(((run_seed & MASK64) << 20) ^ bundle_id)
    return rng.random(n) < spec.rate


def flat_map_rows(spec: FlatMap, rows: np.ndarray) -> np.ndarray:
    return np.repeat(rows, spec.copies, axis=0)


class LookupTable:
    """Static key -> value array pair held resident in the fast pool.

    Misses leave the key unchanged (generated workloads always cover).
    """

    def __init__(self, mem: HybridMemory, spec: ExternalJoin):
        order = np.argsort(np.asarray(spec.table_keys, np.uint64), kind="stable")
        self.keys = np.asarray(spec.table_keys, np.uint64)[order]
        self.values = np.asarray(spec.table_values, np.uint64)[order]
        if self.keys.size and np.any(self.keys[1:] == self.keys[:-1]):
            raise ConfigError("duplicate table keys")
        nbytes = max(1, self.keys.size) * 16
        chunk = mem.config.kpa_chunk_bytes
        self.handle = mem.allocator.alloc(PoolKind.FAST, chunk, -(-nbytes // chunk))
        self.mem = mem

    def apply_in_place(self, kpa: KPA) -> None:
        """Rewrite resident keys through the table; marks the array dirty."""
        kpa._require_live()
        n = len(kpa)
        if n:
            idx = np.searchsorted(self.keys, kpa.keys)
            idx = np.minimum(idx, self.keys.size - 1)
            hit = self.keys[idx] == kpa.keys
            kpa.keys[hit] = self.values[idx[hit]]
        self.mem.monitors.record_traffic(self.handle.pool, n * 16)
        kpa.dirty = True
        kpa.sorted = False

    def close(self) -> None:
        self.mem.allocator.free(self.handle)


# -- keyed / unkeyed aggregation -----------------------------------------


def partial_reduce_keyed(mem: HybridMemory, kpa: KPA, value_column: int | None,
                         aggregate: Aggregate, pane_start: int) -> Bundle:
    """Early aggregation of one sorted pane into a partial-record bundle.

    Algebraic aggregates only. Average keeps (sum, count) columns; the
    others carry a single partial value.
    """
    if not aggregate.algebraic:
        raise ConfigError("early aggregation needs an algebraic aggregate")
    if aggregate.kind is AggregateKind.AVG:
        values = mem.gather(kpa.refs, value_column) if len(kpa) else kpa.keys[:0]
        starts, counts = prim.key_runs(kpa.keys)
        run_keys = kpa.keys[starts] if starts.size else kpa.keys[:0]
        sums = np.add.reduceat(values, starts) if starts.size else values[:0]
        m = run_keys.shape[0]
        rows = (np.column_stack((run_keys, sums, counts.astype(np.uint64),
                                 np.full(m, pane_start, np.uint64)))
                if m else np.empty((0, 4), np.uint64))
        return mem.register_bundle(rows, Schema(4, 3))
    if aggregate.kind is AggregateKind.COUNT:
        return prim.reduce_out_of_kpa(mem, kpa, kpa.resident_col,
                                      Aggregate(AggregateKind.COUNT), pane_start)
    return prim.reduce_out_of_kpa(mem, kpa, value_column, aggregate, pane_start)


_COMBINE = {
    AggregateKind.SUM: Aggregate(AggregateKind.SUM),
    AggregateKind.COUNT: Aggregate(AggregateKind.SUM),
    AggregateKind.MIN: Aggregate(AggregateKind.MIN),
    AggregateKind.MAX: Aggregate(AggregateKind.MAX),
}


def combine_reduce_keyed(mem: HybridMemory, kpa: KPA, aggregate: Aggregate,
                         window_start: int) -> Bundle:
    """Fold merged partial records into final per-key outputs."""
    if aggregate.kind is AggregateKind.AVG:
        if len(kpa):
            sums = mem.gather(kpa.refs, 1)
            counts = mem.gather(kpa.refs, 2)
            starts, _ = prim.key_runs(kpa.keys)
            run_keys = kpa.keys[starts]
            tot_s = np.add.reduceat(sums, starts)
            tot_c = np.add.reduceat(counts, starts)
            vals = tot_s // tot_c
        else:
            run_keys = vals = kpa.keys[:0]
        rows = (np.column_stack((run_keys, vals,
                                 np.full(run_keys.shape[0], window_start, np.uint64)))
                if run_keys.shape[0] else np.empty((0, 3), np.uint64))
        return mem.register_bundle(rows, Schema(3, 2))
    combine = _COMBINE.get(aggregate.kind, aggregate)
    return prim.reduce_out_of_kpa(mem, kpa, 1, combine, window_start)


class _PaneState:
    __slots__ = ("kpas", "partial_bundles", "scalars", "row_bundles", "slab",
                 "last_ingest_ms")

    def __init__(self, slab):
        self.kpas: list[KPA] = []
        self.partial_bundles: list[int] = []
        self.scalars: list[tuple] = []
        self.row_bundles: list[int] = []
        self.slab = slab
        self.last_ingest_ms = 0


class AggregationOperator:
    """Per-window grouped (or whole-window) aggregation.

    Panes arrive as key pointer arrays over the source bundles; with
    early aggregation on, each algebraic pane collapses to a partial
    bundle immediately and the sources can be reclaimed. Windows are
    assembled from their panes at close.
    """

    def __init__(self, mem: HybridMemory, spec: KeyedAggregation,
                 window: WindowSpec):
        self.mem = mem
        self.spec = spec
        self.window = window
        self.early = spec.early and spec.aggregate.algebraic
        self.panes: dict[int, _PaneState] = {}
        self._lock = threading.Lock()

    def _pane(self, pane_start: int) -> _PaneState:
        with self._lock:
            st = self.panes.get(pane_start)
            if st is None:
                slab = self.mem.allocator.alloc(
                    PoolKind.SLOW, self.mem.config.window_state_slab_bytes)
                st = _PaneState(slab)
                self.panes[pane_start] = st
            return st

    # -- keyed path ------------------------------------------------------

    def process_pane(self, pane_start: int, kpa: KPA, placement: Placement,
                     now_ms: int = 0) -> None:
        """Swap to the group key, sort, optionally early-aggregate, save."""
        spec = self.spec
        if spec.key_column is None:
            self._process_unkeyed(pane_start, kpa, now_ms)
            return
        if kpa.resident_col != spec.key_column:
            prim.key_swap(self.mem, kpa, spec.key_column)
        prim.sort(self.mem, kpa)
        st = self._pane(pane_start)
        if self.early:
            partial = partial_reduce_keyed(self.mem, kpa, spec.value_column,
                                           spec.aggregate, pane_start)
            prim.destroy(self.mem, kpa)
            pk = prim.extract(self.mem, partial, 0, placement)
            pk.sorted = True  # partial rows are emitted in key order
            with self._lock:
                st.kpas.append(pk)
                st.partial_bundles.append(partial.bundle_id)
        else:
            with self._lock:
                st.kpas.append(kpa)
        with self._lock:
            st.last_ingest_ms = max(st.last_ingest_ms, now_ms)

    def _process_unkeyed(self, pane_start: int, kpa: KPA, now_ms: int) -> None:
        st = self._pane(pane_start)
        agg = self.spec.aggregate
        if self.early:
            values = (self.mem.gather(kpa.refs, self.spec.value_column)
                      if len(kpa) and self.spec.value_column is not None
                      else np.zeros(len(kpa), np.uint64))
            kind = agg.kind
            if kind in (AggregateKind.SUM, AggregateKind.AVG, AggregateKind.COUNT):
                part = (int(values.sum(dtype=np.uint64)) & MASK64, len(values))
            elif kind is AggregateKind.MIN:
                part = (int(values.min()) if len(values) else MASK64, len(values))
            elif kind is AggregateKind.MAX:
                part = (int(values.max()) if len(values) else 0, len(values))
            else:  # TOPK
                top = np.sort(values)[::-1][:agg.k]
                part = (tuple(int(v) for v in top), len(values))
            prim.destroy(self.mem, kpa)
            with self._lock:
                st.scalars.append(part)
                st.last_ingest_ms = max(st.last_ingest_ms, now_ms)
        else:
            with self._lock:
                st.kpas.append(kpa)
                st.last_ingest_ms = max(st.last_ingest_ms, now_ms)

    # -- row fallback (narrow schemas skip extraction) -------------------

    def process_pane_rows(self, pane_start: int, rows: np.ndarray,
                          schema: Schema, now_ms: int = 0) -> None:
        """Full-row grouping path: pane rows are parked as a bundle and
        sorted wholesale at close."""
        st = self._pane(pane_start)
        b = self.mem.register_bundle(rows, schema)
        with self._lock:
            st.row_bundles.append(b.bundle_id)
            st.last_ingest_ms = max(st.last_ingest_ms, now_ms)

    # -- close -----------------------------------------------------------

    def pane_range(self, window_start: int) -> list[int]:
        return [p for p in sorted(self.panes)
                if window_start <= p < window_start + self.window.length_ms]

    def last_ingest_ms(self, window_start: int) -> int:
        return max((self.panes[p].last_ingest_ms
                    for p in self.pane_range(window_start)), default=0)

    def close_window(self, window_start: int, placement: Placement) -> Bundle:
        spec = self.spec
        pane_starts = self.pane_range(window_start)
        if spec.key_column is None:
            return self._close_unkeyed(window_start, pane_starts)
        row_bundles = [bid for p in pane_starts
                       for bid in self.panes[p].row_bundles]
        if row_bundles:
            return self._close_rows(window_start, row_bundles)
        kpas = [k for p in pane_starts for k in self.panes[p].kpas]
        if not kpas:
            return self.mem.register_bundle(np.empty((0, 3), np.uint64), Schema(3, 2))
        merged, temps = _tree_merge(self.mem, kpas, placement)
        if self.early:
            out = combine_reduce_keyed(self.mem, merged, spec.aggregate, window_start)
        else:
            vcol = (spec.value_column if spec.value_column is not None
                    else merged.resident_col)
            out = prim.reduce_out_of_kpa(self.mem, merged, vcol,
                                         spec.aggregate, window_start)
        for t in temps:
            prim.destroy(self.mem, t)
        return out

    def _close_unkeyed(self, window_start: int, pane_starts: list[int]) -> Bundle:
        agg = self.spec.aggregate
        kind = agg.kind
        if self.early:
            parts = [s for p in pane_starts for s in self.panes[p].scalars]
            total_n = sum(p[1] for p in parts)
            if total_n == 0:
                return self.mem.register_bundle(np.empty((0, 2), np.uint64), Schema(2, 1))
            if kind is AggregateKind.SUM:
                val = sum(p[0] for p in parts) & MASK64
            elif kind is AggregateKind.COUNT:
                val = total_n
            elif kind is AggregateKind.AVG:
                val = (sum(p[0] for p in parts) & MASK64) // total_n
            elif kind is AggregateKind.MIN:
                val = min(p[0] for p in parts if p[1])
            elif kind is AggregateKind.MAX:
                val = max(p[0] for p in parts if p[1])
            else:  # TOPK: merge pane top lists
                allv = sorted((v for p in parts for v in p[0]), reverse=True)
                rows = np.array([[v, window_start] for v in allv[:agg.k]], np.uint64)
                return self.mem.register_bundle(
                    rows if rows.size else np.empty((0, 2), np.uint64), Schema(2, 1))
            return self.mem.register_bundle(
                np.array([[val, window_start]], np.uint64), Schema(2, 1))
        kpas = [k for p in pane_starts for k in self.panes[p].kpas]
        if self.spec.value_column is None:  # count-only: no record access
            values = np.zeros(sum(len(k) for k in kpas), np.uint64)
        else:
            values = (np.concatenate([self.mem.gather(k.refs, self.spec.value_column)
                                      for k in kpas if len(k)])
                      if any(len(k) for k in kpas) else np.empty(0, np.uint64))
        if values.size == 0:
            return self.mem.register_bundle(np.empty((0, 2), np.uint64), Schema(2, 1))
        ones = np.zeros(values.shape[0], np.uint64)  # single grand group
        out_k, out_v = prim.segment_aggregate(ones, values, agg)
        rows = np.column_stack((out_v, np.full(out_v.shape[0], window_start, np.uint64)))
        return self.mem.register_bundle(rows, Schema(2, 1))

    def _close_rows(self, window_start: int, row_bundle_ids: list[int]) -> Bundle:
        spec = self.spec
        rows = np.concatenate([self.mem.bundle(b).records for b in row_bundle_ids])
        order = np.argsort(rows[:, spec.key_column], kind="stable")
        rows = rows[order]
        keys = rows[:, spec.key_column]
        values = (rows[:, spec.value_column] if spec.value_column is not None
                  else np.zeros(rows.shape[0], np.uint64))
        self.mem.monitors.record_traffic(PoolKind.SLOW, rows.size * 8)
        out_k, out_v = prim.segment_aggregate(keys, values, spec.aggregate)
        out = (np.column_stack((out_k, out_v,
                                np.full(out_k.shape[0], window_start, np.uint64)))
               if out_k.shape[0] else np.empty((0, 3), np.uint64))
        return self.mem.register_bundle(out, Schema(3, 2))

    def retire_panes(self, before: int) -> None:
        """Free pane state that no open window can need any more."""
        with self._lock:
            gone = {p: self.panes.pop(p) for p in list(self.panes) if p < before}
        for st in gone.values():
            for k in st.kpas:
                prim.destroy(self.mem, k)
            for bid in st.partial_bundles:
                self.mem.unpin(bid)
            for bid in st.row_bundles:
                self.mem.unpin(bid)
            self.mem.allocator.free(st.slab)


def _tree_merge(mem: HybridMemory, kpas: list[KPA],
                placement: Placement) -> tuple[KPA, list[KPA]]:
    """Pairwise merge rounds; returns (result, temporaries to destroy).

    Inputs are never destroyed here: pane state arrays may be shared by
    later sliding windows.
    """
    temps: list[KPA] = []
    level = list(kpas)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            m = prim.merge(mem, level[i], level[i + 1], placement)
            temps.append(m)
            nxt.append(m)
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0], temps


# -- temporal join -------------------------------------------------------


class _JoinWindow:
    __slots__ = ("left", "right", "emitted", "slab", "lock", "last_ingest_ms")

    def __init__(self, slab):
        self.left: KPA | None = None
        self.right: KPA | None = None
        self.emitted: list[int] = []
        self.slab = slab
        self.lock = threading.Lock()
        self.last_ingest_ms = 0


class TemporalJoinOperator:
    """Symmetric within-window inner join, fixed windows only.

    Each arriving array joins against the opposite side's merged state,
    then merges into its own side, atomically per window; every L/R pair
    in a window is emitted exactly once regardless of arrival order.
    """

    def __init__(self, mem: HybridMemory, spec: TemporalJoin, window: WindowSpec,
                 source_schema: Schema):
        if window.slide_ms != window.length_ms:
            raise ConfigError("temporal join supports fixed windows only")
        if source_schema.column_count != 3:
            raise ConfigError("temporal join expects (key, value, ts) sources")
        self.mem = mem
        self.spec = spec
        self.window = window
        self.windows: dict[int, _JoinWindow] = {}
        self._lock = threading.Lock()

    def _window(self, start: int) -> _JoinWindow:
        with self._lock:
            w = self.windows.get(start)
            if w is None:
                slab = self.mem.allocator.alloc(
                    PoolKind.SLOW, self.mem.config.window_state_slab_bytes)
                w = _JoinWindow(slab)
                self.windows[start] = w
            return w

    def process_pane(self, side: int, window_start: int, kpa: KPA,
                     placement: Placement, now_ms: int = 0) -> None:
        if kpa.resident_col != self.spec.key_column:
            prim.key_swap(self.mem, kpa, self.spec.key_column)
        prim.sort(self.mem, kpa)
        w = self._window(window_start)
        with w.lock:
            other = w.right if side == 0 else w.left
            if other is not None and len(other) and len(kpa):
                if side == 0:
                    keys, lr, rr = prim.join(self.mem, kpa, other)
                else:
                    keys, lr, rr = prim.join(self.mem, other, kpa)
                if keys.size:
                    rows = np.column_stack((
                        keys,
                        self.mem.gather(lr, 1), self.mem.gather(lr, 2),
                        self.mem.gather(rr, 1), self.mem.gather(rr, 2)))
                    out = self.mem.register_bundle(rows, Schema(5, 2))
                    w.emitted.append(out.bundle_id)
            mine = w.left if side == 0 else w.right
            if mine is None:
                merged = kpa
            else:
                merged = prim.merge(self.mem, mine, kpa, placement)
                prim.destroy(self.mem, mine)
                prim.destroy(self.mem, kpa)
            if side == 0:
                w.left = merged
            else:
                w.right = merged
            w.last_ingest_ms = max(w.last_ingest_ms, now_ms)

    def last_ingest_ms(self, window_start: int) -> int:
        w = self.windows.get(window_start)
        return w.last_ingest_ms if w else 0

    def close_window(self, window_start: int) -> list[int]:
        """Hand back the emitted match bundles; drop the side state."""
        w = self.windows.pop(window_start, None)
        if w is None:
            return []
        for side in (w.left, w.right):
            if side is not None:
                prim.destroy(self.mem, side)
        self.mem.allocator.free(w.slab)
        return w.emitted


# -- cross filter --------------------------------------------------------


class _CrossWindow:
    __slots__ = ("sum", "count", "kpas", "slab", "last_ingest_ms")

    def __init__(self, slab):
        self.sum = 0
        self.count = 0
        self.kpas: list[KPA] = []
        self.slab = slab
        self.last_ingest_ms = 0


class CrossFilterOperator:
    """Average stream A's column per window; emit stream B records whose
    filter column exceeds that (floored) average. Fixed windows only."""

    def __init__(self, mem: HybridMemory, spec: CrossFilter, window: WindowSpec,
                 filter_schema: Schema):
        if window.slide_ms != window.length_ms:
            raise ConfigError("cross filter supports fixed windows only")
        self.mem = mem
        self.spec = spec
        self.window = window
        self.filter_schema = filter_schema
        self.windows: dict[int, _CrossWindow] = {}
        self._lock = threading.Lock()

    def _window(self, start: int) -> _CrossWindow:
        with self._lock:
            w = self.windows.get(start)
            if w is None:
                slab = self.mem.allocator.alloc(
                    PoolKind.SLOW, self.mem.config.window_state_slab_bytes)
                w = _CrossWindow(slab)
                self.windows[start] = w
            return w

    def process_avg_pane(self, window_start: int, kpa: KPA, now_ms: int = 0) -> None:
        values = (self.mem.gather(kpa.refs, self.spec.avg_column)
                  if len(kpa) else np.empty(0, np.uint64))
        prim.destroy(self.mem, kpa)
        w = self._window(window_start)
        with self._lock:
            w.sum = (w.sum + int(values.sum(dtype=np.uint64))) & MASK64
            w.count += values.shape[0]
            w.last_ingest_ms = max(w.last_ingest_ms, now_ms)

    def process_filter_pane(self, window_start: int, kpa: KPA, now_ms: int = 0) -> None:
        if kpa.resident_col != self.spec.filter_column:
            prim.key_swap(self.mem, kpa, self.spec.filter_column)
        w = self._window(window_start)
        with self._lock:
            w.kpas.append(kpa)
            w.last_ingest_ms = max(w.last_ingest_ms, now_ms)

    def last_ingest_ms(self, window_start: int) -> int:
        w = self.windows.get(window_start)
        return w.last_ingest_ms if w else 0

    def close_window(self, window_start: int, placement: Placement) -> Bundle:
        w = self.windows.pop(window_start, None)
        if w is None:
            return self.mem.register_bundle(
                np.empty((0, self.filter_schema.column_count), np.uint64),
                self.filter_schema)
        threshold = (w.sum // w.count) if w.count else 0
        pieces = []
        for kpa in w.kpas:
            kept = prim.selection(self.mem, kpa, lambda k: k > threshold)
            if len(kept):
                pieces.append(self.mem.gather_rows(kept.refs))
            prim.destroy(self.mem, kept)
            prim.destroy(self.mem, kpa)
        rows = (np.concatenate(pieces) if pieces
                else np.empty((0, self.filter_schema.column_count), np.uint64))
        self.mem.allocator.free(w.slab)
        return self.mem.register_bundle(rows, self.filter_schema)
