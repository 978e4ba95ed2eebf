"""Pipeline execution on a virtual clock.

One tick per sample interval: ingest paced by per-source rates, a
barrier of per-bundle tasks run in urgency waves, in-order window
closure driven by the target watermark, then one monitor sample that
also refreshes the placement knob. Virtual time makes single-worker
runs bit-reproducible; multi-worker runs keep the same per-window
output multisets.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from . import primitives as prim
from .hybridmem import HybridMemory, PoolConfig
from .model import (
    ConfigError,
    ImpactTag,
    PlanError,
    Schema,
    Watermark,
    WindowSpec,
    assign_tag,
)
from .operators import (
    AggregationOperator,
    CrossFilter,
    CrossFilterOperator,
    ExternalJoin,
    Filter,
    FlatMap,
    KeyedAggregation,
    LookupTable,
    Pipeline,
    Sample,
    TemporalJoin,
    TemporalJoinOperator,
    Window,
    filter_mask,
    flat_map_rows,
    sample_mask,
)
from .primitives import Placement


class IngestError(RuntimeError):
    """A source broke its contract (non-monotone watermark)."""


# -- planning ------------------------------------------------------------


@dataclass(frozen=True)
class Plan:
    """Executable shape of a pipeline: which transforms fuse into the
    extraction scan, where lookups and swaps go, and the terminal stage."""

    window: WindowSpec
    stage_names: tuple[str, ...]
    pre_ops: tuple
    lookup: ExternalJoin | None
    terminal: KeyedAggregation | TemporalJoin | CrossFilter
    chained: KeyedAggregation | None
    row_path: bool
    extract_columns: tuple[int, ...]


def _check_column(col: int | None, schema: Schema, what: str) -> None:
    if col is not None and not 0 <= col < schema.column_count:
        raise PlanError(f"{what} column {col} not in schema "
                        f"of {schema.column_count} columns")


def plan_pipeline(pipeline: Pipeline) -> Plan:
    """Classify operators and lay out the stage sequence.

    Grouping stages get key pointer array inputs: extraction is inserted
    after the last record-producing transform, mask transforms fuse into
    that scan, and a chained aggregation fuses its upstream emit with its
    own extraction. Sources narrower than three columns skip extraction
    entirely and group full rows.
    """
    try:
        wspec = pipeline.window_op().spec
    except ConfigError as exc:
        raise PlanError(str(exc)) from exc
    schemas = pipeline.source_schemas
    pre: list = []
    lookup: ExternalJoin | None = None
    terminal = None
    chained: KeyedAggregation | None = None
    windowed = False
    for op in pipeline.ops:
        if isinstance(op, Window):
            windowed = True
            continue
        if isinstance(op, (Filter, Sample, FlatMap)):
            if windowed or terminal is not None:
                raise PlanError("record transforms must precede windowing")
            pre.append(op)
        elif isinstance(op, ExternalJoin):
            if lookup is not None or windowed or terminal is not None:
                raise PlanError("at most one lookup join, before windowing")
            lookup = op
        elif isinstance(op, (KeyedAggregation, TemporalJoin, CrossFilter)):
            if terminal is None:
                terminal = op
            elif isinstance(terminal, KeyedAggregation) and isinstance(
                    op, KeyedAggregation) and chained is None:
                chained = op
            else:
                raise PlanError("unsupported operator chain")
        else:
            raise PlanError(f"unknown operator {type(op).__name__}")
    if terminal is None:
        raise PlanError("pipeline has no grouping stage")

    n_needed = 2 if isinstance(terminal, (TemporalJoin, CrossFilter)) else 1
    if pipeline.n_sources != n_needed:
        raise PlanError(f"{type(terminal).__name__} needs {n_needed} sources, "
                        f"got {pipeline.n_sources}")
    for op in pre:
        if isinstance(op, Filter):
            _check_column(op.column, schemas[0], "filter")
    if lookup is not None:
        _check_column(lookup.key_column, schemas[0], "lookup key")
    if isinstance(terminal, KeyedAggregation):
        _check_column(terminal.key_column, schemas[0], "group key")
        _check_column(terminal.value_column, schemas[0], "value")
    elif isinstance(terminal, TemporalJoin):
        for s in schemas:
            _check_column(terminal.key_column, s, "join key")
    else:
        _check_column(terminal.avg_column, schemas[0], "average")
        _check_column(terminal.filter_column, schemas[1], "filter")
    if chained is not None:
        stage1 = Schema(3, 2) if terminal.key_column is not None else Schema(2, 1)
        _check_column(chained.key_column, stage1, "chained key")
        _check_column(chained.value_column, stage1, "chained value")
        if wspec.slide_ms != wspec.length_ms:
            raise PlanError("chained aggregation needs fixed windows")

    row_path = any(s.column_count < 3 for s in schemas)
    if row_path:
        if not isinstance(terminal, KeyedAggregation) or pre or lookup or chained:
            raise PlanError("narrow schemas support plain aggregation only")

    ts0 = schemas[0].timestamp_column
    extract_columns = tuple(
        lookup.key_column if (lookup is not None and s == 0)
        else schemas[s].timestamp_column
        for s in range(len(schemas)))

    names: list[str] = ["ingest"]
    if row_path:
        names += ["rows[pane]", "sort_rows",
                  f"reduce[{terminal.aggregate.kind.value}]", "emit"]
        return Plan(wspec, tuple(names), tuple(pre), None, terminal, None,
                    True, extract_columns)
    mask_run: list[str] = []
    for op in pre:
        if isinstance(op, FlatMap):
            names.extend(mask_run)
            mask_run = []
            names.append(f"flatmap[x{op.copies}]")
        elif isinstance(op, Filter):
            mask_run.append(f"filter[c{op.column}{op.cmp.value}{op.operand}]")
        else:
            mask_run.append(f"sample[{op.rate:g}]")
    extract_name = f"extract[c{extract_columns[0]}]"
    names.append("+".join(mask_run + [extract_name]) if mask_run else extract_name)
    if lookup is not None:
        names.append("lookup_in_place")
        names.append(f"writeback+swap[c{ts0}]")
    names.append("partition[pane]")
    if isinstance(terminal, KeyedAggregation):
        if terminal.key_column is not None:
            names += [f"swap[c{terminal.key_column}]", "sort"]
        names.append(f"reduce[{terminal.aggregate.kind.value}]")
    elif isinstance(terminal, TemporalJoin):
        names += [f"swap[c{terminal.key_column}]", "sort", "join+merge"]
    else:
        names.append("cross_filter")
    if chained is not None:
        names += [f"emit+extract[c{chained.key_column}]", "sort",
                  f"reduce[{chained.aggregate.kind.value}]"]
    names.append("emit")
    return Plan(wspec, tuple(names), tuple(pre), lookup, terminal, chained,
                False, extract_columns)


# -- run configuration and report ----------------------------------------


@dataclass(frozen=True)
class RunConfig:
    workers: int = 1
    target_delay_ms: int = 1000
    sample_interval_ms: int = 10
    high_horizon_windows: int = 2
    pause_threshold: float = 0.95
    resume_threshold: float = 0.85
    # virtual-ms -> ingestion rate multiplier (scenario ramps)
    rate_schedule: Callable[[int], float] | None = None
    max_ticks: int = 2_000_000

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.sample_interval_ms <= 0:
            raise ConfigError("sample interval must be positive")
        if self.target_delay_ms <= 0:
            raise ConfigError("target delay must be positive")
        if not 0 < self.resume_threshold <= self.pause_threshold:
            raise ConfigError("resume threshold must be in (0, pause]")


@dataclass(frozen=True)
class SourceFeed:
    """One source's event stream plus its pacing (records per virtual ms)."""

    events: Iterable
    records_per_ms: float

    def __post_init__(self) -> None:
        if self.records_per_ms <= 0:
            raise ConfigError("source rate must be positive")


@dataclass(frozen=True)
class MetricsRow:
    time_ms: int
    records_ingested: int
    records_per_s: float
    fast_used_bytes: int
    slow_bandwidth_fraction: float
    k_low: float
    k_high: float
    spill_count: int
    egress_delay_ms: int  # max over windows closed this interval; -1 if none

    FIELDS = ("time_ms", "records_ingested", "records_per_s", "fast_used_bytes",
              "slow_bandwidth_fraction", "k_low", "k_high", "spill_count",
              "egress_delay_ms")


@dataclass
class RunReport:
    outputs: dict[int, np.ndarray]
    closed_order: list[int]
    metrics: list[MetricsRow]
    knob_trace: list[tuple[int, float, float]]
    egress_delay_ms: dict[int, int]
    spill_count: int
    late_records: int
    peak_fast_used: int
    records_ingested: int
    virtual_ms: int
    wall_ms: float
    knob_updates: int
    mem: "HybridMemory" = None  # post-run inspection (accounting, monitors)

    def output_multisets(self) -> dict[int, list[tuple]]:
        """Nonempty per-window outputs as sorted tuple lists."""
        return {w: sorted(map(tuple, rows.tolist()))
                for w, rows in self.outputs.items() if rows.shape[0]}

    def summary(self) -> dict:
        delays = [d for d in self.egress_delay_ms.values()]
        return {
            "records_ingested": self.records_ingested,
            "virtual_ms": self.virtual_ms,
            "records_per_s": (self.records_ingested * 1000.0 / self.virtual_ms
                              if self.virtual_ms else 0.0),
            "windows_closed": len(self.closed_order),
            "max_egress_delay_ms": max(delays) if delays else 0,
            "spill_count": self.spill_count,
            "late_records": self.late_records,
            "peak_fast_used_bytes": self.peak_fast_used,
            "knob_updates": self.knob_updates,
            "wall_ms": self.wall_ms,
        }


class WatermarkState:
    """Per-source watermarks and their min, the global close target."""

    def __init__(self, n_sources: int):
        self._latest = [-1] * n_sources
        self._lock = threading.Lock()

    def advance(self, wm: Watermark) -> None:
        with self._lock:
            if wm.timestamp <= self._latest[wm.source]:
                raise IngestError(
                    f"watermark for source {wm.source} went backwards: "
                    f"{wm.timestamp} after {self._latest[wm.source]}")
            self._latest[wm.source] = wm.timestamp

    @property
    def target(self) -> int:
        with self._lock:
            return min(self._latest)


@dataclass
class _Task:
    source: int
    bundle_id: int | None
    rows: np.ndarray | None
    tag: ImpactTag
    now_ms: int
    # windows ending at or before this are sealed by the watermarks that
    # preceded the bundle in stream order; their records count as late
    late_bound: int = 0


_SENTINEL = object()


class _Run:
    def __init__(self, pipeline: Pipeline, plan: Plan, feeds: list[SourceFeed],
                 pool_config: PoolConfig, cfg: RunConfig, seed: int):
        self.plan = plan
        self.cfg = cfg
        self.seed = seed
        self.schemas = pipeline.source_schemas
        self.mem = HybridMemory(pool_config)
        self.wm = WatermarkState(len(feeds))
        self.window = plan.window
        spec = plan.terminal
        self.agg = self.join = self.cross = self.chain = self.table = None
        if isinstance(spec, KeyedAggregation):
            self.agg = AggregationOperator(self.mem, spec, plan.window)
            if plan.chained is not None:
                self.chain = AggregationOperator(self.mem, plan.chained, plan.window)
        elif isinstance(spec, TemporalJoin):
            self.join = TemporalJoinOperator(self.mem, spec, plan.window,
                                             self.schemas[0])
        else:
            self.cross = CrossFilterOperator(self.mem, spec, plan.window,
                                             self.schemas[1])
        if plan.lookup is not None:
            self.table = LookupTable(self.mem, plan.lookup)
        self.next_close = 0
        self.closed_end = 0
        self.outputs: dict[int, np.ndarray] = {}
        self.closed_order: list[int] = []
        self.egress: dict[int, int] = {}
        self.records_ingested = 0

    # -- tasks -----------------------------------------------------------

    def _placement(self, tag: ImpactTag, salt: int) -> Placement:
        rng = np.random.default_rng(((self.seed & 0xFFFFFFFF) << 24)
                                    ^ (salt * 0x9E3779B1 & 0xFFFFFFFFFFFF))
        return Placement(tag, rng)

    def _make_task(self, source: int, rows: np.ndarray, now_ms: int) -> _Task:
        self.records_ingested += rows.shape[0]
        ts_col = self.schemas[source].timestamp_column
        min_ts = int(rows[:, ts_col].min()) if rows.shape[0] else 0
        first_end = (min_ts // self.window.slide_ms + 1) * self.window.slide_ms
        tag = assign_tag(first_end, self.wm.target, self.window.length_ms,
                         self.cfg.high_horizon_windows)
        bound = self.wm.target + 1
        if self.plan.row_path:
            return _Task(source, None, rows, tag, now_ms, bound)
        bundle = self.mem.register_bundle(rows, self.schemas[source])
        return _Task(source, bundle.bundle_id, None, tag, now_ms, bound)

    def _run_tasks(self, tasks: list[_Task], pool: ThreadPoolExecutor | None) -> None:
        for wave in (ImpactTag.URGENT, ImpactTag.HIGH, ImpactTag.LOW):
            batch = [t for t in tasks if t.tag is wave]
            if not batch:
                continue
            if pool is None:
                for t in batch:
                    self._exec_task(t)
            else:
                for f in [pool.submit(self._exec_task, t) for t in batch]:
                    f.result()

    def _exec_task(self, task: _Task) -> None:
        mem, plan = self.mem, self.plan
        slide, length = self.window.slide_ms, self.window.length_ms
        if plan.row_path:
            rows = task.rows
            ts = rows[:, self.schemas[task.source].timestamp_column]
            panes = (ts // np.uint64(slide)) * np.uint64(slide)
            for p in np.unique(panes):
                sub = rows[panes == p]
                if int(p) + length <= task.late_bound:
                    mem.monitors.record_late(sub.shape[0])
                    continue
                self.agg.process_pane_rows(int(p), sub,
                                           self.schemas[task.source], task.now_ms)
            return
        bundle = mem.bundle(task.bundle_id)
        mask = None
        own = False
        for op in plan.pre_ops:
            if isinstance(op, Filter):
                m = filter_mask(op, mem.read_column(bundle.bundle_id, op.column))
                mask = m if mask is None else mask & m
            elif isinstance(op, Sample):
                m = sample_mask(op, self.seed, bundle.bundle_id, len(bundle))
                mask = m if mask is None else mask & m
            else:  # FlatMap rewrites records: seal a fresh bundle
                rows = bundle.records if mask is None else bundle.records[mask]
                new = mem.register_bundle(flat_map_rows(op, rows), bundle.schema)
                if own:
                    mem.unpin(bundle.bundle_id)
                bundle, mask, own = new, None, True
        placement = self._placement(task.tag, bundle.bundle_id)
        xcol = plan.extract_columns[task.source]
        if mask is None:
            kpa = prim.extract(mem, bundle, xcol, placement)
        else:
            kpa = prim.extract_masked(mem, bundle, xcol, mask, placement)
        if plan.lookup is not None and task.source == 0:
            self.table.apply_in_place(kpa)
            # write the mapped keys home and make event time resident
            prim.key_swap(mem, kpa, self.schemas[0].timestamp_column)
        panes = prim.partition(mem, kpa, slide, placement)
        prim.destroy(mem, kpa)
        for pane_start, pane in panes:
            if pane_start + length <= task.late_bound:
                mem.monitors.record_late(len(pane))
                prim.destroy(mem, pane)
                continue
            if self.agg is not None:
                self.agg.process_pane(pane_start, pane, placement, task.now_ms)
            elif self.join is not None:
                self.join.process_pane(task.source, pane_start, pane,
                                       placement, task.now_ms)
            elif task.source == 0:
                self.cross.process_avg_pane(pane_start, pane, task.now_ms)
            else:
                self.cross.process_filter_pane(pane_start, pane, task.now_ms)
        if own:
            mem.unpin(bundle.bundle_id)
        mem.unpin(task.bundle_id)

    # -- closing ---------------------------------------------------------

    def _state_high_water(self) -> int | None:
        """Largest window start any operator still holds state for."""
        starts: list[int] = []
        if self.agg is not None and self.agg.panes:
            starts.append(max(self.agg.panes))
        if self.chain is not None and self.chain.panes:
            starts.append(max(self.chain.panes))
        if self.join is not None and self.join.windows:
            starts.append(max(self.join.windows))
        if self.cross is not None and self.cross.windows:
            starts.append(max(self.cross.windows))
        return max(starts) if starts else None

    def _close_ready(self, now_ms: int) -> list[int]:
        closed = []
        target = self.wm.target
        while self.next_close + self.window.length_ms <= target + 1:
            self._close_one(self.next_close, now_ms)
            closed.append(self.next_close)
            self.next_close += self.window.slide_ms
        return closed

    def _close_all_remaining(self, now_ms: int) -> list[int]:
        closed = []
        high = self._state_high_water()
        while high is not None and self.next_close <= high:
            self._close_one(self.next_close, now_ms)
            closed.append(self.next_close)
            self.next_close += self.window.slide_ms
            high = self._state_high_water()
        return closed

    def _close_one(self, ws: int, now_ms: int) -> None:
        urgent = self._placement(ImpactTag.URGENT, ws + 1)
        mem = self.mem
        had_data = False
        last_ingest = 0
        if self.agg is not None:
            had_data = bool(self.agg.pane_range(ws))
            last_ingest = self.agg.last_ingest_ms(ws)
            out = self.agg.close_window(ws, urgent)
            rows = np.array(out.records)
            self.agg.retire_panes(ws + self.window.slide_ms)
            mem.unpin(out.bundle_id)
            if self.chain is not None:
                rows = self._run_chained(ws, rows, urgent)
        elif self.join is not None:
            had_data = ws in self.join.windows
            last_ingest = self.join.last_ingest_ms(ws)
            pieces = []
            for bid in self.join.close_window(ws):
                pieces.append(np.array(mem.bundle(bid).records))
                mem.unpin(bid)
            rows = (np.concatenate(pieces) if pieces
                    else np.empty((0, 5), np.uint64))
        else:
            had_data = ws in self.cross.windows
            last_ingest = self.cross.last_ingest_ms(ws)
            out = self.cross.close_window(ws, urgent)
            rows = np.array(out.records)
            mem.unpin(out.bundle_id)
        self.outputs[ws] = rows
        self.closed_order.append(ws)
        self.closed_end = ws + self.window.length_ms
        if had_data:
            self.egress[ws] = now_ms - last_ingest

    def _run_chained(self, ws: int, rows: np.ndarray,
                     urgent: Placement) -> np.ndarray:
        """Fused emit+extract: stage-one output feeds the second
        aggregation without a round trip through ingestion."""
        chain = self.chain
        if rows.shape[0]:
            stage1 = self.mem.register_bundle(rows, Schema(rows.shape[1],
                                                           rows.shape[1] - 1))
            kpa = prim.extract(self.mem, stage1, self.plan.chained.key_column,
                               urgent)
            chain.process_pane(ws, kpa, urgent, 0)
            self.mem.unpin(stage1.bundle_id)
        out = chain.close_window(ws, urgent)
        result = np.array(out.records)
        chain.retire_panes(ws + self.window.slide_ms)
        self.mem.unpin(out.bundle_id)
        return result

    def close_lookup(self) -> None:
        if self.table is not None:
            self.table.close()


def run(pipeline: Pipeline, feeds: list[SourceFeed], pool_config: PoolConfig,
        run_config: RunConfig = RunConfig(), seed: int = 0) -> RunReport:
    """Drive the pipeline over the feeds until drained; report outputs,
    the metrics time series, and the knob trace."""
    if len(feeds) != pipeline.n_sources:
        raise ConfigError("feed count does not match the pipeline")
    plan = plan_pipeline(pipeline)
    cfg = run_config
    eng = _Run(pipeline, plan, feeds, pool_config, cfg, seed)
    mem = eng.mem
    iters: list[Iterator] = [iter(f.events) for f in feeds]
    acc = [0.0] * len(feeds)
    exhausted = [False] * len(feeds)
    metrics: list[MetricsRow] = []
    knob_trace: list[tuple[int, float, float]] = []
    peak_fast = 0
    paused = False
    prev_ingested = 0
    last_delay = 0
    now = 0
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.max_ticks):
            tasks: list[_Task] = []
            if not paused:
                for s in range(len(feeds)):
                    if exhausted[s]:
                        continue
                    mult = cfg.rate_schedule(now) if cfg.rate_schedule else 1.0
                    acc[s] += feeds[s].records_per_ms * cfg.sample_interval_ms * mult
                    while acc[s] > 0:
                        ev = next(iters[s], _SENTINEL)
                        if ev is _SENTINEL:
                            exhausted[s] = True
                            acc[s] = 0.0
                            break
                        if isinstance(ev, Watermark):
                            eng.wm.advance(ev)
                            continue
                        tasks.append(eng._make_task(s, ev, now))
                        acc[s] -= ev.shape[0]
            eng._run_tasks(tasks, pool)
            closed = eng._close_ready(now)
            done = all(exhausted)
            if done:
                closed += eng._close_all_remaining(now)
            sample = mem.sample()
            delays = [eng.egress[w] for w in closed if w in eng.egress]
            if delays:
                last_delay = max(delays)
            headroom = max(0.0, 1.0 - last_delay / cfg.target_delay_ms)
            knob = mem.update_knob(sample.fast_fraction, sample.slow_fraction,
                                   headroom)
            knob_trace.append((now, knob.k_low, knob.k_high))
            peak_fast = max(peak_fast, sample.fast_used_bytes)
            interval_records = eng.records_ingested - prev_ingested
            metrics.append(MetricsRow(
                time_ms=now,
                records_ingested=eng.records_ingested,
                records_per_s=interval_records * 1000.0 / cfg.sample_interval_ms,
                fast_used_bytes=sample.fast_used_bytes,
                slow_bandwidth_fraction=sample.slow_fraction,
                k_low=knob.k_low,
                k_high=knob.k_high,
                spill_count=sample.spill_count,
                egress_delay_ms=max(delays) if delays else -1,
            ))
            prev_ingested = eng.records_ingested
            if paused:
                if (sample.fast_fraction < cfg.resume_threshold
                        and sample.slow_fraction < cfg.resume_threshold):
                    paused = False
            elif (sample.fast_fraction > cfg.pause_threshold
                  and sample.slow_fraction > cfg.pause_threshold):
                paused = True
            now += cfg.sample_interval_ms
            if done:
                break
        else:
            raise RuntimeError("run did not terminate within the tick budget")
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        eng.close_lookup()
    return RunReport(
        outputs=eng.outputs,
        closed_order=eng.closed_order,
        metrics=metrics,
        knob_trace=knob_trace,
        egress_delay_ms=eng.egress,
        spill_count=mem.allocator.spill_count,
        late_records=mem.monitors.late_records,
        peak_fast_used=peak_fast,
        records_ingested=eng.records_ingested,
        virtual_ms=now,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        knob_updates=mem.knob_updates,
        mem=mem,
    )
