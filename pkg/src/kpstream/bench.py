"""Benchmark command line: run, verify, microbench, knobtrace.

Exit codes: 0 ok, 1 config error, 2 runtime abort, 3 verification
mismatch. All workload knobs are flags; --config points at a JSON file
mirroring them (flags given explicitly win).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import oracle as refeval
from . import primitives as prim
from . import runtime
from .hybridmem import HybridMemory, PoolConfig
from .ingest import (
    SourceConfig,
    YSB_SCHEMA,
    YsbConfig,
    generate,
    generate_ysb,
    hold_watermarks,
)
from .model import (
    Aggregate,
    AggregateKind,
    ConfigError,
    PlanError,
    Schema,
    Watermark,
    WindowSpec,
)
from .operators import (
    CmpOp,
    CrossFilter,
    ExternalJoin,
    Filter,
    KeyedAggregation,
    Pipeline,
    TemporalJoin,
    Window,
)
from .primitives import Placement
from .runtime import MetricsRow, RunConfig, RunReport, SourceFeed

PIPELINES = (
    "ysb", "topk_per_key", "sum_per_key", "median_per_key", "avg_per_key",
    "avg_all", "distinct_per_key", "temporal_join", "windowed_filter",
)

# joins multiply matching pairs, so their sources default to a wider key
# space to keep per-window output near the input size
_WIDE_KEY_PIPELINES = {"temporal_join", "windowed_filter"}

DEFAULTS: dict = {
    "pipeline": "sum_per_key",
    "seed": 1,
    "workers": 1,
    "records_per_window": 100_000,
    "windows": 20,
    "window_ms": 1000,
    "bundle_size": 4096,
    "disorder_ms": 0,
    "key_cardinality": 1024,
    "fast_capacity_mb": 64.0,
    "fast_reserved_frac": 0.1,
    "slow_bandwidth_mbps": 4096.0,
    "sample_interval_ms": 10,
    "delta": 0.05,
    "deadband": 0.10,
    "target_delay_ms": 1000,
    "metrics": None,
}


class VerifyMismatch(RuntimeError):
    """Engine and reference evaluator disagree."""


@dataclass(frozen=True)
class BenchSetup:
    pipeline: Pipeline
    sources: tuple[SourceConfig, ...]
    ysb: YsbConfig | None


def _source(cfg: dict, schema: Schema, seed: int) -> SourceConfig:
    return SourceConfig(
        seed=seed,
        schema=schema,
        records_per_window=cfg["records_per_window"],
        window_length_ms=cfg["window_ms"],
        num_windows=cfg["windows"],
        bundle_size=min(cfg["bundle_size"], cfg["records_per_window"]),
        disorder_bound_ms=cfg["disorder_ms"],
        key_cardinality=cfg["key_cardinality"],
    )


def build_setup(cfg: dict) -> BenchSetup:
    """Pipeline spec plus matching source configs for one benchmark name."""
    name = cfg["pipeline"]
    if name not in PIPELINES:
        raise ConfigError(f"unknown pipeline {name!r}; choose from {PIPELINES}")
    wspec = WindowSpec.fixed(cfg["window_ms"])
    cfg = dict(cfg)
    if name in _WIDE_KEY_PIPELINES and "key_cardinality" not in cfg.get("_explicit", ()):
        cfg["key_cardinality"] = max(cfg["key_cardinality"],
                                     4 * cfg["records_per_window"])
    three = Schema(3, 2)
    seed = cfg["seed"]
    if name == "ysb":
        ysb = YsbConfig(num_campaigns=max(1, cfg["key_cardinality"] // 10),
                        ads_per_campaign=10, ad_type_pass_fraction=0.5)
        keys, vals = ysb.table()
        pipe = Pipeline(name, (YSB_SCHEMA,), (
            Filter(1, CmpOp.EQ, 0),
            ExternalJoin(0, keys, vals),
            Window(wspec),
            KeyedAggregation(0, None, Aggregate(AggregateKind.COUNT)),
        ))
        return BenchSetup(pipe, (_source(cfg, YSB_SCHEMA, seed),), ysb)
    if name == "temporal_join":
        pipe = Pipeline(name, (three, three),
                        (Window(wspec), TemporalJoin(0)))
        return BenchSetup(pipe, (_source(cfg, three, seed),
                                 _source(cfg, three, seed + 1000003)), None)
    if name == "windowed_filter":
        four = Schema(4, 3)
        pipe = Pipeline(name, (three, four),
                        (Window(wspec), CrossFilter(avg_column=1, filter_column=1)))
        return BenchSetup(pipe, (_source(cfg, three, seed),
                                 _source(cfg, four, seed + 1000003)), None)
    aggs = {
        "topk_per_key": KeyedAggregation(0, 1, Aggregate(AggregateKind.TOPK, k=3)),
        "sum_per_key": KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM)),
        "median_per_key": KeyedAggregation(0, 1, Aggregate(AggregateKind.MEDIAN)),
        "avg_per_key": KeyedAggregation(0, 1, Aggregate(AggregateKind.AVG)),
        "avg_all": KeyedAggregation(None, 1, Aggregate(AggregateKind.AVG)),
        "distinct_per_key": KeyedAggregation(0, 1,
                                             Aggregate(AggregateKind.DISTINCT_COUNT)),
    }
    pipe = Pipeline(name, (three,), (Window(wspec), aggs[name]))
    return BenchSetup(pipe, (_source(cfg, three, seed),), None)


def make_events(setup: BenchSetup) -> list[list]:
    """Materialized event streams, one list per source."""
    out = []
    for i, src in enumerate(setup.sources):
        gen = (generate_ysb(src, setup.ysb, i) if setup.ysb is not None
               else generate(src, i))
        out.append(list(gen))
    return out


def make_feeds(setup: BenchSetup, events: list[list]) -> list[SourceFeed]:
    feeds = []
    for src, evs in zip(setup.sources, events):
        rate = src.records_per_window / src.window_length_ms
        if src.rate_limit is not None:
            rate = min(rate, src.rate_limit / 1000.0)
        feeds.append(SourceFeed(evs, rate))
    return feeds


def pool_config(cfg: dict) -> PoolConfig:
    return PoolConfig(
        fast_capacity_bytes=int(cfg["fast_capacity_mb"] * (1 << 20)),
        fast_reserved_fraction=cfg["fast_reserved_frac"],
        slow_bandwidth_bytes_per_interval=int(
            cfg["slow_bandwidth_mbps"] * (1 << 20)
            * cfg["sample_interval_ms"] / 1000.0),
        delta=cfg["delta"],
        deadband=cfg["deadband"],
    )


def run_config(cfg: dict, rate_schedule=None) -> RunConfig:
    return RunConfig(
        workers=cfg["workers"],
        target_delay_ms=cfg["target_delay_ms"],
        sample_interval_ms=cfg["sample_interval_ms"],
        rate_schedule=rate_schedule,
    )


def write_metrics(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.FIELDS)
        for r in rows:
            w.writerow([getattr(r, f) for f in MetricsRow.FIELDS])


def print_summary(report: RunReport) -> None:
    for key, val in report.summary().items():
        print(f"{key}: {val}")


def execute(cfg: dict, events: list[list] | None = None,
            rate_schedule=None) -> tuple[BenchSetup, RunReport, list[list]]:
    setup = build_setup(cfg)
    if events is None:
        events = make_events(setup)
    report = runtime.run(setup.pipeline, make_feeds(setup, events),
                         pool_config(cfg), run_config(cfg, rate_schedule),
                         seed=cfg["seed"])
    return setup, report, events


def cmd_run(cfg: dict) -> int:
    _, report, _ = execute(cfg)
    if cfg["metrics"]:
        write_metrics(cfg["metrics"], report.metrics)
    print_summary(report)
    return 0


def source_rows(events: list) -> np.ndarray:
    chunks = [e for e in events if not isinstance(e, Watermark)]
    if not chunks:
        return np.empty((0, 2), np.uint64)
    return np.concatenate(chunks)


def verify_events(setup: BenchSetup, events: list[list], cfg: dict) -> RunReport:
    """Run engine and reference evaluator on identical streams; raise
    VerifyMismatch with a first-divergence diagnostic on any difference."""
    report = runtime.run(setup.pipeline, make_feeds(setup, events),
                         pool_config(cfg), run_config(cfg), seed=cfg["seed"])
    got = report.output_multisets()
    want = refeval.evaluate(setup.pipeline, [source_rows(e) for e in events])
    if got != want:
        for w in sorted(set(got) | set(want)):
            g, x = got.get(w, []), want.get(w, [])
            if g != x:
                only_g = next(iter(set(g) - set(x)), None)
                only_x = next(iter(set(x) - set(g)), None)
                raise VerifyMismatch(
                    f"window {w}: engine rows {len(g)} vs reference {len(x)}; "
                    f"engine-only sample {only_g}, reference-only sample {only_x}")
        raise VerifyMismatch("per-window outputs differ")
    return report


def cmd_verify(cfg: dict) -> int:
    setup = build_setup(cfg)
    events = make_events(setup)
    report = verify_events(setup, events, cfg)
    print(f"verify {cfg['pipeline']}: OK "
          f"({len(report.closed_order)} windows, "
          f"{report.records_ingested} records, seed {cfg['seed']})")
    return 0


# -- microbenchmarks -----------------------------------------------------


def _micro_mem() -> HybridMemory:
    return HybridMemory(PoolConfig(fast_capacity_bytes=1 << 30,
                                   slow_bandwidth_bytes_per_interval=1 << 40))


def _micro_input(mem: HybridMemory, size: int, seed: int):
    rng = np.random.default_rng(seed)
    rows = np.column_stack((
        rng.integers(0, max(1, size // 8), size, dtype=np.uint64),
        rng.integers(0, 1 << 32, size, dtype=np.uint64),
        np.arange(size, dtype=np.uint64),
    ))
    return mem.register_bundle(rows, Schema(3, 2))


def microbench(kind: str, size: int, workers: int, seed: int = 1) -> dict:
    """One timed primitive invocation; returns the throughput report row."""
    mem = _micro_mem()
    bundle = _micro_input(mem, size, seed)
    place = Placement()
    if kind == "sort":
        kpa = prim.extract(mem, bundle, 0, place)
        t0 = time.perf_counter()
        prim.sort(mem, kpa, workers=workers)
        elapsed = time.perf_counter() - t0
        prim.destroy(mem, kpa)
    elif kind == "merge":
        half = size // 2
        mask = np.zeros(size, bool)
        mask[:half] = True
        left = prim.extract_masked(mem, bundle, 0, mask, place)
        right = prim.extract_masked(mem, bundle, 0, ~mask, place)
        prim.sort(mem, left)
        prim.sort(mem, right)
        t0 = time.perf_counter()
        merged = prim.merge(mem, left, right, place)
        elapsed = time.perf_counter() - t0
        for k in (merged, left, right):
            prim.destroy(mem, k)
    elif kind == "keyswap":
        kpa = prim.extract(mem, bundle, 0, place)
        t0 = time.perf_counter()
        prim.key_swap(mem, kpa, 1)
        elapsed = time.perf_counter() - t0
        prim.destroy(mem, kpa)
    elif kind == "hash_groupby":
        t0 = time.perf_counter()
        out, _, resizes = prim.hash_group_by(
            mem, [bundle], 0, 1, Aggregate(AggregateKind.SUM))
        elapsed = time.perf_counter() - t0
        mem.unpin(out.bundle_id)
    else:
        raise ConfigError(f"unknown microbench kind {kind!r}")
    mem.unpin(bundle.bundle_id)
    return {
        "kind": kind,
        "size": size,
        "workers": workers,
        "seconds": elapsed,
        "records_per_s": size / elapsed if elapsed > 0 else float("inf"),
        "fast_bytes": mem.monitors.fast_total,
        "slow_bytes": mem.monitors.slow_total,
    }


def cmd_microbench(kind: str, size: int, workers_list: list[int], seed: int) -> int:
    if size == 0:
        print("empty input; nothing to measure")
        return 0
    if size < 0:
        raise ConfigError("size must be >= 0")
    rows = [microbench(kind, size, w, seed) for w in workers_list]
    for r in rows:
        print(f"{r['kind']} size={r['size']} workers={r['workers']}: "
              f"{r['records_per_s']:.0f} records/s "
              f"({r['seconds'] * 1e3:.1f} ms, fast {r['fast_bytes']} B, "
              f"slow {r['slow_bytes']} B)")
    if len(rows) > 1:
        base = rows[0]["records_per_s"]
        for r in rows[1:]:
            print(f"speedup x{r['records_per_s'] / base:.2f} "
                  f"({rows[0]['workers']} -> {r['workers']} workers)")
    return 0


# -- controller scenarios ------------------------------------------------


def scenario_rising_ingest(seed: int = 1, workers: int = 1):
    """Offered load rising 8x then 32x against a fixed-throughput engine.

    Three segments of constant window length carry sharply increasing
    record counts per window. Open-window state scales with records per
    window, so the middle segment saturates the fast pool and forces the
    knob to walk placements toward the slow pool.
    """
    cfg = dict(DEFAULTS)
    cfg.update(pipeline="sum_per_key", seed=seed, workers=workers,
               records_per_window=96_000, windows=9, window_ms=1000,
               bundle_size=512, key_cardinality=256,
               fast_capacity_mb=24.0, slow_bandwidth_mbps=1000.0)
    setup = build_setup(cfg)
    three = Schema(3, 2)
    events: list = []
    for k, rpw in enumerate((8_000, 96_000, 256_000)):
        src = SourceConfig(seed=seed + 101 * k, schema=three,
                           records_per_window=rpw,
                           window_length_ms=cfg["window_ms"], num_windows=3,
                           bundle_size=cfg["bundle_size"],
                           disorder_bound_ms=0,
                           key_cardinality=cfg["key_cardinality"])
        offset = 3 * k * cfg["window_ms"]
        for ev in generate(src, 0):
            if isinstance(ev, Watermark):
                events.append(Watermark(ev.source, ev.timestamp + offset))
            else:
                ev[:, three.timestamp_column] += np.uint64(offset)
                events.append(ev)
    feeds = [SourceFeed(events, 256.0)]
    # horizon 0: only the closing window is priority work, so everything
    # in flight is low-impact and rides the low knob
    rc = RunConfig(workers=workers, target_delay_ms=cfg["target_delay_ms"],
                   sample_interval_ms=cfg["sample_interval_ms"],
                   high_horizon_windows=0)
    report = runtime.run(setup.pipeline, feeds, pool_config(cfg), rc,
                         seed=seed)
    return report, pool_config(cfg), cfg


def rising_ingest_shape(report: RunReport, pool: PoolConfig) -> dict:
    """Shape facts for the rising-ingest trace.

    The span under test is the first unbroken run of samples where fast
    demand exceeds slow demand by more than the dead-band and the low
    knob completes its walk to 0 inside the run, trimmed at the first
    zero. Over that span the low knob must never rise, and slow-pool
    traffic must climb: mean traffic fraction strictly increasing across
    the span's thirds.
    """
    rows = report.metrics
    cap = pool.fast_capacity_bytes
    fast = np.array([r.fast_used_bytes / cap for r in rows])
    slow = np.array([r.slow_bandwidth_fraction for r in rows])
    klow = np.array([r.k_low for r in rows])
    pressure = (fast - slow) > pool.deadband
    span = None
    i = 0
    while i < len(rows):
        if not pressure[i]:
            i += 1
            continue
        j = i
        while j < len(rows) and pressure[j]:
            j += 1
        zeros = np.flatnonzero(klow[i:j] == 0.0)
        if zeros.size:
            span = (i, i + int(zeros[0]) + 1)
            break
        i = j
    if span is None:
        return {"span": None, "k_low_monotone": False, "slow_rising": False}
    a, b = span
    seg_k = klow[a:b]
    thirds = [float(part.mean()) for part in np.array_split(slow[a:b], 3)]
    return {
        "span": (rows[a].time_ms, rows[b - 1].time_ms),
        "span_samples": b - a,
        "k_low_start": float(seg_k[0]),
        "k_low_monotone": bool(np.all(np.diff(seg_k) <= 0)),
        "slow_thirds": thirds,
        "slow_rising": thirds[0] < thirds[1] < thirds[2],
    }


def scenario_delayed_watermarks(seed: int = 1, workers: int = 1):
    """Watermark outage over three mid-stream windows: open-window state
    piles up in the fast pool, then the release burst drains it."""
    cfg = dict(DEFAULTS)
    cfg.update(pipeline="sum_per_key", seed=seed, workers=workers,
               records_per_window=20_000, windows=10, window_ms=1000,
               bundle_size=512, key_cardinality=256,
               fast_capacity_mb=128.0, slow_bandwidth_mbps=1024.0)
    hold = (2 * cfg["window_ms"], 5 * cfg["window_ms"])
    setup = build_setup(cfg)
    events = [list(hold_watermarks(iter(evs), *hold))
              for evs in make_events(setup)]
    report = runtime.run(setup.pipeline, make_feeds(setup, events),
                         pool_config(cfg), run_config(cfg), seed=seed)
    return report, pool_config(cfg), cfg, hold


def delayed_watermarks_shape(report: RunReport, cfg: dict,
                             hold: tuple[int, int]) -> dict:
    """Shape facts for the watermark-outage trace: fast usage must peak
    inside the outage (well above the pre-outage level) and fall back
    below half the peak within two windows of the release."""
    rows = report.metrics
    window_ms = cfg["window_ms"]
    t = np.array([r.time_ms for r in rows])
    used = np.array([r.fast_used_bytes for r in rows], dtype=np.int64)
    peak_i = int(np.argmax(used))
    peak = int(used[peak_i])
    pre = used[t < hold[0]]
    baseline = int(pre.max()) if pre.size else 0
    deadline = hold[1] + 2 * window_ms
    after = (t > t[peak_i]) & (t <= deadline)
    recovered = bool(np.any(used[after] <= peak * 0.5)) if after.any() else False
    return {
        "peak_bytes": peak,
        "peak_time_ms": int(t[peak_i]),
        "pre_hold_max_bytes": baseline,
        "peak_in_hold": bool(hold[0] <= t[peak_i] <= deadline),
        "piled_up": peak > 1.5 * baseline,
        "recovered": recovered,
        "late_records": report.late_records,
    }


def cmd_knobtrace(scenario: str, metrics_path: str | None, seed: int) -> int:
    if scenario == "rising_ingest":
        report, pool, _ = scenario_rising_ingest(seed)
        shape = rising_ingest_shape(report, pool)
        checks = {k: shape[k] for k in ("k_low_monotone", "slow_rising")}
    elif scenario == "delayed_watermarks":
        report, pool, cfg, hold = scenario_delayed_watermarks(seed)
        shape = delayed_watermarks_shape(report, cfg, hold)
        checks = {k: shape[k] for k in ("peak_in_hold", "piled_up", "recovered")}
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    if metrics_path:
        write_metrics(metrics_path, report.metrics)
    print(f"scenario {scenario}: {len(report.metrics)} samples, "
          f"fast capacity {pool.fast_capacity_bytes} B")
    final = report.knob_trace[-1]
    print(f"knob end state: k_low={final[1]:g} k_high={final[2]:g} "
          f"({report.knob_updates} updates)")
    for key, val in shape.items():
        print(f"shape {key}: {val}")
    print_summary(report)
    if not all(checks.values()):
        failed = [k for k, v in checks.items() if not v]
        print(f"shape checks failed: {failed}", file=sys.stderr)
        return 3
    return 0


# -- argument handling ---------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); config errors are 1
        raise ConfigError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="kpstream-bench",
                description="stream engine benchmarks and verification")
    sub = p.add_subparsers(dest="command", required=True)

    def workload_flags(sp):
        sp.add_argument("--pipeline", choices=PIPELINES)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--records-per-window", type=int, dest="records_per_window")
        sp.add_argument("--windows", type=int)
        sp.add_argument("--window-ms", type=int, dest="window_ms")
        sp.add_argument("--bundle-size", type=int, dest="bundle_size")
        sp.add_argument("--disorder-ms", type=int, dest="disorder_ms")
        sp.add_argument("--key-cardinality", type=int, dest="key_cardinality")
        sp.add_argument("--fast-capacity-mb", type=float, dest="fast_capacity_mb")
        sp.add_argument("--fast-reserved-frac", type=float,
                        dest="fast_reserved_frac")
        sp.add_argument("--slow-bandwidth-mbps", type=float,
                        dest="slow_bandwidth_mbps")
        sp.add_argument("--sample-interval-ms", type=int,
                        dest="sample_interval_ms")
        sp.add_argument("--delta", type=float)
        sp.add_argument("--deadband", type=float)
        sp.add_argument("--target-delay-ms", type=int, dest="target_delay_ms")
        sp.add_argument("--metrics", type=str)
        sp.add_argument("--config", type=str)

    workload_flags(sub.add_parser("run", help="execute one pipeline"))
    workload_flags(sub.add_parser("verify",
                                  help="compare against the reference evaluator"))
    mb = sub.add_parser("microbench", help="time one primitive")
    mb.add_argument("--kind", required=True,
                    choices=("sort", "merge", "hash_groupby", "keyswap"))
    mb.add_argument("--size", type=int, required=True)
    mb.add_argument("--workers", type=str, default="1",
                    help="comma-separated worker counts")
    mb.add_argument("--seed", type=int, default=1)
    kt = sub.add_parser("knobtrace", help="controller behavior scenarios")
    kt.add_argument("--scenario", required=True,
                    choices=("rising_ingest", "delayed_watermarks"))
    kt.add_argument("--metrics", type=str)
    kt.add_argument("--seed", type=int, default=1)
    return p


def merge_config(args: argparse.Namespace) -> dict:
    """DEFAULTS, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    explicit = {k: v for k, v in vars(args).items()
                if k in DEFAULTS and v is not None}
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(explicit)
    cfg["_explicit"] = tuple(explicit)
    return cfg


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and friends
        return 0 if exc.code in (0, None) else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "run":
            return cmd_run(merge_config(args))
        if args.command == "verify":
            return cmd_verify(merge_config(args))
        if args.command == "microbench":
            workers = [int(w) for w in args.workers.split(",") if w]
            return cmd_microbench(args.kind, args.size, workers or [1], args.seed)
        return cmd_knobtrace(args.scenario, args.metrics, args.seed)
    except (ConfigError, PlanError, refeval.OracleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except VerifyMismatch as exc:
        print(f"verification mismatch: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 -- runtime abort path
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
