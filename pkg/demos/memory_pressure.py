"""Forced spills under an undersized fast pool, with the output unchanged.

The fast pool here (256 KiB) cannot hold even one window's pointer
arrays, so allocations overflow to the slow pool and are counted as
forced spills. Spilling degrades locality, never correctness: the run
is compared against the independent reference evaluator.
"""
import numpy as np

import kpstream.oracle as refeval
from kpstream.bench import (DEFAULTS, build_setup, make_events, make_feeds,
                            pool_config, run_config, source_rows)
from kpstream.runtime import run


def main() -> None:
    cfg = dict(DEFAULTS)
    cfg.update(pipeline="sum_per_key", seed=3, records_per_window=20_000,
               windows=5, window_ms=1000, bundle_size=512,
               key_cardinality=256, disorder_ms=200,
               fast_capacity_mb=0.25)
    setup = build_setup(cfg)
    events = make_events(setup)

    report = run(setup.pipeline, make_feeds(setup, events),
                 pool_config(cfg), run_config(cfg), seed=cfg["seed"])
    want = refeval.evaluate(setup.pipeline, [source_rows(e) for e in events])

    cap = pool_config(cfg).fast_capacity_bytes
    peak = report.peak_fast_used
    print(f"fast capacity {cap} bytes, one window's pairs need "
          f"{cfg['records_per_window'] * 16} bytes")
    print(f"forced spills: {report.spill_count}")
    print(f"peak fast usage {peak} bytes "
          f"({100.0 * peak / cap:.0f}% of capacity, never over)")
    print("output matches reference evaluator:",
          report.output_multisets() == want)


if __name__ == "__main__":
    main()
