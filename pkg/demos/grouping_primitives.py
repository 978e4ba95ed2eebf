"""Hand-driven tour of the pointer-array grouping primitives.

Shows the core mechanic: grouping runs entirely on compact (key, ref)
pairs in the fast pool, records stay put, and nothing dereferences a
record until values are actually needed.
"""
import numpy as np

from kpstream.hybridmem import HybridMemory, PoolConfig
from kpstream.model import Aggregate, AggregateKind, Schema
import kpstream.primitives as prim


def main() -> None:
    mem = HybridMemory(PoolConfig(fast_capacity_bytes=4 << 20,
                                  slow_bandwidth_bytes_per_interval=16 << 20))
    rows_a = np.array([[3, 30, 0], [1, 10, 1], [3, 31, 2], [2, 20, 3]],
                      np.uint64)
    rows_b = np.array([[2, 200, 4], [3, 300, 5], [5, 500, 6]], np.uint64)
    a = mem.register_bundle(rows_a, Schema(3, 2))
    b = mem.register_bundle(rows_b, Schema(3, 2))

    ka = prim.extract(mem, a, 0)  # (key, ref) pairs, record order
    kb = prim.extract(mem, b, 0)
    print("extracted:", list(zip(ka.keys, ka.refs)))

    prim.sort(mem, ka)
    prim.sort(mem, kb)
    print("sorted keys:", ka.keys.tolist(), kb.keys.tolist())

    merged = prim.merge(mem, ka, kb)
    print("merged keys:", merged.keys.tolist())
    print("merged links (source bundles kept alive):", sorted(merged.links))

    keys, lrefs, rrefs = prim.join(mem, ka, kb)
    print("join keys:", keys.tolist(), "->", len(keys), "pairs")

    print("dereferences so far:", mem.monitors.deref_count, "(grouping is free)")

    out = prim.reduce_out_of_kpa(mem, merged, 1,
                                 Aggregate(AggregateKind.SUM))
    print("per-key sums:", [tuple(r) for r in out.records.tolist()])
    print("dereferences after value reduction:", mem.monitors.deref_count)

    for kpa in (merged, kb, ka):
        prim.destroy(mem, kpa)
    mem.unpin(out.bundle_id)
    mem.unpin(a.bundle_id)
    mem.unpin(b.bundle_id)
    mem.audit()
    print("all arrays destroyed, accounting balanced, live bundles:",
          mem.live_bundles())


if __name__ == "__main__":
    main()
