"""Key pointer arrays and the grouping primitives over them.

A KPA is a pair of parallel uint64 arrays: the resident key column and
a packed record ref per pair. Grouping work (extract, sort, merge, join,
partition, selection, in-array reduction) touches only these arrays and
moves strictly sequentially; records are dereferenced only by key_swap,
the out-of-array reductions and materialize, all of which go through the
memory facade's gather chokepoint so the discipline is measurable.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .hybridmem import HybridMemory, KPA_PAIR_BYTES
from .model import (
    Aggregate,
    AggregateKind,
    Bundle,
    ConfigError,
    ImpactTag,
    MASK64,
    PoolKind,
    Schema,
    pack_refs,
)


class Placement:
    """Where new arrays want to live: an impact tag plus a knob draw."""

    def __init__(self, tag: ImpactTag = ImpactTag.LOW, rng: np.random.Generator | None = None):
        self.tag = tag
        self.rng = rng

    def draw(self) -> float:
        if self.rng is None:
            return 0.0
        return float(self.rng.random())


_DEFAULT = Placement()


class KPA:
    """Resident keys + record refs, the only structure grouping touches."""

    __slots__ = ("keys", "refs", "resident_col", "links", "pool", "handle",
                 "sorted", "dirty", "destroyed")

    def __init__(self, keys, refs, resident_col, links, pool, handle,
                 sorted_=False, dirty=False):
        self.keys = keys
        self.refs = refs
        self.resident_col = resident_col
        self.links = set(links)
        self.pool = pool
        self.handle = handle
        self.sorted = sorted_
        self.dirty = dirty
        self.destroyed = False

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def payload_bytes(self) -> int:
        return len(self) * KPA_PAIR_BYTES

    def _require_live(self) -> None:
        if self.destroyed:
            raise ConfigError("operation on destroyed key pointer array")


def destroy(mem: HybridMemory, kpa: KPA) -> None:
    """Drop the array: one release per source bundle, slabs freed."""
    if kpa.destroyed:
        return
    kpa.destroyed = True
    for bid in sorted(kpa.links):
        mem.release(bid)
    mem.allocator.free(kpa.handle)


def _new_kpa(mem: HybridMemory, keys, refs, resident_col, links,
             placement: Placement, sorted_=False, dirty=False) -> KPA:
    handle = mem.allocate_kpa(keys.shape[0], placement.tag, placement.draw())
    for bid in sorted(links):
        mem.retain(bid)
    kpa = KPA(keys, refs, resident_col, links, handle.pool, handle,
              sorted_=sorted_, dirty=dirty)
    mem.monitors.record_traffic(handle.pool, keys.shape[0] * KPA_PAIR_BYTES)
    return kpa


# -- extraction ----------------------------------------------------------


def extract(mem: HybridMemory, bundle: Bundle, key_column: int,
            placement: Placement = _DEFAULT) -> KPA:
    """Scan a sealed bundle once and pull (key, ref) pairs out of it.

    Sequential column read, zero dereferences; the new array holds one
    link on the source bundle.
    """
    if not 0 <= key_column < bundle.schema.column_count:
        raise ConfigError(f"key column {key_column} out of range")
    n = len(bundle)
    keys = mem.read_column(bundle.bundle_id, key_column).copy()
    refs = pack_refs(bundle.bundle_id, np.arange(n, dtype=np.uint64))
    mem.monitors.record_traffic(PoolKind.SLOW, n * 8)
    return _new_kpa(mem, keys, refs, key_column, {bundle.bundle_id}, placement)


def extract_masked(mem: HybridMemory, bundle: Bundle, key_column: int,
                   mask: np.ndarray, placement: Placement = _DEFAULT) -> KPA:
    """Fused filter + extract: only rows passing the mask get pairs."""
    if mask.shape[0] != len(bundle):
        raise ConfigError("mask length does not match bundle")
    keys = mem.read_column(bundle.bundle_id, key_column)[mask].copy()
    ords = np.flatnonzero(mask).astype(np.uint64)
    refs = pack_refs(bundle.bundle_id, ords)
    mem.monitors.record_traffic(PoolKind.SLOW, len(bundle) * 8)
    return _new_kpa(mem, keys, refs, key_column, {bundle.bundle_id}, placement)


# -- key swap ------------------------------------------------------------


def key_swap(mem: HybridMemory, kpa: KPA, new_column: int,
             write_back_dirty: bool = True) -> KPA:
    """Replace the resident key column in place.

    Dirty resident keys are first written home through their refs (the
    in-place external-join repurposing pattern); then the new column is
    gathered. Both halves are random access and count as dereferences.
    """
    kpa._require_live()
    if kpa.dirty and write_back_dirty:
        mem.write_shadow(kpa.refs, kpa.resident_col, kpa.keys)
    n = len(kpa)
    if n:
        kpa.keys[:] = mem.gather(kpa.refs, new_column)
    mem.monitors.record_traffic(kpa.pool, n * 8)
    kpa.resident_col = new_column
    kpa.sorted = False
    kpa.dirty = False
    return kpa


# -- sort ----------------------------------------------------------------


def _chunk_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    step = -(-n // parts)
    return [(s, min(s + step, n)) for s in range(0, n, step)]


def _merge_jobs(keys, lo, mid, hi, parts):
    """Split one stable run merge into independent slices.

    Split keys come from the longer side's quantiles; each slice takes
    all elements <= its split key from both runs, so concatenation is
    sorted and ties still resolve left run first.
    """
    if parts <= 1 or hi - lo < 4 * kernels.BLOCK:
        return [(lo, mid, mid, hi, lo)]
    left_longer = (mid - lo) >= (hi - mid)
    base, blen = (lo, mid - lo) if left_longer else (mid, hi - mid)
    splits = np.unique(keys[[base + (q * blen) // parts for q in range(1, parts)]])
    li = lo + np.searchsorted(keys[lo:mid], splits, side="right")
    ri = mid + np.searchsorted(keys[mid:hi], splits, side="right")
    lcuts = np.concatenate(([lo], li, [mid]))
    rcuts = np.concatenate(([mid], ri, [hi]))
    jobs = []
    for a in range(len(lcuts) - 1):
        l0, l1 = int(lcuts[a]), int(lcuts[a + 1])
        r0, r1 = int(rcuts[a]), int(rcuts[a + 1])
        if l1 > l0 or r1 > r0:
            jobs.append((l0, l1, r0, r1, lo + (l0 - lo) + (r0 - mid)))
    return jobs


def sort(mem: HybridMemory, kpa: KPA, workers: int = 1) -> KPA:
    """Stable in-place sort by resident key.

    Chunks are sorted independently (64-element insertion-sorted blocks,
    then doubling block merges) and merged pairwise; once runs are no
    wider than the worker count, each merge is itself sliced at key
    boundaries so every thread stays busy. Equal keys keep arrival
    order for any worker count.
    """
    kpa._require_live()
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    n = len(kpa)
    if kpa.sorted:
        return kpa
    if n > 1:
        keys, refs = kpa.keys, kpa.refs
        if workers == 1 or n < 8 * kernels.BLOCK:
            kernels.chunk_sort(keys, refs, np.empty_like(keys), np.empty_like(refs))
        else:
            bounds = _chunk_bounds(n, workers)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futs = [
                    pool.submit(kernels.chunk_sort, keys[a:b], refs[a:b],
                                np.empty(b - a, np.uint64), np.empty(b - a, np.uint64))
                    for a, b in bounds
                ]
                for f in futs:
                    f.result()
                buf_k = np.empty_like(keys)
                buf_r = np.empty_like(refs)
                runs = bounds
                src_k, src_r, dst_k, dst_r = keys, refs, buf_k, buf_r
                while len(runs) > 1:
                    nxt = []
                    futs = []
                    pairs = len(runs) // 2
                    per_pair = max(1, workers // max(1, pairs))
                    for p in range(pairs):
                        lo, mid = runs[2 * p]
                        _, hi = runs[2 * p + 1]
                        nxt.append((lo, hi))
                        for l0, l1, r0, r1, o in _merge_jobs(src_k, lo, mid, hi, per_pair):
                            futs.append(pool.submit(
                                kernels.merge_into,
                                src_k[l0:l1], src_r[l0:l1],
                                src_k[r0:r1], src_r[r0:r1],
                                dst_k[o:o + (l1 - l0) + (r1 - r0)],
                                dst_r[o:o + (l1 - l0) + (r1 - r0)]))
                    if len(runs) % 2:
                        lo, hi = runs[-1]
                        dst_k[lo:hi] = src_k[lo:hi]
                        dst_r[lo:hi] = src_r[lo:hi]
                        nxt.append((lo, hi))
                    for f in futs:
                        f.result()
                    src_k, dst_k = dst_k, src_k
                    src_r, dst_r = dst_r, src_r
                    runs = nxt
                if src_k is not keys:
                    kpa.keys = src_k
                    kpa.refs = src_r
    rounds = 1 if n <= kernels.BLOCK else 1 + int(np.ceil(np.log2(n / kernels.BLOCK)))
    mem.monitors.record_traffic(kpa.pool, 2 * n * KPA_PAIR_BYTES * rounds)
    kpa.sorted = True
    return kpa


# -- merge ---------------------------------------------------------------


def merge(mem: HybridMemory, left: KPA, right: KPA,
          placement: Placement = _DEFAULT) -> KPA:
    """Merge two sorted arrays into a new one (ties: left first).

    The output inherits every source link from both inputs; the inputs
    stay live until their owner destroys them.
    """
    left._require_live()
    right._require_live()
    if not (left.sorted and right.sorted):
        raise ConfigError("merge needs both inputs sorted")
    if left.resident_col != right.resident_col:
        raise ConfigError("merge needs matching resident columns")
    n = len(left) + len(right)
    ok = np.empty(n, np.uint64)
    orf = np.empty(n, np.uint64)
    kernels.merge_into(left.keys, left.refs, right.keys, right.refs, ok, orf)
    mem.monitors.record_traffic(left.pool, len(left) * KPA_PAIR_BYTES)
    mem.monitors.record_traffic(right.pool, len(right) * KPA_PAIR_BYTES)
    out = _new_kpa(mem, ok, orf, left.resident_col, left.links | right.links,
                   placement, sorted_=True, dirty=left.dirty or right.dirty)
    return out


# -- join ----------------------------------------------------------------


def _grouped_arange(counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64)
    starts = np.cumsum(counts) - counts
    return np.arange(total, dtype=np.int64) - np.repeat(starts, counts)


def join(mem: HybridMemory, left: KPA, right: KPA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort-merge inner join on resident keys.

    Returns (keys, left refs, right refs) with the full per-key cross
    product, key-ascending. Pure sequential scan of both arrays; the
    caller dereferences whichever payload columns it wants.
    """
    left._require_live()
    right._require_live()
    if not (left.sorted and right.sorted):
        raise ConfigError("join needs both inputs sorted")
    lu, l_start, l_count = np.unique(left.keys, return_index=True, return_counts=True)
    ru, r_start, r_count = np.unique(right.keys, return_index=True, return_counts=True)
    common, ia, ib = np.intersect1d(lu, ru, assume_unique=True, return_indices=True)
    lc = l_count[ia].astype(np.int64)
    rc = r_count[ib].astype(np.int64)
    pairs = lc * rc
    q = _grouped_arange(pairs)
    rc_rep = np.repeat(rc, pairs)
    a = q // rc_rep
    b = q % rc_rep
    l_idx = np.repeat(l_start[ia].astype(np.int64), pairs) + a
    r_idx = np.repeat(r_start[ib].astype(np.int64), pairs) + b
    mem.monitors.record_traffic(left.pool, len(left) * 8)
    mem.monitors.record_traffic(right.pool, len(right) * 8)
    return common.repeat(pairs), left.refs[l_idx], right.refs[r_idx]


# -- partition -----------------------------------------------------------


def partition(mem: HybridMemory, kpa: KPA, width: int,
              placement: Placement = _DEFAULT) -> list[tuple[int, KPA]]:
    """Stable split into buckets of floor(key / width).

    Returns (bucket_start, array) ascending by bucket; every output
    inherits all input links. Input order is preserved inside each
    bucket, and a sorted input yields sorted buckets.
    """
    kpa._require_live()
    if width <= 0:
        raise ConfigError("partition width must be positive")
    buckets = kpa.keys // np.uint64(width)
    order = np.argsort(buckets, kind="stable")
    sorted_buckets = buckets[order]
    starts = np.flatnonzero(np.concatenate((
        [True], sorted_buckets[1:] != sorted_buckets[:-1]))) if len(kpa) else np.empty(0, np.int64)
    bounds = np.append(starts, len(kpa))
    mem.monitors.record_traffic(kpa.pool, len(kpa) * KPA_PAIR_BYTES)
    out = []
    for i in range(len(starts)):
        sel = order[bounds[i]:bounds[i + 1]]
        bucket_start = int(sorted_buckets[bounds[i]]) * width
        out.append((bucket_start, _new_kpa(
            mem, kpa.keys[sel].copy(), kpa.refs[sel].copy(), kpa.resident_col,
            kpa.links, placement, sorted_=kpa.sorted, dirty=kpa.dirty)))
    return out


# -- selection -----------------------------------------------------------


def selection(mem: HybridMemory, kpa: KPA, predicate,
              placement: Placement = _DEFAULT) -> KPA:
    """Keep pairs whose resident key passes the predicate.

    predicate is either a callable over the key vector or a boolean
    mask. Order is preserved; output inherits all links.
    """
    kpa._require_live()
    mask = predicate(kpa.keys) if callable(predicate) else np.asarray(predicate, bool)
    if mask.shape[0] != len(kpa):
        raise ConfigError("selection mask length mismatch")
    mem.monitors.record_traffic(kpa.pool, len(kpa) * 8)
    return _new_kpa(mem, kpa.keys[mask].copy(), kpa.refs[mask].copy(),
                    kpa.resident_col, kpa.links, placement,
                    sorted_=kpa.sorted, dirty=kpa.dirty)


# -- in-array reduction --------------------------------------------------


class FoldKind(enum.Enum):
    FIRST = "first"
    LAST = "last"
    MIN_KEY = "min_key"
    MAX_KEY = "max_key"


def reduce_in_kpa(mem: HybridMemory, kpa: KPA, fold: FoldKind,
                  boundaries: np.ndarray | None = None,
                  placement: Placement = _DEFAULT) -> KPA:
    """Reduce each group to one pair without touching records.

    Groups default to equal-key runs (input must be sorted); callers may
    pass explicit group start indices over any contiguous grouping. The
    chosen pair's key and ref travel together.
    """
    kpa._require_live()
    n = len(kpa)
    if boundaries is None:
        if not kpa.sorted:
            raise ConfigError("run-structured reduction needs a sorted input")
        starts = np.flatnonzero(np.concatenate((
            [True], kpa.keys[1:] != kpa.keys[:-1]))) if n else np.empty(0, np.int64)
    else:
        starts = np.asarray(boundaries, np.int64)
        if n and (starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= n):
            raise ConfigError("boundaries must be increasing starts from 0")
    bounds = np.append(starts, n)
    counts = np.diff(bounds)
    if fold is FoldKind.FIRST:
        pick = bounds[:-1]
    elif fold is FoldKind.LAST:
        pick = bounds[1:] - 1
    else:
        segments = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
        if fold is FoldKind.MIN_KEY:
            order = np.lexsort((kpa.keys, segments))
        else:
            order = np.lexsort((MASK64 - kpa.keys, segments))
        pick = order[bounds[:-1]]
    mem.monitors.record_traffic(kpa.pool, n * KPA_PAIR_BYTES)
    return _new_kpa(mem, kpa.keys[pick].copy(), kpa.refs[pick].copy(),
                    kpa.resident_col, kpa.links, placement,
                    sorted_=kpa.sorted, dirty=kpa.dirty)


# -- out-of-array reduction ----------------------------------------------


def key_runs(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = keys.shape[0]
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    starts = np.flatnonzero(np.concatenate(([True], keys[1:] != keys[:-1])))
    return starts, np.diff(np.append(starts, n))


def segment_aggregate(keys: np.ndarray, values: np.ndarray,
                       aggregate: Aggregate) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate per equal-key run of a key-sorted stream.

    Returns (out_keys, out_values); top-k emits up to k rows per key,
    everything else exactly one. Sums wrap mod 2^64; averages floor.
    """
    starts, counts = key_runs(keys)
    run_keys = keys[starts] if starts.size else keys[:0]
    kind = aggregate.kind
    if kind is AggregateKind.COUNT:
        return run_keys, counts.astype(np.uint64)
    if kind is AggregateKind.SUM:
        return run_keys, np.add.reduceat(values, starts) if starts.size else values[:0]
    if kind is AggregateKind.MIN:
        return run_keys, np.minimum.reduceat(values, starts) if starts.size else values[:0]
    if kind is AggregateKind.MAX:
        return run_keys, np.maximum.reduceat(values, starts) if starts.size else values[:0]
    if kind is AggregateKind.AVG:
        if not starts.size:
            return run_keys, values[:0]
        sums = np.add.reduceat(values, starts)
        return run_keys, sums // counts.astype(np.uint64)
    segments = np.repeat(np.arange(len(starts), dtype=np.int64), counts)
    if kind is AggregateKind.MEDIAN:
        order = np.lexsort((values, segments))
        sv = values[order]
        idx = starts + (counts - 1) // 2
        return run_keys, sv[idx]
    if kind is AggregateKind.DISTINCT_COUNT:
        order = np.lexsort((values, segments))
        sv = values[order]
        if not sv.size:
            return run_keys, values[:0]
        new = np.concatenate(([True], (sv[1:] != sv[:-1]) | (segments[1:] != segments[:-1])))
        return run_keys, np.add.reduceat(new.astype(np.uint64), starts)
    if kind is AggregateKind.TOPK:
        order = np.lexsort((MASK64 - values, segments))
        sv = values[order]
        take = np.minimum(counts, aggregate.k)
        idx = np.repeat(starts, take) + _grouped_arange(take)
        return run_keys.repeat(take), sv[idx]
    raise ConfigError(f"unsupported aggregate {kind}")


def reduce_out_of_kpa(mem: HybridMemory, kpa: KPA, value_column: int,
                      aggregate: Aggregate, window_start: int | None = None) -> Bundle:
    """Aggregate record values per key run of a sorted array.

    One scan of the array plus one gather of the value column (the
    dereferencing half); output records land in a new slow-pool bundle
    as (key, value[, window_start]) rows.
    """
    kpa._require_live()
    if not kpa.sorted:
        raise ConfigError("out-of-array reduction needs a sorted input")
    values = mem.gather(kpa.refs, value_column) if len(kpa) else kpa.keys[:0]
    mem.monitors.record_traffic(kpa.pool, len(kpa) * KPA_PAIR_BYTES)
    out_keys, out_vals = segment_aggregate(kpa.keys, values, aggregate)
    return _emit_rows(mem, out_keys, out_vals, window_start)


def _emit_rows(mem: HybridMemory, out_keys, out_vals, window_start) -> Bundle:
    m = out_keys.shape[0]
    if window_start is None:
        rows = np.column_stack((out_keys, out_vals)) if m else np.empty((0, 2), np.uint64)
        schema = Schema(2, 1)
    else:
        ws = np.full(m, window_start, np.uint64)
        rows = (np.column_stack((out_keys, out_vals, ws)) if m
                else np.empty((0, 3), np.uint64))
        schema = Schema(3, 2)
    return mem.register_bundle(rows.astype(np.uint64), schema)


# -- materialize ---------------------------------------------------------


def materialize(mem: HybridMemory, kpa: KPA) -> Bundle:
    """Dereference every pair into a fresh slow-pool bundle.

    Shadowed (written-back) column values are what get copied out; the
    output bundle is pinned once for the caller.
    """
    kpa._require_live()
    if len(kpa) == 0:
        first = min(kpa.links) if kpa.links else None
        width = mem.bundle(first).schema.column_count if first is not None else 2
        schema = mem.bundle(first).schema if first is not None else Schema(2, 1)
        return mem.register_bundle(np.empty((0, width), np.uint64), schema)
    rows = mem.gather_rows(kpa.refs)
    schema = mem.bundle(int(kpa.refs[0] >> np.uint64(32))).schema
    return mem.register_bundle(rows, schema)


# -- hash baseline -------------------------------------------------------


def hash_group_by(mem: HybridMemory, bundles: list[Bundle], key_column: int,
                  value_column: int | None, aggregate: Aggregate,
                  window_start: int | None = None,
                  initial_capacity: int = 1024) -> tuple[Bundle, int, int]:
    """Hash-table group-by over raw bundles: the comparison baseline.

    Pre-allocated open-addressing table (linear probing); growing past
    the 70% load factor doubles the table and reruns, with each resize
    counted. Returns (output bundle, group count, resizes).
    """
    if initial_capacity < 16:
        raise ConfigError("initial capacity too small")
    keys = (np.concatenate([mem.read_column(b.bundle_id, key_column) for b in bundles])
            if bundles else np.empty(0, np.uint64))
    if value_column is None:
        values = np.zeros(keys.shape[0], np.uint64)
    else:
        values = (np.concatenate([mem.read_column(b.bundle_id, value_column)
                                  for b in bundles])
                  if bundles else np.empty(0, np.uint64))
    mem.monitors.record_traffic(PoolKind.SLOW, keys.shape[0] * 16)

    slots = 1 << max(4, int(np.ceil(np.log2(initial_capacity))))
    gids = np.empty(keys.shape[0], np.int64)
    resizes = 0
    while True:
        table_keys = np.zeros(slots, np.uint64)
        table_gids = np.full(slots, -1, np.int64)
        chunks = max(1, (slots * 16) // mem.config.kpa_chunk_bytes +
                     (1 if (slots * 16) % mem.config.kpa_chunk_bytes else 0))
        handle = mem.allocator.alloc(PoolKind.FAST, mem.config.kpa_chunk_bytes, chunks)
        n_groups = kernels.hash_assign_groups(keys, table_keys, table_gids, gids,
                                              int(slots * 0.7))
        mem.monitors.record_traffic(handle.pool, keys.shape[0] * 16)
        mem.allocator.free(handle)
        if n_groups >= 0:
            break
        slots *= 2
        resizes += 1
        mem.monitors.record_hash_resize()

    if n_groups == 0:
        return _emit_rows(mem, keys[:0], keys[:0], window_start), 0, resizes

    first_keys = np.zeros(n_groups, np.uint64)
    first_keys[gids] = keys
    kind = aggregate.kind
    if kind in (AggregateKind.SUM, AggregateKind.COUNT, AggregateKind.MIN,
                AggregateKind.MAX, AggregateKind.AVG):
        counts = np.bincount(gids, minlength=n_groups).astype(np.uint64)
        if kind is AggregateKind.COUNT:
            out_vals = counts
        elif kind is AggregateKind.SUM or kind is AggregateKind.AVG:
            sums = np.zeros(n_groups, np.uint64)
            np.add.at(sums, gids, values)
            out_vals = sums if kind is AggregateKind.SUM else sums // counts
        elif kind is AggregateKind.MIN:
            acc = np.full(n_groups, MASK64, np.uint64)
            kernels.minmax_by_group(gids, values, acc, True)
            out_vals = acc
        else:
            acc = np.zeros(n_groups, np.uint64)
            kernels.minmax_by_group(gids, values, acc, False)
            out_vals = acc
        return _emit_rows(mem, first_keys, out_vals, window_start), n_groups, resizes

    # holistic and top-k: counting-sort by group id, then run machinery
    order = np.argsort(gids, kind="stable")
    sg = gids[order].astype(np.uint64)
    sv = values[order]
    out_gids, out_vals = segment_aggregate(sg, sv, aggregate)
    out_keys = first_keys[out_gids.astype(np.int64)]
    return _emit_rows(mem, out_keys, out_vals, window_start), n_groups, resizes
