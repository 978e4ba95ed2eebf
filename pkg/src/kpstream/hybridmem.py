"""Two-tier memory model: fast pool, slow pool, knob, refcounts, monitors.

The fast pool is capacity-limited with a reserved region for urgent
work; the slow pool has unbounded capacity but a per-interval bandwidth
budget. Every key pointer array and bundle lives in slabs of a fixed
size class, so occupancy is exact and forced spills are observable
events rather than errors.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .model import (
    AccountingError,
    ConfigError,
    Bundle,
    ImpactTag,
    PoolKind,
    Schema,
    pack_refs,
    ref_bundle_ids,
    ref_ordinals,
)

KPA_PAIR_BYTES = 16  # 8B resident key + 8B record ref


@dataclass(frozen=True)
class PoolConfig:
    """Sizing and policy for both pools plus the demand-balance knob.

    The backpressure_* thresholds and slow_worker_share are scheduling
    conveniences invented here, not part of the memory model proper;
    both are plain config fields so experiments can move them.
    """

    fast_capacity_bytes: int
    slow_bandwidth_bytes_per_interval: int
    fast_reserved_fraction: float = 0.10
    sample_interval_ms: int = 10
    kpa_chunk_bytes: int = 64 * 1024
    bundle_slab_bytes: int = 64 * 1024
    window_state_slab_bytes: int = 4 * 1024
    delta: float = 0.05
    deadband: float = 0.10
    headroom_gate: float = 0.10
    high_horizon_windows: int = 2
    target_delay_ms: int = 1000
    backpressure_high: float = 0.95
    backpressure_low: float = 0.85
    slow_worker_share: float = 0.5

    def __post_init__(self) -> None:
        if self.fast_capacity_bytes <= 0:
            raise ConfigError("fast capacity must be positive")
        if not 0.0 <= self.fast_reserved_fraction < 1.0:
            raise ConfigError("reserved fraction must be in [0, 1)")
        if self.slow_bandwidth_bytes_per_interval <= 0:
            raise ConfigError("slow bandwidth budget must be positive")
        if self.sample_interval_ms <= 0:
            raise ConfigError("sample interval must be positive")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("knob step must be in (0, 1]")
        if self.deadband < 0.0:
            raise ConfigError("dead-band must be non-negative")
        for name in ("kpa_chunk_bytes", "bundle_slab_bytes", "window_state_slab_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def fast_reserved_bytes(self) -> int:
        return int(self.fast_capacity_bytes * self.fast_reserved_fraction)

    @property
    def fast_general_bytes(self) -> int:
        return self.fast_capacity_bytes - self.fast_reserved_bytes

    @property
    def size_classes(self) -> tuple[int, ...]:
        return (self.kpa_chunk_bytes, self.bundle_slab_bytes, self.window_state_slab_bytes)


@dataclass(frozen=True)
class KnobState:
    """{k_low, k_high}: probability that a LOW / HIGH tagged allocation
    is placed in the fast pool. Starts wide open at (1, 1)."""

    k_low: float = 1.0
    k_high: float = 1.0

    def __post_init__(self) -> None:
        for v in (self.k_low, self.k_high):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("knob values must be in [0, 1]")


def _step(value: float, delta: float, direction: int) -> float:
    # Integer-step arithmetic on a grid of round(1/delta) steps, so a
    # 0.05 knob walks 1 -> 0 in exactly twenty drift-free moves.
    total = round(1.0 / delta)
    steps = round(value * total) + direction
    return min(total, max(0, steps)) / total


def update_knob(state: KnobState, fast_fraction: float, slow_fraction: float,
                headroom_fraction: float, delta: float = 0.05,
                deadband: float = 0.10, headroom_gate: float = 0.10) -> KnobState:
    """One feedback step of the demand-balance knob.

    Fast demand dominant beyond the dead-band shifts placements toward
    the slow pool (knob down); slow dominance shifts back (knob up).
    k_low always moves first; k_high moves only when k_low has hit the
    relevant extreme and the pipeline still has output-delay headroom.
    """
    diff = fast_fraction - slow_fraction
    if abs(diff) <= deadband:
        return state
    direction = -1 if diff > 0 else +1
    at_extreme = state.k_low <= 0.0 if direction < 0 else state.k_low >= 1.0
    if not at_extreme:
        return KnobState(_step(state.k_low, delta, direction), state.k_high)
    if headroom_fraction >= headroom_gate:
        return KnobState(state.k_low, _step(state.k_high, delta, direction))
    return state


def decide_placement(tag: ImpactTag, knob: KnobState, rng_draw: float,
                     fast_full: bool) -> PoolKind:
    """Policy half of placement: which pool this allocation wants.

    Urgent work always claims the fast pool (its reserved region is
    accounted separately, so general-pool fullness does not apply);
    other tags flip a knob-weighted coin unless the fast pool is full.
    """
    if tag is ImpactTag.URGENT:
        return PoolKind.FAST
    if fast_full:
        return PoolKind.SLOW
    k = knob.k_high if tag is ImpactTag.HIGH else knob.k_low
    return PoolKind.FAST if rng_draw < k else PoolKind.SLOW


@dataclass
class SlabHandle:
    handle_id: int
    pool: PoolKind
    reserved: bool
    slab_bytes: int
    count: int

    @property
    def total_bytes(self) -> int:
        return self.slab_bytes * self.count


class SlabAllocator:
    """Fixed-size-class slab accounting over both pools.

    The fast pool splits into a general region and a reserved region for
    urgent work. Requests that want fast but cannot fit are placed slow
    and counted as forced spills; the fast gauge can never exceed
    capacity.
    """

    def __init__(self, config: PoolConfig):
        self.config = config
        self._lock = threading.Lock()
        self._next_id = 0
        self._live: dict[int, SlabHandle] = {}
        self.fast_general_used = 0
        self.fast_reserved_used = 0
        self.slow_used = 0
        self.spill_count = 0

    def _check_class(self, slab_bytes: int) -> None:
        if slab_bytes not in self.config.size_classes:
            raise ConfigError(f"unknown slab size class: {slab_bytes}")

    def fast_fits(self, total_bytes: int, *, reserved: bool) -> bool:
        with self._lock:
            return self._fits_locked(total_bytes, reserved)

    def _fits_locked(self, total_bytes: int, reserved: bool) -> bool:
        if reserved:
            return self.fast_reserved_used + total_bytes <= self.config.fast_reserved_bytes
        return self.fast_general_used + total_bytes <= self.config.fast_general_bytes

    def alloc(self, pool: PoolKind, slab_bytes: int, count: int = 1, *,
              reserved: bool = False) -> SlabHandle:
        """Allocate `count` slabs of one size class.

        A fast-pool request that does not fit its region falls through
        to the slow pool and bumps the spill counter.
        """
        self._check_class(slab_bytes)
        if count < 1:
            raise ConfigError("slab count must be >= 1")
        total = slab_bytes * count
        with self._lock:
            if pool is PoolKind.FAST and not self._fits_locked(total, reserved):
                pool = PoolKind.SLOW
                reserved = False
                self.spill_count += 1
            handle = SlabHandle(self._next_id, pool, reserved and pool is PoolKind.FAST,
                                slab_bytes, count)
            self._next_id += 1
            if pool is PoolKind.FAST:
                if reserved:
                    self.fast_reserved_used += total
                else:
                    self.fast_general_used += total
            else:
                self.slow_used += total
            self._live[handle.handle_id] = handle
            return handle

    def free(self, handle: SlabHandle) -> None:
        with self._lock:
            if handle.handle_id not in self._live:
                raise AccountingError(f"double free of slab handle {handle.handle_id}")
            del self._live[handle.handle_id]
            total = handle.total_bytes
            if handle.pool is PoolKind.FAST:
                if handle.reserved:
                    self.fast_reserved_used -= total
                    if self.fast_reserved_used < 0:
                        raise AccountingError("reserved gauge went negative")
                else:
                    self.fast_general_used -= total
                    if self.fast_general_used < 0:
                        raise AccountingError("fast gauge went negative")
            else:
                self.slow_used -= total
                if self.slow_used < 0:
                    raise AccountingError("slow gauge went negative")

    @property
    def fast_used(self) -> int:
        return self.fast_general_used + self.fast_reserved_used

    def audit(self) -> None:
        """Recompute gauges from live handles; raise on any mismatch."""
        with self._lock:
            gen = sum(h.total_bytes for h in self._live.values()
                      if h.pool is PoolKind.FAST and not h.reserved)
            res = sum(h.total_bytes for h in self._live.values()
                      if h.pool is PoolKind.FAST and h.reserved)
            slow = sum(h.total_bytes for h in self._live.values()
                       if h.pool is PoolKind.SLOW)
            if (gen, res, slow) != (self.fast_general_used, self.fast_reserved_used,
                                    self.slow_used):
                raise AccountingError(
                    f"gauge drift: live {(gen, res, slow)} vs counters "
                    f"{(self.fast_general_used, self.fast_reserved_used, self.slow_used)}")

    @property
    def live_count(self) -> int:
        with self._lock:
            return len(self._live)


class Monitors:
    """Counters sampled once per interval plus cumulative totals."""

    def __init__(self, config: PoolConfig):
        self.config = config
        self._lock = threading.Lock()
        self._slow_interval = 0
        self.slow_total = 0
        self.fast_total = 0
        self.deref_count = 0
        self.late_records = 0
        self.hash_resizes = 0

    def record_traffic(self, pool: PoolKind, nbytes: int) -> None:
        if nbytes < 0:
            raise AccountingError("negative traffic")
        with self._lock:
            if pool is PoolKind.SLOW:
                self._slow_interval += nbytes
                self.slow_total += nbytes
            else:
                self.fast_total += nbytes

    def record_deref(self, count: int) -> None:
        with self._lock:
            self.deref_count += count

    def record_late(self, count: int) -> None:
        with self._lock:
            self.late_records += count

    def record_hash_resize(self) -> None:
        with self._lock:
            self.hash_resizes += 1

    def slow_interval_fraction(self) -> float:
        with self._lock:
            return self._slow_interval / self.config.slow_bandwidth_bytes_per_interval

    def reset_interval(self) -> int:
        """End the sampling interval; returns the bytes it moved."""
        with self._lock:
            moved = self._slow_interval
            self._slow_interval = 0
            return moved


@dataclass(frozen=True)
class MonitorSample:
    fast_fraction: float
    slow_fraction: float
    fast_used_bytes: int
    slow_bytes_interval: int
    spill_count: int
    deref_count: int


class _BundleEntry:
    __slots__ = ("bundle", "handle", "links", "pins", "shadows")

    def __init__(self, bundle: Bundle, handle: SlabHandle):
        self.bundle = bundle
        self.handle = handle
        self.links = 0   # references held by key pointer arrays
        self.pins = 0    # explicit holds (ingestion, emitted output)
        self.shadows: dict[int, np.ndarray] = {}


class HybridMemory:
    """Facade owning the allocator, bundle table, monitors and knob.

    All record dereferences funnel through gather()/gather_rows()/
    write_shadow() here, which is what makes the sequential-access
    discipline of the grouping primitives checkable: their dereference
    count must stay at zero.
    """

    def __init__(self, config: PoolConfig):
        self.config = config
        self.allocator = SlabAllocator(config)
        self.monitors = Monitors(config)
        self.knob = KnobState()
        self.knob_updates = 0
        self._knob_lock = threading.Lock()
        self._table_lock = threading.Lock()
        self._entries: dict[int, _BundleEntry] = {}
        self._dead: set[int] = set()
        self._next_bundle = 0

    # -- knob ------------------------------------------------------------

    def update_knob(self, fast_fraction: float, slow_fraction: float,
                    headroom_fraction: float) -> KnobState:
        with self._knob_lock:
            new = update_knob(self.knob, fast_fraction, slow_fraction,
                              headroom_fraction, self.config.delta,
                              self.config.deadband, self.config.headroom_gate)
            if new != self.knob:
                self.knob_updates += 1
            self.knob = new
            return new

    def sample(self) -> MonitorSample:
        """Close the current interval and report both pressure fractions."""
        fast_used = self.allocator.fast_used
        moved = self.monitors.reset_interval()
        return MonitorSample(
            fast_fraction=fast_used / self.config.fast_capacity_bytes,
            slow_fraction=moved / self.config.slow_bandwidth_bytes_per_interval,
            fast_used_bytes=fast_used,
            slow_bytes_interval=moved,
            spill_count=self.allocator.spill_count,
            deref_count=self.monitors.deref_count,
        )

    # -- KPA slab placement ---------------------------------------------

    def kpa_bytes(self, n_pairs: int) -> int:
        chunk = self.config.kpa_chunk_bytes
        chunks = max(1, -(-(n_pairs * KPA_PAIR_BYTES) // chunk))
        return chunks * chunk

    def allocate_kpa(self, n_pairs: int, tag: ImpactTag, draw: float) -> SlabHandle:
        """Place a key pointer array of n_pairs pairs.

        The knob decides the preferred pool; capacity can override it,
        and any override of a fast preference is a counted spill.
        """
        total = self.kpa_bytes(n_pairs)
        chunks = total // self.config.kpa_chunk_bytes
        reserved = tag is ImpactTag.URGENT
        fast_full = not self.allocator.fast_fits(total, reserved=reserved)
        pool = decide_placement(tag, self.knob, draw, fast_full)
        if pool is PoolKind.FAST:
            # allocator re-checks under its own lock and spills if the
            # region filled meanwhile
            return self.allocator.alloc(PoolKind.FAST, self.config.kpa_chunk_bytes,
                                        chunks, reserved=reserved)
        if fast_full and decide_placement(tag, self.knob, draw, False) is PoolKind.FAST:
            # knob wanted fast, capacity said no: forced spill
            with self.allocator._lock:
                self.allocator.spill_count += 1
        return self.allocator.alloc(PoolKind.SLOW, self.config.kpa_chunk_bytes, chunks)

    # -- bundle table ----------------------------------------------------

    def register_bundle(self, records: np.ndarray, schema: Schema) -> Bundle:
        """Seal records into a bundle in the slow pool, pinned once by
        the producer."""
        with self._table_lock:
            bundle_id = self._next_bundle
            self._next_bundle += 1
        bundle = Bundle(bundle_id, schema, records)
        slab = self.config.bundle_slab_bytes
        count = max(1, -(-bundle.payload_bytes // slab))
        handle = self.allocator.alloc(PoolKind.SLOW, slab, count)
        entry = _BundleEntry(bundle, handle)
        entry.pins = 1
        with self._table_lock:
            self._entries[bundle_id] = entry
        self.monitors.record_traffic(PoolKind.SLOW, bundle.payload_bytes)
        return bundle

    def _entry(self, bundle_id: int) -> _BundleEntry:
        entry = self._entries.get(bundle_id)
        if entry is None:
            if bundle_id in self._dead:
                raise AccountingError(f"use after free of bundle {bundle_id}")
            raise AccountingError(f"unknown bundle {bundle_id}")
        return entry

    def retain(self, bundle_id: int) -> None:
        with self._table_lock:
            self._entry(bundle_id).links += 1

    def release(self, bundle_id: int) -> None:
        with self._table_lock:
            entry = self._entry(bundle_id)
            entry.links -= 1
            if entry.links < 0:
                raise AccountingError(f"refcount underflow on bundle {bundle_id}")
            self._maybe_reclaim(bundle_id, entry)

    def pin(self, bundle_id: int) -> None:
        with self._table_lock:
            self._entry(bundle_id).pins += 1

    def unpin(self, bundle_id: int) -> None:
        with self._table_lock:
            entry = self._entry(bundle_id)
            entry.pins -= 1
            if entry.pins < 0:
                raise AccountingError(f"pin underflow on bundle {bundle_id}")
            self._maybe_reclaim(bundle_id, entry)

    def _maybe_reclaim(self, bundle_id: int, entry: _BundleEntry) -> None:
        if entry.links == 0 and entry.pins == 0:
            self.allocator.free(entry.handle)
            del self._entries[bundle_id]
            self._dead.add(bundle_id)

    def refcount(self, bundle_id: int) -> tuple[int, int]:
        with self._table_lock:
            entry = self._entry(bundle_id)
            return entry.links, entry.pins

    def is_live(self, bundle_id: int) -> bool:
        with self._table_lock:
            return bundle_id in self._entries

    def live_bundles(self) -> list[int]:
        with self._table_lock:
            return sorted(self._entries)

    def bundle(self, bundle_id: int) -> Bundle:
        with self._table_lock:
            return self._entry(bundle_id).bundle

    # -- dereference chokepoint ------------------------------------------

    def _column_view(self, entry: _BundleEntry, column: int) -> np.ndarray:
        shadow = entry.shadows.get(column)
        if shadow is not None:
            return shadow
        return entry.bundle.records[:, column]

    def read_column(self, bundle_id: int, column: int) -> np.ndarray:
        """Sequential scan of one column's current view (shadow wins).

        This is streaming access, not a dereference; extraction and the
        hash baseline read through here.
        """
        with self._table_lock:
            return self._column_view(self._entry(bundle_id), column)

    def gather(self, refs: np.ndarray, column: int) -> np.ndarray:
        """Random-access read of one column through record refs.

        This is a dereference: every grouping primitive must get through
        its work without ever arriving here.
        """
        out = np.empty(refs.shape[0], np.uint64)
        if refs.shape[0] == 0:
            return out
        bids = ref_bundle_ids(refs)
        ords = ref_ordinals(refs)
        with self._table_lock:
            for bid in np.unique(bids):
                mask = bids == bid
                col = self._column_view(self._entry(int(bid)), column)
                out[mask] = col[ords[mask].astype(np.int64)]
        self.monitors.record_deref(refs.shape[0])
        self.monitors.record_traffic(PoolKind.SLOW, refs.shape[0] * 8)
        return out

    def gather_rows(self, refs: np.ndarray) -> np.ndarray:
        """Random-access read of whole records (shadow columns applied)."""
        if refs.shape[0] == 0:
            return np.empty((0, 0), np.uint64)
        bids = ref_bundle_ids(refs)
        ords = ref_ordinals(refs)
        with self._table_lock:
            first = self._entry(int(bids[0]))
            width = first.bundle.schema.column_count
            out = np.empty((refs.shape[0], width), np.uint64)
            for bid in np.unique(bids):
                mask = bids == bid
                entry = self._entry(int(bid))
                idx = ords[mask].astype(np.int64)
                out[mask] = entry.bundle.records[idx]
                for col, shadow in entry.shadows.items():
                    out[mask, col] = shadow[idx]
        self.monitors.record_deref(refs.shape[0])
        self.monitors.record_traffic(PoolKind.SLOW, refs.shape[0] * width * 8)
        return out

    def write_shadow(self, refs: np.ndarray, column: int, values: np.ndarray) -> None:
        """Random-access write of one column: dirty keys going home.

        Sealed payloads stay immutable; writes land in a per-(bundle,
        column) overlay that every later dereference reads first.
        """
        if refs.shape[0] == 0:
            return
        bids = ref_bundle_ids(refs)
        ords = ref_ordinals(refs)
        with self._table_lock:
            for bid in np.unique(bids):
                mask = bids == bid
                entry = self._entry(int(bid))
                shadow = entry.shadows.get(column)
                if shadow is None:
                    shadow = entry.bundle.records[:, column].copy()
                    entry.shadows[column] = shadow
                shadow[ords[mask].astype(np.int64)] = values[mask]
        self.monitors.record_deref(refs.shape[0])
        self.monitors.record_traffic(PoolKind.SLOW, refs.shape[0] * 8)

    # -- audits ----------------------------------------------------------

    def audit(self) -> None:
        """Slab gauges vs live handles, and no negative counts anywhere."""
        self.allocator.audit()
        with self._table_lock:
            for bid, entry in self._entries.items():
                if entry.links < 0 or entry.pins < 0:
                    raise AccountingError(f"negative count on bundle {bid}")

    def new_bundle_from_rows(self, rows: np.ndarray, schema: Schema) -> Bundle:
        """Convenience for operators emitting derived records."""
        return self.register_bundle(rows, schema)
