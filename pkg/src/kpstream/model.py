"""Shared vocabulary: records, bundles, windows, refs, tags, aggregates.

Everything downstream (engine, oracle, benchmarks) speaks in these types.
Records are fixed-width rows of uint64 columns; one column is designated
the event timestamp. Bundles are sealed, immutable batches of records.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Final

import numpy as np

MASK64: Final = (1 << 64) - 1


class ConfigError(ValueError):
    """Rejected configuration (bad flag value, impossible window spec)."""


class AccountingError(RuntimeError):
    """Memory bookkeeping went inconsistent (refcount underflow, leaked slab)."""


class PlanError(ValueError):
    """Pipeline cannot be planned (missing column, unsupported shape)."""

# A record ref packs (bundle id, ordinal) into one uint64 so a pointer
# column is exactly 8 bytes wide.
_REF_ORDINAL_BITS: Final = 32
_REF_ORDINAL_MASK: Final = (1 << _REF_ORDINAL_BITS) - 1


def pack_ref(bundle_id: int, ordinal: int) -> int:
    if bundle_id < 0 or bundle_id > _REF_ORDINAL_MASK:
        raise ValueError(f"bundle id out of range: {bundle_id}")
    if ordinal < 0 or ordinal > _REF_ORDINAL_MASK:
        raise ValueError(f"ordinal out of range: {ordinal}")
    return (bundle_id << _REF_ORDINAL_BITS) | ordinal


def unpack_ref(ref: int) -> tuple[int, int]:
    return ref >> _REF_ORDINAL_BITS, ref & _REF_ORDINAL_MASK


def pack_refs(bundle_id: int, ordinals: np.ndarray) -> np.ndarray:
    """Vectorized pack for all ordinals of one bundle."""
    if bundle_id < 0 or bundle_id > _REF_ORDINAL_MASK:
        raise ValueError(f"bundle id out of range: {bundle_id}")
    return (np.uint64(bundle_id) << np.uint64(_REF_ORDINAL_BITS)) | ordinals.astype(np.uint64)


def ref_bundle_ids(refs: np.ndarray) -> np.ndarray:
    return refs >> np.uint64(_REF_ORDINAL_BITS)


def ref_ordinals(refs: np.ndarray) -> np.ndarray:
    return refs & np.uint64(_REF_ORDINAL_MASK)


@dataclass(frozen=True)
class Schema:
    """Column layout of a record stream.

    column_count >= 2 and the timestamp column must be in range; every
    column is uint64.
    """

    column_count: int
    timestamp_column: int

    def __post_init__(self) -> None:
        if self.column_count < 2:
            raise ValueError("schema needs at least two columns")
        if not 0 <= self.timestamp_column < self.column_count:
            raise ValueError("timestamp column out of range")

    @property
    def row_bytes(self) -> int:
        return 8 * self.column_count


class Bundle:
    """Sealed batch of records: a (rows, columns) uint64 array.

    Sealing marks the array read-only; all later mutation goes through
    shadow overlays owned by the bundle table, never the sealed payload.
    """

    __slots__ = ("bundle_id", "schema", "records")

    def __init__(self, bundle_id: int, schema: Schema, records: np.ndarray):
        records = np.ascontiguousarray(records, dtype=np.uint64)
        if records.ndim != 2 or records.shape[1] != schema.column_count:
            raise ValueError("records shape does not match schema")
        records.flags.writeable = False
        self.bundle_id = bundle_id
        self.schema = schema
        self.records = records

    def __len__(self) -> int:
        return self.records.shape[0]

    @property
    def payload_bytes(self) -> int:
        return self.records.size * 8

    def column(self, index: int) -> np.ndarray:
        return self.records[:, index]

    def timestamps(self) -> np.ndarray:
        return self.records[:, self.schema.timestamp_column]


class WindowKind(enum.Enum):
    FIXED = "fixed"
    SLIDING = "sliding"


@dataclass(frozen=True)
class WindowSpec:
    """Event-time window shape. Windows are half-open [start, start+length).

    slide_ms divides length_ms so windows tile exactly into panes; a
    fixed window is the slide == length special case.
    """

    kind: WindowKind
    length_ms: int
    slide_ms: int

    def __post_init__(self) -> None:
        if self.length_ms <= 0:
            raise ValueError("window length must be positive")
        if not 0 < self.slide_ms <= self.length_ms:
            raise ValueError("slide must be in (0, length]")
        if self.length_ms % self.slide_ms != 0:
            raise ValueError("slide must divide length")
        if self.kind is WindowKind.FIXED and self.slide_ms != self.length_ms:
            raise ValueError("fixed windows have slide == length")

    @staticmethod
    def fixed(length_ms: int) -> "WindowSpec":
        return WindowSpec(WindowKind.FIXED, length_ms, length_ms)

    @staticmethod
    def sliding(length_ms: int, slide_ms: int) -> "WindowSpec":
        return WindowSpec(WindowKind.SLIDING, length_ms, slide_ms)

    @property
    def panes_per_window(self) -> int:
        return self.length_ms // self.slide_ms


def assign_windows(ts: int, spec: WindowSpec) -> list[int]:
    """Window start times containing event time ts, ascending.

    A window start is a multiple of slide_ms; ts belongs to [s, s+length).
    """
    if ts < 0:
        raise ValueError("negative event time")
    last = (ts // spec.slide_ms) * spec.slide_ms
    first = last - spec.length_ms + spec.slide_ms
    return [s for s in range(first, last + 1, spec.slide_ms) if s >= 0]


def pane_of(ts: int, spec: WindowSpec) -> int:
    """Start of the pane (slide-width slot) holding ts.

    Every window containing ts is a union of whole panes including this
    one, so grouping by pane loses nothing.
    """
    if ts < 0:
        raise ValueError("negative event time")
    return (ts // spec.slide_ms) * spec.slide_ms


def windows_of_pane(pane_start: int, spec: WindowSpec) -> list[int]:
    """Window starts whose span includes the pane, ascending."""
    return assign_windows(pane_start, spec)


@dataclass(frozen=True)
class Watermark:
    """Promise from one source: no later record will carry ts <= timestamp."""

    source: int
    timestamp: int


class PoolKind(enum.Enum):
    FAST = "fast"
    SLOW = "slow"


class ImpactTag(enum.Enum):
    """Urgency of a task / allocation relative to the output watermark.

    URGENT work feeds a window that is already closeable; HIGH feeds one
    within the configured horizon; LOW is everything later.
    """

    URGENT = 0
    HIGH = 1
    LOW = 2


def assign_tag(window_end: int, target_watermark: int, window_length_ms: int,
               high_horizon_windows: int = 2) -> ImpactTag:
    """Tag from the window's distance past the global target watermark.

    Closeable (end <= watermark + 1) is URGENT; within
    high_horizon_windows lengths is HIGH; beyond that LOW.
    """
    if window_end <= target_watermark + 1:
        return ImpactTag.URGENT
    if window_end <= target_watermark + 1 + high_horizon_windows * window_length_ms:
        return ImpactTag.HIGH
    return ImpactTag.LOW


class AggregateKind(enum.Enum):
    SUM = "sum"
    COUNT = "count"
    AVG = "avg"
    MEDIAN = "median"
    TOPK = "topk"
    DISTINCT_COUNT = "distinct_count"
    MIN = "min"
    MAX = "max"


# Algebraic aggregates admit early (incremental) aggregation via bounded
# partials; holistic ones need the full value multiset at close.
ALGEBRAIC: Final = frozenset({
    AggregateKind.SUM, AggregateKind.COUNT, AggregateKind.AVG,
    AggregateKind.TOPK, AggregateKind.MIN, AggregateKind.MAX,
})


@dataclass(frozen=True)
class Aggregate:
    kind: AggregateKind
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind is AggregateKind.TOPK:
            if self.k is None or self.k < 1:
                raise ValueError("topk needs k >= 1")
        elif self.k is not None:
            raise ValueError(f"{self.kind.value} takes no k")

    @property
    def algebraic(self) -> bool:
        return self.kind in ALGEBRAIC
