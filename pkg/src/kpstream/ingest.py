"""Deterministic in-process stream sources.

A source yields uint64 row blocks (one per bundle) interleaved with
watermarks. Event times are drawn per window so every window holds
exactly records_per_window records; arrival order is shuffled within a
bounded disorder, and a watermark for a boundary is emitted only after
every record at or before it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .model import ConfigError, Schema, Watermark

Event = "np.ndarray | Watermark"


@dataclass(frozen=True)
class SourceConfig:
    seed: int
    schema: Schema
    records_per_window: int
    window_length_ms: int
    num_windows: int
    bundle_size: int
    disorder_bound_ms: int = 0
    key_cardinality: int = 1024
    value_range: int = 1 << 32
    zipf_skew: float = 0.0
    rate_limit: int | None = None  # records per second of stream time

    def __post_init__(self) -> None:
        if self.records_per_window <= 0 or self.num_windows <= 0:
            raise ConfigError("records_per_window and num_windows must be positive")
        if not 0 < self.bundle_size <= self.records_per_window:
            raise ConfigError("bundle_size must be in [1, records_per_window]")
        if not 0 <= self.disorder_bound_ms < self.window_length_ms:
            raise ConfigError("disorder bound must be below the window length")
        if self.window_length_ms <= 0:
            raise ConfigError("window length must be positive")
        if self.key_cardinality <= 0 or self.value_range <= 0:
            raise ConfigError("key_cardinality and value_range must be positive")
        if self.zipf_skew < 0:
            raise ConfigError("zipf skew must be >= 0")

    @property
    def total_records(self) -> int:
        return self.records_per_window * self.num_windows


@dataclass(frozen=True)
class YsbConfig:
    num_campaigns: int = 100
    ads_per_campaign: int = 10
    ad_type_pass_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.num_campaigns <= 0 or self.ads_per_campaign <= 0:
            raise ConfigError("campaign counts must be positive")
        if not 0.0 <= self.ad_type_pass_fraction <= 1.0:
            raise ConfigError("pass fraction must be in [0, 1]")

    @property
    def num_ads(self) -> int:
        return self.num_campaigns * self.ads_per_campaign

    def table(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """ad id -> campaign id mapping covering every generated ad."""
        ads = range(self.num_ads)
        return tuple(ads), tuple(a // self.ads_per_campaign for a in ads)


def _draw_keys(rng: np.random.Generator, cfg: SourceConfig, n: int) -> np.ndarray:
    if cfg.zipf_skew == 0.0:
        return rng.integers(0, cfg.key_cardinality, n, dtype=np.uint64)
    ranks = np.arange(1, cfg.key_cardinality + 1, dtype=np.float64)
    p = ranks ** -cfg.zipf_skew
    p /= p.sum()
    return rng.choice(cfg.key_cardinality, size=n, p=p).astype(np.uint64)


def _arrival_order(rng: np.random.Generator, ts: np.ndarray,
                   disorder_bound_ms: int) -> np.ndarray:
    if disorder_bound_ms == 0:
        return np.argsort(ts, kind="stable")
    jitter = rng.integers(0, disorder_bound_ms + 1, ts.size, dtype=np.int64)
    return np.argsort(ts.astype(np.int64) + jitter, kind="stable")


def _stream(cfg: SourceConfig, rows: np.ndarray, source: int) -> Iterator[Event]:
    """Cut arrival-ordered rows into bundles; emit each boundary watermark
    as soon as no outstanding record is at or before it."""
    ts = rows[:, cfg.schema.timestamp_column]
    n = rows.shape[0]
    # smallest timestamp still unemitted after position i
    suffix_min = np.empty(n + 1, np.int64)
    suffix_min[n] = np.iinfo(np.int64).max
    if n:
        suffix_min[:n] = np.minimum.accumulate(ts[::-1].astype(np.int64))[::-1]
    boundary = cfg.window_length_ms
    last_boundary = cfg.num_windows * cfg.window_length_ms
    for lo in range(0, n, cfg.bundle_size):
        hi = min(n, lo + cfg.bundle_size)
        yield rows[lo:hi]
        while boundary <= last_boundary and boundary <= suffix_min[hi]:
            yield Watermark(source, boundary - 1)
            boundary += cfg.window_length_ms
    while boundary <= last_boundary:
        yield Watermark(source, boundary - 1)
        boundary += cfg.window_length_ms


def generate(cfg: SourceConfig, source: int = 0) -> Iterator[Event]:
    """Generic source: column 0 keyed, other non-timestamp columns
    uniform values, exactly records_per_window records per window."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.total_records
    length = cfg.window_length_ms
    ts = np.concatenate([
        rng.integers(w * length, (w + 1) * length, cfg.records_per_window,
                     dtype=np.uint64)
        for w in range(cfg.num_windows)])
    cols = []
    for c in range(cfg.schema.column_count):
        if c == cfg.schema.timestamp_column:
            cols.append(ts)
        elif c == 0:
            cols.append(_draw_keys(rng, cfg, n))
        else:
            cols.append(rng.integers(0, cfg.value_range, n, dtype=np.uint64))
    rows = np.column_stack(cols)
    order = _arrival_order(rng, ts, cfg.disorder_bound_ms)
    yield from _stream(cfg, rows[order], source)


YSB_SCHEMA = Schema(7, 3)  # ad_id, ad_type, event_type, t, user_id, page_id, ip


def generate_ysb(cfg: SourceConfig, ysb: YsbConfig,
                 source: int = 0) -> Iterator[Event]:
    """Seven-column ad-event source; ad_type 0 passes the filter with the
    configured fraction, and every ad id is covered by the lookup table."""
    if cfg.schema != YSB_SCHEMA:
        raise ConfigError("ad-event source uses the seven-column schema")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.total_records
    length = cfg.window_length_ms
    ts = np.concatenate([
        rng.integers(w * length, (w + 1) * length, cfg.records_per_window,
                     dtype=np.uint64)
        for w in range(cfg.num_windows)])
    ad_id = rng.integers(0, ysb.num_ads, n, dtype=np.uint64)
    passes = rng.random(n) < ysb.ad_type_pass_fraction
    ad_type = np.where(passes, 0, rng.integers(1, 4, n)).astype(np.uint64)
    junk = lambda: rng.integers(0, 1 << 32, n, dtype=np.uint64)  # noqa: E731
    rows = np.column_stack((ad_id, ad_type, junk(), ts, junk(), junk(), junk()))
    order = _arrival_order(rng, ts, cfg.disorder_bound_ms)
    yield from _stream(cfg, rows[order], source)


def hold_watermarks(events: Iterator[Event], hold_start_ms: int,
                    hold_end_ms: int) -> Iterator[Event]:
    """Buffer watermarks whose timestamp falls in [start, end); flush the
    backlog, in order, at the first watermark at or past the end.

    Models a bounded watermark outage followed by a catch-up burst.
    Holding a watermark only strengthens its guarantee, so the output
    stream still satisfies the watermark contract.
    """
    if not 0 <= hold_start_ms < hold_end_ms:
        raise ConfigError("hold span must satisfy 0 <= start < end")
    held: list[Watermark] = []
    for ev in events:
        if isinstance(ev, Watermark):
            if hold_start_ms <= ev.timestamp < hold_end_ms:
                held.append(ev)
                continue
            if ev.timestamp >= hold_end_ms and held:
                yield from held
                held.clear()
        yield ev
    yield from held


def delay_watermarks(events: Iterator[Event], delay_ms: int) -> Iterator[Event]:
    """Hold each watermark back until one delay_ms later would be due.

    Stretches the in-flight span of every window without touching record
    order, so open-window state accumulates; the stream end releases
    everything still held.
    """
    held: list[Watermark] = []
    for ev in events:
        if isinstance(ev, Watermark):
            held.append(ev)
            while held and held[0].timestamp + delay_ms <= ev.timestamp:
                yield held.pop(0)
        else:
            yield ev
    yield from held
