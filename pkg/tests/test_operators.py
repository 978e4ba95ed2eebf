"""Compound operators vs brute-force window evaluation."""
import numpy as np
import pytest

from kpstream.hybridmem import HybridMemory, PoolConfig
from kpstream.model import (
    Aggregate,
    AggregateKind,
    ConfigError,
    MASK64,
    Schema,
    WindowSpec,
    assign_windows,
)
from kpstream.operators import (
    AggregationOperator,
    CmpOp,
    CrossFilter,
    CrossFilterOperator,
    ExternalJoin,
    Filter,
    FlatMap,
    KeyedAggregation,
    LookupTable,
    Sample,
    TemporalJoin,
    TemporalJoinOperator,
    filter_mask,
    flat_map_rows,
    sample_mask,
)
from kpstream.primitives import Placement, destroy, extract, partition, sort

CHUNK = 64 * 1024
PLACE = Placement()


def fresh_mem(**kw):
    defaults = dict(fast_capacity_bytes=512 * CHUNK,
                    slow_bandwidth_bytes_per_interval=1 << 30)
    defaults.update(kw)
    return HybridMemory(PoolConfig(**defaults))


def make_bundle(mem, rows, ts_col=None):
    rows = np.asarray(rows, np.uint64)
    return mem.register_bundle(
        rows, Schema(rows.shape[1], rows.shape[1] - 1 if ts_col is None else ts_col))


def feed_aggregation(mem, op, rows, wspec, bundle_size=7):
    """Push records through extract/partition/process like the engine."""
    rows = np.asarray(rows, np.uint64)
    for lo in range(0, len(rows), bundle_size):
        b = make_bundle(mem, rows[lo:lo + bundle_size])
        kpa = extract(mem, b, b.schema.timestamp_column)
        for pane_start, pane in partition(mem, kpa, wspec.slide_ms):
            op.process_pane(pane_start, pane, PLACE)
        destroy(mem, kpa)
        mem.unpin(b.bundle_id)


def brute_keyed(rows, wspec, key_col, val_col, agg):
    """Dict-of-lists reference for keyed windowed aggregation."""
    groups = {}
    for r in rows:
        for w in assign_windows(int(r[-1]), wspec):
            groups.setdefault((w, int(r[key_col])), []).append(int(r[val_col]))
    out = set()
    for (w, k), vals in groups.items():
        kind = agg.kind
        if kind is AggregateKind.SUM:
            out.add((k, sum(vals) & MASK64, w))
        elif kind is AggregateKind.COUNT:
            out.add((k, len(vals), w))
        elif kind is AggregateKind.MIN:
            out.add((k, min(vals), w))
        elif kind is AggregateKind.MAX:
            out.add((k, max(vals), w))
        elif kind is AggregateKind.AVG:
            out.add((k, (sum(vals) & MASK64) // len(vals), w))
        elif kind is AggregateKind.MEDIAN:
            out.add((k, sorted(vals)[(len(vals) - 1) // 2], w))
        elif kind is AggregateKind.DISTINCT_COUNT:
            out.add((k, len(set(vals)), w))
        elif kind is AggregateKind.TOPK:
            for v in sorted(vals, reverse=True)[:agg.k]:
                out.add((k, v, w))  # set collapses equal rows; compare via lists
    return out


class TestStatelessPieces:
    def test_filter_mask(self):
        vals = np.array([1, 5, 9], np.uint64)
        np.testing.assert_array_equal(
            filter_mask(Filter(0, CmpOp.GT, 4), vals), [False, True, True])
        np.testing.assert_array_equal(
            filter_mask(Filter(0, CmpOp.EQ, 5), vals), [False, True, False])

    def test_sample_mask_deterministic_and_binomial(self):
        m1 = sample_mask(Sample(0.25), 42, 7, 100_000)
        m2 = sample_mask(Sample(0.25), 42, 7, 100_000)
        np.testing.assert_array_equal(m1, m2)
        # 3 sigma of binomial(1e5, .25)
        assert abs(m1.sum() - 25_000) < 3 * np.sqrt(100_000 * 0.25 * 0.75)
        m3 = sample_mask(Sample(0.25), 43, 7, 100_000)
        assert not np.array_equal(m1, m3)

    def test_sample_rate_bounds(self):
        with pytest.raises(ConfigError):
            Sample(1.5)

    def test_flat_map(self):
        rows = np.array([[1, 2], [3, 4]], np.uint64)
        out = flat_map_rows(FlatMap(3), rows)
        assert out.shape == (6, 2)
        np.testing.assert_array_equal(out[:3], [[1, 2]] * 3)


class TestLookupTable:
    def test_apply_marks_dirty_and_rewrites(self):
        mem = fresh_mem()
        spec = ExternalJoin(0, table_keys=(10, 20, 30), table_values=(1, 2, 3))
        table = LookupTable(mem, spec)
        b = make_bundle(mem, [[20, 0, 0], [10, 0, 1], [99, 0, 2]])
        kpa = extract(mem, b, 0)
        table.apply_in_place(kpa)
        np.testing.assert_array_equal(kpa.keys, [2, 1, 99])  # miss stays put
        assert kpa.dirty and not kpa.sorted
        table.close()

    def test_write_back_roundtrip(self):
        # the in-place repurposing pattern: lookup, swap away (write
        # back), swap home again reads the mapped values
        mem = fresh_mem()
        table = LookupTable(mem, ExternalJoin(0, (5, 6), (50, 60)))
        b = make_bundle(mem, [[5, 0, 0], [6, 0, 1]])
        kpa = extract(mem, b, 0)
        table.apply_in_place(kpa)
        from kpstream.primitives import key_swap
        key_swap(mem, kpa, 2)
        key_swap(mem, kpa, 0)
        np.testing.assert_array_equal(kpa.keys, [50, 60])
        table.close()

    def test_duplicate_keys_rejected(self):
        mem = fresh_mem()
        with pytest.raises(ConfigError):
            LookupTable(mem, ExternalJoin(0, (1, 1), (2, 3)))


AGGS = [
    Aggregate(AggregateKind.SUM),
    Aggregate(AggregateKind.COUNT),
    Aggregate(AggregateKind.AVG),
    Aggregate(AggregateKind.MIN),
    Aggregate(AggregateKind.MAX),
    Aggregate(AggregateKind.MEDIAN),
    Aggregate(AggregateKind.DISTINCT_COUNT),
    Aggregate(AggregateKind.TOPK, k=2),
]


def random_rows(rng, n, key_space=6, val_space=40, t_span=3000):
    return np.column_stack((
        rng.integers(0, key_space, n, dtype=np.uint64),
        rng.integers(0, val_space, n, dtype=np.uint64),
        rng.integers(0, t_span, n, dtype=np.uint64),
    ))


def collect_rows(mem, bundle):
    return sorted(map(tuple, bundle.records.tolist()))


class TestAggregationOperator:
    @pytest.mark.parametrize("agg", AGGS, ids=lambda a: a.kind.value)
    def test_fixed_windows_match_brute_force(self, agg):
        rng = np.random.default_rng(31)
        rows = random_rows(rng, 150)
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = AggregationOperator(mem, KeyedAggregation(0, 1, agg), wspec)
        feed_aggregation(mem, op, rows, wspec)
        got = []
        for ws in (0, 1000, 2000):
            got.extend(collect_rows(mem, op.close_window(ws, PLACE)))
            op.retire_panes(ws + wspec.slide_ms)
        assert sorted(got) == _brute_list(rows, wspec, agg)

    @pytest.mark.parametrize("early", [True, False])
    def test_early_toggle_same_result(self, early):
        rng = np.random.default_rng(32)
        rows = random_rows(rng, 200)
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM), early=early),
            wspec)
        feed_aggregation(mem, op, rows, wspec)
        got = []
        for ws in (0, 1000, 2000):
            got.extend(collect_rows(mem, op.close_window(ws, PLACE)))
        mem2 = fresh_mem()
        op2 = AggregationOperator(
            mem2, KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM), early=not early),
            wspec)
        feed_aggregation(mem2, op2, rows, wspec)
        other = []
        for ws in (0, 1000, 2000):
            other.extend(collect_rows(mem2, op2.close_window(ws, PLACE)))
        assert sorted(got) == sorted(other)

    def test_holistic_never_early(self):
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(0, 1, Aggregate(AggregateKind.MEDIAN), early=True),
            WindowSpec.fixed(1000))
        assert not op.early

    def test_sliding_windows_assemble_from_panes(self):
        rng = np.random.default_rng(33)
        rows = random_rows(rng, 120, t_span=2000)
        wspec = WindowSpec.sliding(1000, 500)
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM)), wspec)
        feed_aggregation(mem, op, rows, wspec)
        got = []
        for ws in (0, 500, 1000, 1500):
            got.extend(collect_rows(mem, op.close_window(ws, PLACE)))
            op.retire_panes(ws + wspec.slide_ms)
        assert sorted(got) == _brute_list(rows, wspec, Aggregate(AggregateKind.SUM))

    def test_empty_window_emits_empty_bundle(self):
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM)),
            WindowSpec.fixed(1000))
        out = op.close_window(0, PLACE)
        assert len(out) == 0
        assert out.schema.column_count == 3

    def test_unkeyed_avg(self):
        rows = np.array([[0, 10, 100], [0, 20, 200], [0, 31, 1500]], np.uint64)
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(None, 1, Aggregate(AggregateKind.AVG)), wspec)
        feed_aggregation(mem, op, rows, wspec)
        assert collect_rows(mem, op.close_window(0, PLACE)) == [(15, 0)]
        assert collect_rows(mem, op.close_window(1000, PLACE)) == [(31, 1000)]

    def test_unkeyed_deferred_median(self):
        rows = np.array([[0, v, 10] for v in (9, 1, 5, 3, 7)], np.uint64)
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(None, 1, Aggregate(AggregateKind.MEDIAN)), wspec)
        feed_aggregation(mem, op, rows, wspec)
        assert collect_rows(mem, op.close_window(0, PLACE)) == [(5, 0)]

    def test_row_path_matches_brute(self):
        rng = np.random.default_rng(34)
        keys = rng.integers(0, 5, 80, dtype=np.uint64)
        ts = rng.integers(0, 2000, 80, dtype=np.uint64)
        rows = np.column_stack((keys, ts))
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = AggregationOperator(
            mem, KeyedAggregation(0, None, Aggregate(AggregateKind.COUNT)), wspec)
        schema = Schema(2, 1)
        for lo in range(0, 80, 16):
            chunk = rows[lo:lo + 16]
            panes = chunk[:, 1] // 1000 * 1000
            for p in np.unique(panes):
                op.process_pane_rows(int(p), chunk[panes == p], schema)
        got = []
        for ws in (0, 1000):
            got.extend(collect_rows(mem, op.close_window(ws, PLACE)))
        brute = {}
        for k, t in rows:
            w = int(t) // 1000 * 1000
            brute[(w, int(k))] = brute.get((w, int(k)), 0) + 1
        assert sorted(got) == sorted((k, c, w) for (w, k), c in brute.items())

    def test_retire_frees_all_state(self):
        rng = np.random.default_rng(35)
        mem = fresh_mem()
        wspec = WindowSpec.fixed(1000)
        for early in (True, False):
            op = AggregationOperator(
                mem, KeyedAggregation(0, 1, Aggregate(AggregateKind.SUM), early=early),
                wspec)
            feed_aggregation(mem, op, random_rows(rng, 60, t_span=1000), wspec)
            out = op.close_window(0, PLACE)
            op.retire_panes(10_000)
            mem.unpin(out.bundle_id)
        mem.audit()
        assert mem.allocator.live_count == 0
        assert mem.live_bundles() == []


def _group(rows, wspec):
    groups = {}
    for r in rows:
        for w in assign_windows(int(r[-1]), wspec):
            groups.setdefault((w, int(r[0])), []).append(int(r[1]))
    return groups


def _agg_vals(vals, agg):
    kind = agg.kind
    if kind is AggregateKind.SUM:
        return [(None, sum(vals) & MASK64)]
    if kind is AggregateKind.COUNT:
        return [(None, len(vals))]
    if kind is AggregateKind.MIN:
        return [(None, min(vals))]
    if kind is AggregateKind.MAX:
        return [(None, max(vals))]
    if kind is AggregateKind.AVG:
        return [(None, (sum(vals) & MASK64) // len(vals))]
    if kind is AggregateKind.MEDIAN:
        return [(None, sorted(vals)[(len(vals) - 1) // 2])]
    if kind is AggregateKind.DISTINCT_COUNT:
        return [(None, len(set(vals)))]
    return [(None, v) for v in sorted(vals, reverse=True)[:agg.k]]


def _brute_list(rows, wspec, agg):
    out = []
    for (w, k), vals in _group(rows, wspec).items():
        for _, v in _agg_vals(vals, agg):
            out.append((k, v, w))
    return sorted(out)


class TestTemporalJoinOperator:
    def drive(self, mem, op, left_rows, right_rows, wspec, order_seed=None):
        sides = []
        for side, rows in ((0, left_rows), (1, right_rows)):
            rows = np.asarray(rows, np.uint64)
            for lo in range(0, len(rows), 5):
                sides.append((side, rows[lo:lo + 5]))
        if order_seed is not None:
            rng = np.random.default_rng(order_seed)
            rng.shuffle(sides)
        for side, chunk in sides:
            b = make_bundle(mem, chunk)
            kpa = extract(mem, b, 2)
            for ws, pane in partition(mem, kpa, wspec.slide_ms):
                op.process_pane(side, ws, pane, PLACE)
            destroy(mem, kpa)
            mem.unpin(b.bundle_id)

    def brute(self, left_rows, right_rows, wspec):
        out = []
        for l in left_rows:
            for r in right_rows:
                if l[0] == r[0] and (int(l[2]) // wspec.length_ms
                                     == int(r[2]) // wspec.length_ms):
                    out.append((int(l[0]), int(l[1]), int(l[2]),
                                int(r[1]), int(r[2])))
        return sorted(out)

    def collect(self, mem, op, windows):
        got = []
        for ws in windows:
            for bid in op.close_window(ws):
                got.extend(map(tuple, mem.bundle(bid).records.tolist()))
                mem.unpin(bid)
        return sorted(got)

    def test_matches_nested_loop(self):
        rng = np.random.default_rng(36)
        wspec = WindowSpec.fixed(1000)
        left = random_rows(rng, 60, key_space=5, t_span=3000)
        right = random_rows(rng, 60, key_space=5, t_span=3000)
        mem = fresh_mem()
        op = TemporalJoinOperator(mem, TemporalJoin(0), wspec, Schema(3, 2))
        self.drive(mem, op, left, right, wspec)
        assert self.collect(mem, op, (0, 1000, 2000)) == self.brute(left, right, wspec)

    def test_arrival_order_invariant(self):
        rng = np.random.default_rng(37)
        wspec = WindowSpec.fixed(1000)
        left = random_rows(rng, 40, key_space=4, t_span=2000)
        right = random_rows(rng, 40, key_space=4, t_span=2000)
        results = []
        for seed in (None, 1, 2, 3):
            mem = fresh_mem()
            op = TemporalJoinOperator(mem, TemporalJoin(0), wspec, Schema(3, 2))
            self.drive(mem, op, left, right, wspec, order_seed=seed)
            results.append(self.collect(mem, op, (0, 1000)))
        assert all(r == results[0] for r in results)

    def test_sliding_rejected(self):
        mem = fresh_mem()
        with pytest.raises(ConfigError):
            TemporalJoinOperator(mem, TemporalJoin(0),
                                 WindowSpec.sliding(1000, 500), Schema(3, 2))

    def test_no_leaks_after_close(self):
        rng = np.random.default_rng(38)
        wspec = WindowSpec.fixed(1000)
        mem = fresh_mem()
        op = TemporalJoinOperator(mem, TemporalJoin(0), wspec, Schema(3, 2))
        self.drive(mem, op, random_rows(rng, 30, t_span=1000),
                   random_rows(rng, 30, t_span=1000), wspec)
        for bid in op.close_window(0):
            mem.unpin(bid)
        mem.audit()
        assert mem.allocator.live_count == 0
        assert mem.live_bundles() == []


class TestCrossFilterOperator:
    def test_matches_brute(self):
        rng = np.random.default_rng(39)
        wspec = WindowSpec.fixed(1000)
        a_rows = random_rows(rng, 50, val_space=100, t_span=2000)
        b_rows = np.column_stack((
            rng.integers(0, 6, 70, dtype=np.uint64),
            rng.integers(0, 100, 70, dtype=np.uint64),
            rng.integers(0, 50, 70, dtype=np.uint64),
            rng.integers(0, 2000, 70, dtype=np.uint64),
        ))
        mem = fresh_mem()
        op = CrossFilterOperator(mem, CrossFilter(avg_column=1, filter_column=1),
                                 wspec, Schema(4, 3))
        for lo in range(0, 50, 9):
            b = make_bundle(mem, a_rows[lo:lo + 9])
            kpa = extract(mem, b, 2)
            for ws, pane in partition(mem, kpa, wspec.slide_ms):
                op.process_avg_pane(ws, pane)
            destroy(mem, kpa)
            mem.unpin(b.bundle_id)
        for lo in range(0, 70, 9):
            b = make_bundle(mem, b_rows[lo:lo + 9], ts_col=3)
            kpa = extract(mem, b, 3)
            for ws, pane in partition(mem, kpa, wspec.slide_ms):
                op.process_filter_pane(ws, pane)
            destroy(mem, kpa)
            mem.unpin(b.bundle_id)
        got = []
        for ws in (0, 1000):
            out = op.close_window(ws, PLACE)
            got.extend(map(tuple, out.records.tolist()))
            mem.unpin(out.bundle_id)
        # reference: floored average of A's column-1 per window
        thresh = {}
        for w in (0, 1000):
            vals = [int(r[1]) for r in a_rows if int(r[2]) // 1000 * 1000 == w]
            thresh[w] = (sum(vals) // len(vals)) if vals else 0
        expect = sorted(
            tuple(map(int, r)) for r in b_rows
            if int(r[1]) > thresh[int(r[3]) // 1000 * 1000])
        assert sorted(got) == expect
        mem.audit()
        assert mem.allocator.live_count == 0
