"""Knob feedback, placement policy, slab accounting, refcounts, monitors."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpstream.hybridmem import (
    HybridMemory,
    KnobState,
    PoolConfig,
    SlabAllocator,
    decide_placement,
    update_knob,
)
from kpstream.model import AccountingError, ConfigError, ImpactTag, PoolKind, Schema

CHUNK = 64 * 1024


def small_config(**kw):
    defaults = dict(
        fast_capacity_bytes=10 * CHUNK,
        slow_bandwidth_bytes_per_interval=1_000_000,
        fast_reserved_fraction=0.10,
    )
    defaults.update(kw)
    return PoolConfig(**defaults)


class TestUpdateKnob:
    def test_fast_dominant_moves_k_low_down(self):
        s = update_knob(KnobState(1.0, 1.0), 0.9, 0.2, 0.9)
        assert (s.k_low, s.k_high) == (0.95, 1.0)

    def test_slow_dominant_moves_k_low_up(self):
        s = update_knob(KnobState(0.5, 1.0), 0.2, 0.9, 0.9)
        assert (s.k_low, s.k_high) == (0.55, 1.0)

    def test_deadband_holds(self):
        s = KnobState(0.5, 0.5)
        assert update_knob(s, 0.5, 0.45, 0.9) == s
        assert update_knob(s, 0.45, 0.5, 0.9) == s
        assert update_knob(s, 0.6, 0.5, 0.9) == s  # exactly at the band edge

    def test_k_high_needs_k_low_extreme(self):
        s = update_knob(KnobState(0.3, 1.0), 0.9, 0.1, 0.9)
        assert (s.k_low, s.k_high) == (0.25, 1.0)

    def test_k_high_moves_at_extreme_with_headroom(self):
        s = update_knob(KnobState(0.0, 1.0), 0.9, 0.1, 0.5)
        assert (s.k_low, s.k_high) == (0.0, 0.95)

    def test_k_high_gated_without_headroom(self):
        s = KnobState(0.0, 1.0)
        assert update_knob(s, 0.9, 0.1, 0.05) == s
        # gate is >= 0.10
        s2 = update_knob(s, 0.9, 0.1, 0.10)
        assert s2.k_high == 0.95

    def test_upward_extreme_is_one(self):
        s = update_knob(KnobState(1.0, 0.5), 0.1, 0.9, 0.9)
        assert (s.k_low, s.k_high) == (1.0, 0.55)

    def test_exactly_twenty_steps_down(self):
        # k_low walks 1 -> 0 in exactly ceil(1/0.05) = 20 updates; with
        # no headroom k_high then never moves
        s = KnobState()
        changes = 0
        for _ in range(60):
            nxt = update_knob(s, 0.9, 0.1, 0.0)
            if nxt != s:
                changes += 1
            s = nxt
        assert changes == 20
        assert s.k_low == 0.0
        assert s.k_high == 1.0

    def test_k_high_walks_after_k_low_with_headroom(self):
        s = KnobState()
        for _ in range(40):
            s = update_knob(s, 0.9, 0.1, 0.9)
        assert (s.k_low, s.k_high) == (0.0, 0.0)

    @given(
        moves=st.lists(
            st.tuples(
                st.floats(min_value=0.0, max_value=3.0),
                st.floats(min_value=0.0, max_value=3.0),
                st.floats(min_value=0.0, max_value=1.0),
            ),
            max_size=60,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_fuzz_stays_clamped_and_stepped(self, moves):
        s = KnobState()
        for fast, slow, head in moves:
            nxt = update_knob(s, fast, slow, head)
            assert 0.0 <= nxt.k_low <= 1.0
            assert 0.0 <= nxt.k_high <= 1.0
            # any single update moves at most one knob by one step
            dl = abs(round((nxt.k_low - s.k_low) / 0.05))
            dh = abs(round((nxt.k_high - s.k_high) / 0.05))
            assert dl + dh <= 1
            if dh:
                assert s.k_low in (0.0, 1.0)
                assert head >= 0.10
            s = nxt


class TestDecidePlacement:
    def test_urgent_always_fast(self):
        for full in (False, True):
            assert decide_placement(ImpactTag.URGENT, KnobState(0.0, 0.0), 0.99,
                                    full) is PoolKind.FAST

    def test_fast_full_forces_slow(self):
        assert decide_placement(ImpactTag.LOW, KnobState(1.0, 1.0), 0.0,
                                True) is PoolKind.SLOW

    def test_knob_extremes(self):
        assert decide_placement(ImpactTag.LOW, KnobState(1.0, 0.0), 0.999,
                                False) is PoolKind.FAST
        assert decide_placement(ImpactTag.LOW, KnobState(0.0, 1.0), 0.0,
                                False) is PoolKind.SLOW
        assert decide_placement(ImpactTag.HIGH, KnobState(0.0, 1.0), 0.999,
                                False) is PoolKind.FAST

    def test_monte_carlo_fraction_tracks_knob(self):
        rng = np.random.default_rng(7)
        knob = KnobState(0.6, 0.3)
        n = 20_000
        low = sum(
            decide_placement(ImpactTag.LOW, knob, d, False) is PoolKind.FAST
            for d in rng.random(n))
        high = sum(
            decide_placement(ImpactTag.HIGH, knob, d, False) is PoolKind.FAST
            for d in rng.random(n))
        assert abs(low / n - 0.6) < 0.02
        assert abs(high / n - 0.3) < 0.02


class TestSlabAllocator:
    def test_alloc_free_balance(self):
        a = SlabAllocator(small_config())
        hs = [a.alloc(PoolKind.FAST, CHUNK) for _ in range(3)]
        hs.append(a.alloc(PoolKind.SLOW, CHUNK, 2))
        a.audit()
        assert a.fast_used == 3 * CHUNK
        assert a.slow_used == 2 * CHUNK
        for h in hs:
            a.free(h)
        a.audit()
        assert a.fast_used == 0 and a.slow_used == 0 and a.live_count == 0

    def test_forced_spill_counted_and_capped(self):
        # general region = 9 chunks (10 minus 10% reserved)
        a = SlabAllocator(small_config())
        got = [a.alloc(PoolKind.FAST, CHUNK) for _ in range(12)]
        fast = [h for h in got if h.pool is PoolKind.FAST]
        slow = [h for h in got if h.pool is PoolKind.SLOW]
        assert len(fast) == 9 and len(slow) == 3
        assert a.spill_count == 3
        assert a.fast_used <= small_config().fast_capacity_bytes

    def test_reserved_region_separate(self):
        a = SlabAllocator(small_config())
        # reserved = 1 chunk worth (10% of 10 chunks = 64KiB floor)
        h1 = a.alloc(PoolKind.FAST, CHUNK, reserved=True)
        assert h1.pool is PoolKind.FAST and h1.reserved
        h2 = a.alloc(PoolKind.FAST, CHUNK, reserved=True)
        assert h2.pool is PoolKind.SLOW  # reserved exhausted: spill
        assert a.spill_count == 1
        # general region untouched by reserved allocations
        assert a.fast_general_used == 0

    def test_unknown_size_class_rejected(self):
        a = SlabAllocator(small_config())
        with pytest.raises(ConfigError):
            a.alloc(PoolKind.FAST, 12345)

    def test_double_free_raises(self):
        a = SlabAllocator(small_config())
        h = a.alloc(PoolKind.SLOW, CHUNK)
        a.free(h)
        with pytest.raises(AccountingError):
            a.free(h)

    def test_random_ops_never_exceed_capacity(self):
        rng = np.random.default_rng(3)
        cfg = small_config()
        a = SlabAllocator(cfg)
        live = []
        for _ in range(2000):
            if live and rng.random() < 0.45:
                a.free(live.pop(rng.integers(len(live))))
            else:
                live.append(a.alloc(PoolKind.FAST, CHUNK,
                                    int(rng.integers(1, 4))))
            assert a.fast_used <= cfg.fast_capacity_bytes
        a.audit()


class TestBundleTable:
    def make(self):
        mem = HybridMemory(small_config())
        rows = np.arange(30, dtype=np.uint64).reshape(10, 3)
        b = mem.register_bundle(rows, Schema(3, 2))
        return mem, b

    def test_producer_pin_then_reclaim(self):
        mem, b = self.make()
        assert mem.refcount(b.bundle_id) == (0, 1)
        assert mem.is_live(b.bundle_id)
        mem.unpin(b.bundle_id)
        assert not mem.is_live(b.bundle_id)
        assert mem.allocator.slow_used == 0

    def test_links_keep_bundle_alive(self):
        mem, b = self.make()
        mem.retain(b.bundle_id)
        mem.unpin(b.bundle_id)
        assert mem.is_live(b.bundle_id)
        mem.release(b.bundle_id)
        assert not mem.is_live(b.bundle_id)

    def test_use_after_free_raises(self):
        mem, b = self.make()
        mem.unpin(b.bundle_id)
        with pytest.raises(AccountingError):
            mem.retain(b.bundle_id)

    def test_underflow_raises(self):
        mem, b = self.make()
        with pytest.raises(AccountingError):
            mem.release(b.bundle_id)

    def test_audit_clean(self):
        mem, b = self.make()
        mem.audit()


class TestDereferenceChokepoint:
    def make(self):
        mem = HybridMemory(small_config())
        rows = np.array([[k, k * 10, k * 100] for k in range(8)], np.uint64)
        b = mem.register_bundle(rows, Schema(3, 2))
        from kpstream.model import pack_refs
        refs = pack_refs(b.bundle_id, np.arange(8, dtype=np.uint64))
        return mem, b, refs

    def test_gather_counts_derefs(self):
        mem, b, refs = self.make()
        before = mem.monitors.deref_count
        vals = mem.gather(refs[2:5], 1)
        np.testing.assert_array_equal(vals, [20, 30, 40])
        assert mem.monitors.deref_count - before == 3

    def test_shadow_write_then_read(self):
        mem, b, refs = self.make()
        mem.write_shadow(refs[:3], 0, np.array([77, 88, 99], np.uint64))
        np.testing.assert_array_equal(mem.gather(refs[:4], 0), [77, 88, 99, 3])
        # sealed payload untouched
        assert b.records[0, 0] == 0

    def test_gather_rows_applies_shadow(self):
        mem, b, refs = self.make()
        mem.write_shadow(refs[1:2], 1, np.array([555], np.uint64))
        rows = mem.gather_rows(refs[:2])
        np.testing.assert_array_equal(rows[0], [0, 0, 0])
        np.testing.assert_array_equal(rows[1], [1, 555, 100])

    def test_gather_across_bundles(self):
        mem = HybridMemory(small_config())
        from kpstream.model import pack_refs
        b1 = mem.register_bundle(np.full((4, 2), 1, np.uint64), Schema(2, 1))
        b2 = mem.register_bundle(np.full((4, 2), 2, np.uint64), Schema(2, 1))
        refs = np.concatenate([
            pack_refs(b1.bundle_id, np.arange(4, dtype=np.uint64)),
            pack_refs(b2.bundle_id, np.arange(4, dtype=np.uint64)),
        ])
        np.testing.assert_array_equal(mem.gather(refs, 0),
                                      [1, 1, 1, 1, 2, 2, 2, 2])


class TestMonitorsAndSampling:
    def test_interval_fraction_resets(self):
        mem = HybridMemory(small_config(slow_bandwidth_bytes_per_interval=1000))
        mem.monitors.record_traffic(PoolKind.SLOW, 500)
        s = mem.sample()
        assert s.slow_fraction == 0.5
        s2 = mem.sample()
        assert s2.slow_fraction == 0.0
        assert mem.monitors.slow_total == 500

    def test_fast_fraction_tracks_allocator(self):
        cfg = small_config()
        mem = HybridMemory(cfg)
        h = mem.allocator.alloc(PoolKind.FAST, CHUNK, 5)
        assert mem.sample().fast_fraction == pytest.approx(0.5)
        mem.allocator.free(h)
        assert mem.sample().fast_fraction == 0.0

    def test_allocate_kpa_spills_when_knob_wants_full_fast(self):
        cfg = small_config(fast_capacity_bytes=2 * CHUNK, fast_reserved_fraction=0.5)
        mem = HybridMemory(cfg)  # general region: 1 chunk
        h1 = mem.allocate_kpa(100, ImpactTag.LOW, 0.0)
        assert h1.pool is PoolKind.FAST
        h2 = mem.allocate_kpa(100, ImpactTag.LOW, 0.0)
        assert h2.pool is PoolKind.SLOW
        assert mem.allocator.spill_count == 1
        # knob already says slow: no spill counted
        mem.knob = KnobState(0.0, 1.0)
        h3 = mem.allocate_kpa(100, ImpactTag.LOW, 0.5)
        assert h3.pool is PoolKind.SLOW
        assert mem.allocator.spill_count == 1

    def test_urgent_uses_reserved_then_spills(self):
        cfg = small_config(fast_capacity_bytes=10 * CHUNK, fast_reserved_fraction=0.10)
        mem = HybridMemory(cfg)
        h1 = mem.allocate_kpa(100, ImpactTag.URGENT, 0.0)
        assert h1.pool is PoolKind.FAST and h1.reserved
        h2 = mem.allocate_kpa(100, ImpactTag.URGENT, 0.0)
        assert h2.pool is PoolKind.SLOW
        assert mem.allocator.spill_count == 1

    def test_kpa_bytes_rounds_to_chunks(self):
        mem = HybridMemory(small_config())
        assert mem.kpa_bytes(1) == CHUNK
        assert mem.kpa_bytes(4096) == CHUNK          # 4096*16 = 64KiB exactly
        assert mem.kpa_bytes(4097) == 2 * CHUNK
