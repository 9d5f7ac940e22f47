import struct
import threading

import numpy as np
import pytest

from pathfilter.keys import CellHashes, CellKey, FilterConfig, hashes
from pathfilter.table import (EMPTY_TAG, Outcome, VoxelTable, fixed_to_float,
                              pack_priority, quantize_fixed)


def h(i, f):
    return (np.array([i], np.uint64), np.array([f], np.uint32))


def rgb(*v):
    return np.array([v], np.float64)


class TestAccumulate:
    def test_single_insert(self):
        t = VoxelTable(64)
        status, slots, _ = t.accumulate_batch(*h(5, 77), rgb(1.0, 2.0, 3.0), 0)
        assert status[0] == 0
        s = slots[0]
        assert t.counts[s] == 1
        assert np.array_equal(t.sums[s], quantize_fixed(np.array([1.0, 2.0, 3.0])))
        mean, count = t.lookup(CellHashes(5, 77))
        assert count == 1
        assert np.array_equal(mean, np.array([1.0, 2.0, 3.0]))

    def test_thousand_identical_sequential(self):
        t = VoxelTable(64)
        idx = np.full(1000, 5, np.uint64)
        fp = np.full(1000, 77, np.uint32)
        vals = np.ones((1000, 3))
        t.accumulate_batch(idx, fp, vals, 0)
        mean, count = t.lookup(CellHashes(5, 77))
        assert count == 1000
        assert np.array_equal(mean, np.ones(3))
        assert np.array_equal(t.total_sums(), np.full(3, 1000 * 65536))

    def test_thousand_identical_parallel(self):
        t = VoxelTable(64)
        def worker(k):
            idx = np.full(250, 5, np.uint64)
            fp = np.full(250, 77, np.uint32)
            t.accumulate_batch(idx, fp, np.ones((250, 3)), 0)
        threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        mean, count = t.lookup(CellHashes(5, 77))
        assert count == 1000
        assert np.array_equal(mean, np.ones(3))

    def test_index_collision_resolved_by_probing(self):
        t = VoxelTable(64)
        _, s1, _ = t.accumulate_batch(*h(9, 100), rgb(1, 1, 1), 0)
        _, s2, p2 = t.accumulate_batch(*h(9, 200), rgb(2, 2, 2), 0)
        assert s2[0] == (s1[0] + 1) % 64
        assert p2[0] == 2
        assert t.lookup(CellHashes(9, 100))[0][0] == 1.0
        assert t.lookup(CellHashes(9, 200))[0][0] == 2.0

    def test_rejects_bad_contributions(self):
        t = VoxelTable(64)
        with pytest.raises(ValueError):
            t.accumulate_batch(*h(1, 2), rgb(-1.0, 0, 0), 0)
        with pytest.raises(ValueError):
            t.accumulate_batch(*h(1, 2), rgb(np.nan, 0, 0), 0)

    def test_probe_limit_exceeded_leaves_table_unchanged(self):
        t = VoxelTable(64, probe_limit=4)
        for f in range(1, 5):
            t.accumulate_batch(*h(3, f), rgb(1, 1, 1), 0)
        before = (t.tags.copy(), t.sums.copy(), t.counts.copy())
        status, slots, probe_len = t.accumulate_batch(*h(3, 99), rgb(5, 5, 5), 0)
        assert status[0] == 2
        assert slots[0] == -1
        assert probe_len[0] == 4
        assert np.array_equal(t.tags, before[0])
        assert np.array_equal(t.sums, before[1])
        assert np.array_equal(t.counts, before[2])

    def test_probe_never_exceeds_limit(self):
        t = VoxelTable(128, probe_limit=7)
        r = np.random.default_rng(0)
        idx = r.integers(0, 2**63, 2000).astype(np.uint64)
        fp = r.integers(1, 2**32, 2000).astype(np.uint32)
        _, _, probe_len = t.accumulate_batch(idx, fp, np.ones((2000, 3)), 0)
        assert probe_len.max() <= 7


class TestConservation:
    @pytest.mark.parametrize("seed", range(10))
    def test_fixed_point_exact(self, seed):
        r = np.random.default_rng(seed)
        n = 5000
        t = VoxelTable(1024, probe_limit=8)
        idx = r.integers(0, 2**63, n).astype(np.uint64)
        idx[n // 2:] = idx[: n // 2]  # force collisions and repeats
        fp = r.integers(1, 2**32, n).astype(np.uint32)
        fp[n // 2:] = fp[: n // 2]
        vals = r.uniform(0, 10, (n, 3))
        bounds = np.linspace(0, n, 5).astype(int)
        results = [None] * 4
        def worker(k):
            lo, hi = bounds[k], bounds[k + 1]
            results[k] = t.accumulate_batch(idx[lo:hi], fp[lo:hi], vals[lo:hi], 0)
        threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        status = np.concatenate([res[0] for res in results])
        ok = status != 2
        assert t.total_counts() == int(ok.sum())
        assert np.array_equal(t.total_sums(), quantize_fixed(vals[ok]).sum(axis=0))

    def test_float_mode_tolerance(self):
        r = np.random.default_rng(42)
        n = 4000
        t = VoxelTable(2048, sum_mode="float")
        idx = r.integers(0, 2**63, n).astype(np.uint64)
        fp = r.integers(1, 2**32, n).astype(np.uint32)
        vals = r.uniform(0, 10, (n, 3))
        status, _, _ = t.accumulate_batch(idx, fp, vals, 0)
        ok = status != 2
        np.testing.assert_allclose(t.total_sums(), vals[ok].sum(axis=0), rtol=1e-6)


class TestLookup:
    def test_absent_key(self):
        t = VoxelTable(64)
        assert t.lookup(CellHashes(123, 456)) is None

    def test_never_divides_by_zero_after_generation_shift(self):
        t = VoxelTable(64)
        t.accumulate_batch(*h(5, 9), rgb(1, 1, 1), 0)
        t.begin_frame(1, FilterConfig(capacity=64))
        # live generation empty now; lookup reports absence rather than 0/0
        assert t.lookup(CellHashes(5, 9)) is None


class TestProbeScan:
    def test_equality_predicate_matches_lookup(self):
        t = VoxelTable(64)
        t.accumulate_batch(*h(4, 50), rgb(2, 2, 2), 0)
        out = t.probe_scan(CellHashes(4, 50), lambda f: f == 50)
        assert len(out) == 1
        assert np.array_equal(out[0][0], np.full(3, 2.0))
        assert t.probe_scan(CellHashes(4, 51), lambda f: f == 51) == []

    def test_adjacent_variants_both_returned(self):
        t = VoxelTable(64)
        base = 0x1000
        t.accumulate_batch(*h(7, (base << 6) | 3), rgb(1, 0, 0), 0)
        t.accumulate_batch(*h(7, (base << 6) | 9), rgb(0, 1, 0), 0)
        out = t.probe_scan(CellHashes(7, (base << 6) | 3), lambda f: f >> 6 == base)
        assert len(out) == 2

    def test_planted_variants_recovered_exactly(self):
        r = np.random.default_rng(2)
        t = VoxelTable(256, probe_limit=16)
        home = 40
        spatial = 0x2222
        planted = [(spatial << 6) | b for b in (1, 5, 9, 33)]
        for fpv in planted:
            t.accumulate_batch(*h(home, fpv), rgb(1, 1, 1), 0)
        # decoys: same home slot, different spatial bits
        for k in range(6):
            t.accumulate_batch(*h(home, (0x3000 + k) << 6 | 2), rgb(9, 9, 9), 0)
        out = t.probe_scan(CellHashes(home, planted[0]), lambda f: f >> 6 == spatial)
        assert len(out) == len(planted)
        for mean, count in out:
            assert count == 1 and mean[0] == 1.0


class TestPriorityAndEviction:
    def test_pack_priority_ordering(self):
        # more samples and newer touch both lower the priority value
        assert pack_priority(np.array(10), np.array(1)) < pack_priority(np.array(2), np.array(1))
        assert pack_priority(np.array(2), np.array(1)) < pack_priority(np.array(2), np.array(9))
        assert pack_priority(np.array(255), np.array(0)) < pack_priority(np.array(0), np.array(0))
        # empty tag loses to every occupied tag
        assert (int(pack_priority(np.array(0), np.array(200))) << 32) | 1 < EMPTY_TAG

    def test_fresh_table_nothing_cleared(self):
        cfg = FilterConfig(capacity=64, evict_horizon=8)
        t = VoxelTable.from_config(cfg)
        for f in range(1, 6):
            t.accumulate_batch(*h(f, f), rgb(1, 1, 1), 0)
        t.begin_frame(1, cfg)
        assert t.horizon_clears == 0
        assert t.occupancy() == 5 / 64

    def test_stale_cell_cleared_and_slot_reused(self):
        cfg = FilterConfig(capacity=64, evict_horizon=8)
        t = VoxelTable.from_config(cfg)
        _, slots, _ = t.accumulate_batch(*h(10, 1), rgb(1, 1, 1), 0)
        stale_slot = slots[0]
        for f in range(1, 10):
            t.begin_frame(f, cfg)  # age it past the horizon
        assert t.tags[stale_slot] == EMPTY_TAG
        _, slots2, _ = t.accumulate_batch(*h(10, 2), rgb(2, 2, 2), 9)
        assert slots2[0] == stale_slot

    def test_eviction_prefers_stale_sparse_cells(self):
        cfg = FilterConfig(capacity=64, probe_limit=4, evict_horizon=100,
                           evict_min_age=3)
        t = VoxelTable.from_config(cfg)
        # fill one probe window: dense, sparse, dense, dense
        counts = [5, 1, 5, 5]
        for j, c in enumerate(counts):
            for _ in range(c):
                t.accumulate_batch(*h(20, 100 + j), rgb(1, 1, 1), 0)
        for f in range(1, 5):
            t.begin_frame(f, cfg)  # all cells now age 4, none horizon-cleared
        status, slots, _ = t.accumulate_batch(*h(20, 999), rgb(3, 3, 3), 4)
        assert Outcome(int(status[0])) is Outcome.EVICTED_THEN_ACCUMULATED
        # victim is the sparsest cell in the window (original fingerprint 101)
        home = 20 % 64
        assert slots[0] == home + 1
        assert len(t.eviction_events) == 1
        assert t.lookup(CellHashes(20, 999))[1] == 1

    def test_no_eviction_of_recent_cells(self):
        cfg = FilterConfig(capacity=64, probe_limit=3, evict_horizon=100,
                           evict_min_age=3)
        t = VoxelTable.from_config(cfg)
        for j in range(3):
            t.accumulate_batch(*h(8, 300 + j), rgb(1, 1, 1), 0)
        t.begin_frame(1, cfg)
        for j in range(3):  # touch all cells this frame: age bits protect next frame
            t.accumulate_batch(*h(8, 300 + j), rgb(1, 1, 1), 1)
        t.begin_frame(2, cfg)
        status, _, _ = t.accumulate_batch(*h(8, 999), rgb(1, 1, 1), 2)
        assert Outcome(int(status[0])) is Outcome.PROBE_LIMIT_EXCEEDED
        assert len(t.eviction_events) == 0


class TestTemporalFold:
    def test_integrate_fold_matches_one_shot(self):
        cfg = FilterConfig(capacity=64, temporal_mode="integrate")
        split = VoxelTable.from_config(cfg)
        for f in range(4):
            split.begin_frame(f, cfg)
            split.accumulate_batch(*h(3, 9), rgb(0.5, 1.0, 1.5), f)
        whole = VoxelTable.from_config(cfg)
        whole.begin_frame(0, cfg)
        for _ in range(4):
            whole.accumulate_batch(*h(3, 9), rgb(0.5, 1.0, 1.5), 0)
        es, ec = split.effective("integrate")
        ws, wc = whole.effective("integrate")
        assert np.array_equal(es, ws)
        assert np.array_equal(ec, wc)

    def test_sample_cap_limits_history(self):
        cfg = FilterConfig(capacity=64, temporal_mode="integrate", sample_cap=10)
        t = VoxelTable.from_config(cfg)
        idx = np.full(4, 3, np.uint64)
        fp = np.full(4, 9, np.uint32)
        for f in range(5):
            t.begin_frame(f, cfg)
            t.accumulate_batch(idx, fp, np.ones((4, 3)), f)
        t.begin_frame(5, cfg)
        assert t.hist_counts.max() == 10
        slot = int(np.nonzero(t.hist_counts)[0][0])
        np.testing.assert_allclose(fixed_to_float(t.hist_sums[slot]), 10.0, rtol=1e-4)


class TestShadowAudit:
    def test_no_false_merges_recorded(self):
        t = VoxelTable(1 << 14)
        t.shadow = {}
        r = np.random.default_rng(1)
        for i in range(3000):
            key = CellKey(int(r.integers(-50, 50)), int(r.integers(-50, 50)),
                          int(r.integers(-50, 50)), int(r.integers(0, 4)), 0)
            t.accumulate(hashes(key), np.abs(r.uniform(0, 1, 3)), 0, key=key)
        assert t.audit_no_false_merge() == 0


class TestDumps:
    def test_csv_and_binary_roundtrip(self, tmp_path):
        t = VoxelTable(64)
        t.accumulate_batch(*h(5, 9), rgb(1.5, 0.25, 0.125), 3)
        csv = tmp_path / "t.csv"
        t.export_csv(csv)
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "slot,fingerprint,count,sum_r,sum_g,sum_b"
        slot, fp, count, r, g, b = lines[1].split(",")
        assert (int(fp), int(count), float(r)) == (9, 1, 1.5)
        binf = tmp_path / "t.bin"
        t.dump(binf)
        raw = binf.read_bytes()
        assert raw[:5] == b"PFVT\x01"
        cap, mode, frame = struct.unpack_from("<QBQ", raw, 5)
        assert (cap, mode) == (64, 0)
        tags = np.frombuffer(raw, np.uint64, 64, offset=5 + 17)
        assert (tags != EMPTY_TAG).sum() == 1
