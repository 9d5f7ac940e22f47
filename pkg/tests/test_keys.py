import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfilter import rng
from pathfilter.keys import (CellKey, FilterConfig, finalize_fingerprint,
                             hash_arrays, hashes, jitter_position,
                             level_of_detail, make_cell_key, make_key_arrays,
                             normal_bin, tangent_basis)
from pathfilter.tracer import VertexDescriptor


def vertex(position, normal=(0.0, 0.0, 1.0), omega_r=(0.0, 0.0, 1.0),
           layer=0, distance=10.0):
    return VertexDescriptor(np.asarray(position, float), np.asarray(normal, float),
                            np.asarray(omega_r, float), np.zeros(3), np.ones(3),
                            0, 0, layer, distance)


class TestFilterConfig:
    def test_capacity_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            FilterConfig(capacity=1000)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            FilterConfig(temporal_mode="nope")
        with pytest.raises(ValueError):
            FilterConfig(sum_mode="nope")

    def test_for_camera_sets_footprint(self):
        cfg = FilterConfig().for_camera(fov=1.0, image_height=100)
        assert cfg.footprint_scale == pytest.approx(2.0 * math.tan(0.5) / 100)


class TestLevelOfDetail:
    def test_unit_ratio_is_level_zero(self):
        cfg = FilterConfig(s_pixels=4.0, base_voxel=0.02, footprint_scale=0.001)
        d = cfg.base_voxel / (cfg.footprint_scale * cfg.s_pixels)
        assert level_of_detail(d, cfg) == 0

    def test_doubling_distance_adds_one_level(self):
        cfg = FilterConfig(s_pixels=4.0, base_voxel=0.02, footprint_scale=0.001)
        d = 1.01 * cfg.base_voxel / (cfg.footprint_scale * cfg.s_pixels)
        for k in range(1, 6):
            assert level_of_detail(d * 2 ** k, cfg) == level_of_detail(d, cfg) + k

    def test_matches_direct_formula(self):
        cfg = FilterConfig(s_pixels=7.3, base_voxel=0.013, footprint_scale=0.004)
        r = np.random.default_rng(5)
        for d in r.uniform(0.01, 1e4, 200):
            ratio = d * cfg.footprint_scale * cfg.s_pixels / cfg.base_voxel
            want = min(max(int(math.floor(math.log2(ratio))), 0), 31)
            assert level_of_detail(float(d), cfg) == want

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            level_of_detail(0.0, FilterConfig())

    @given(st.floats(min_value=1e-3, max_value=1e6),
           st.floats(min_value=1.0, max_value=100.0))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_distance(self, d, factor):
        cfg = FilterConfig(s_pixels=8.0, base_voxel=0.01, footprint_scale=0.002)
        assert level_of_detail(d * factor, cfg) >= level_of_detail(d, cfg)


class TestJitter:
    def test_disabled_is_identity(self):
        cfg = FilterConfig(jitter=False)
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(jitter_position(x, np.array([0, 0, 1.0]), 3, (0.7, 0.3), cfg), x)

    def test_zero_draw_is_identity(self):
        cfg = FilterConfig(jitter=True)
        x = np.array([1.0, 2.0, 3.0])
        out = jitter_position(x, np.array([0.0, 0.0, 1.0]), 0, (0.0, 0.25), cfg)
        assert np.array_equal(out, x)

    def test_offsets_tangent_and_bounded(self):
        cfg = FilterConfig(jitter=True, base_voxel=0.05)
        r = np.random.default_rng(11)
        n = r.normal(size=3)
        n /= np.linalg.norm(n)
        x = np.array([0.3, -1.2, 4.0])
        level = 2
        voxel = cfg.voxel_size(level)
        offsets = []
        for _ in range(2000):
            out = jitter_position(x, n, level, r.uniform(size=2), cfg)
            off = out - x
            offsets.append(off)
            assert abs(off @ n) <= 1e-6 * max(np.linalg.norm(off), 1e-30)
            assert np.linalg.norm(off) <= 0.5 * voxel + 1e-12
        assert np.linalg.norm(np.mean(offsets, axis=0)) < 0.05 * voxel

    def test_mean_offset_statistics(self):
        # 1e5 draws: empirical mean -> 0 within 3 sigma per component
        cfg = FilterConfig(jitter=True, base_voxel=1.0)
        n = np.array([0.0, 0.0, 1.0])
        u = np.random.default_rng(3).uniform(size=(100_000, 2))
        offs = np.array([jitter_position(np.zeros(3), n, 0, d, cfg) for d in u])
        # uniform disc radius 1/2: per-axis std = r / 2 = 0.25
        sigma_mean = 0.25 / math.sqrt(len(u))
        assert np.all(np.abs(offs.mean(axis=0))[:2] <= 3 * sigma_mean)
        assert np.all(np.linalg.norm(offs, axis=1) <= 0.5)

    def test_tangent_basis_orthonormal(self):
        r = np.random.default_rng(8)
        for _ in range(100):
            n = r.normal(size=3)
            n /= np.linalg.norm(n)
            t1, t2 = tangent_basis(n)
            for a, b in ((t1, t2), (t1, n), (t2, n)):
                assert abs(a @ b) < 1e-9
            assert abs(np.linalg.norm(t1) - 1.0) < 1e-9


class TestCellKeys:
    def test_floor_quantization_example(self):
        cfg = FilterConfig(jitter=False, base_voxel=0.5, footprint_scale=1e-9,
                           include_normal=False)
        key = make_cell_key(vertex((3.2, -1.4, 0.5)), cfg)
        assert (key.qx, key.qy, key.qz, key.level) == (6, -3, 1, 0)

    def test_opposite_normals_split_voxel(self):
        cfg = FilterConfig(jitter=False, include_normal=True, base_voxel=0.5,
                           footprint_scale=1e-9)
        a = make_cell_key(vertex((0.1, 0.1, 0.1), normal=(0, 0, 1.0)), cfg)
        b = make_cell_key(vertex((0.1, 0.1, 0.1), normal=(0, 0, -1.0)), cfg)
        assert a != b
        assert (a.qx, a.qy, a.qz, a.level) == (b.qx, b.qy, b.qz, b.level)

    def test_incident_angle_bin_only_for_glossy_layer(self):
        cfg = FilterConfig(jitter=False, include_incident_angle=True,
                           include_normal=False, base_voxel=0.5, footprint_scale=1e-9)
        wr = (0.0, 0.6, 0.8)
        diffuse = make_cell_key(vertex((0, 0, 0.2), omega_r=wr, layer=0), cfg)
        glossy = make_cell_key(vertex((0, 0, 0.2), omega_r=wr, layer=1), cfg)
        assert diffuse.aux == 0
        assert glossy.aux != 0

    def test_layer_flag_splits_keys(self):
        cfg = FilterConfig(jitter=False, include_layer=True, include_normal=False,
                           base_voxel=0.5, footprint_scale=1e-9)
        a = make_cell_key(vertex((0, 0, 0.2), layer=0), cfg)
        b = make_cell_key(vertex((0, 0, 0.2), layer=1), cfg)
        assert a != b

    def test_equality_is_an_equivalence_relation(self):
        keys = st.builds(CellKey,
                         st.integers(-2**40, 2**40), st.integers(-2**40, 2**40),
                         st.integers(-2**40, 2**40), st.integers(0, 31),
                         st.integers(0, 2**32 - 1))

        @given(keys, keys, keys)
        @settings(max_examples=300, deadline=None)
        def check(a, b, c):
            assert a == a
            assert (a == b) == (b == a)
            if a == b and b == c:
                assert a == c
        check()

    def test_different_levels_never_equal(self):
        a = CellKey(1, 2, 3, 4, 0)
        assert a != CellKey(1, 2, 3, 5, 0)

    def test_vectorized_keys_match_scalar(self, ):
        cfg = FilterConfig(jitter=False, include_normal=True,
                           base_voxel=0.02, footprint_scale=0.003)
        r = np.random.default_rng(17)
        n = 500
        pos = r.uniform(-30, 30, (n, 3))
        nrm = r.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        dist = r.uniform(0.5, 300.0, n)
        layer = r.integers(0, 2, n)
        keya = make_key_arrays(pos, nrm, nrm, layer, dist, cfg)
        for i in range(0, n, 29):
            v = VertexDescriptor(pos[i], nrm[i], nrm[i], np.zeros(3), np.ones(3),
                                 0, 0, int(layer[i]), float(dist[i]))
            k = make_cell_key(v, cfg)
            assert (k.qx, k.qy, k.qz, k.level, k.aux) == (
                int(keya.qx[i]), int(keya.qy[i]), int(keya.qz[i]),
                int(keya.level[i]), int(keya.aux[i]))
            h = hashes(k)
            assert h.index == int(keya.index[i])
            assert h.fingerprint == int(keya.fingerprint[i])


GOLDEN_VECTORS = [
    (CellKey(0, 0, 0, 0, 0), 0x2B875FE90B264F7C, 0x88E2E49F),
    (CellKey(1, 0, 0, 0, 0), 0x8B9EAAC55FD6045E, 0x3C966E6F),
    (CellKey(-1, 2, -3, 0, 0), 0x6C23EDB01E685DFC, 0xCF566B5E),
    (CellKey(6, -3, 1, 0, 0), 0x85F8CCE9FA9EAD67, 0xFECBB755),
    (CellKey(123456, -654321, 42, 7, 0), 0x47B6C4C058225B54, 0x69258E3A),
    (CellKey(0, 0, 0, 31, 0), 0x7379FD7CE8144994, 0xCD3BFD50),
    (CellKey(5, 5, 5, 3, 16909060), 0x03E6656A1B359254, 0xC4EA312A),
    (CellKey(-1099511627776, 1099511627776, -7, 12, 63),
     0x87CBB877676F99D4, 0x3B89422E),
]


class TestHashes:
    def test_purity(self):
        k = CellKey(3, -7, 11, 2, 9)
        assert hashes(k) == hashes(k)

    def test_golden_vectors_frozen(self):
        for key, index, fp in GOLDEN_VECTORS:
            h = hashes(key)
            assert h.index == index, key
            assert h.fingerprint == fp, key

    def test_sentinel_remap(self):
        assert finalize_fingerprint(0) == 1
        assert finalize_fingerprint(1) == 1
        assert finalize_fingerprint(0, normal_fp_bin=0) == 1
        # a fingerprint whose structural shift drops all set bits remaps too
        assert finalize_fingerprint(0x0C000000 << 6 & 0xFFFFFFFF) != 0

    def test_never_sentinel_in_bulk(self):
        r = np.random.default_rng(23)
        n = 1_000_000
        idx, fp = hash_arrays(r.integers(-2**40, 2**40, n), r.integers(-2**40, 2**40, n),
                              r.integers(-2**40, 2**40, n), r.integers(0, 32, n),
                              r.integers(0, 2**32, n).astype(np.uint64))
        assert not np.any(fp == 0)

    def test_structured_fingerprint_mode(self):
        k = CellKey(4, 4, 4, 1, 0)
        a = hashes(k, normal_fp_bin=5)
        b = hashes(k, normal_fp_bin=9)
        assert a.fingerprint != b.fingerprint
        assert a.fingerprint >> 6 == b.fingerprint >> 6
        assert (a.fingerprint & 0x3F) == 5

    def test_slot_distribution_fits_poisson(self):
        # occupancy of (index mod capacity) over 1e6 structured keys
        scipy_stats = pytest.importorskip("scipy.stats")
        n, capacity = 1_000_000, 1 << 20
        side = 100
        g = np.arange(n, dtype=np.int64)
        qx, qy, qz = g % side, (g // side) % side, g // (side * side)
        idx, _ = hash_arrays(qx, qy, qz, np.zeros(n, np.int64), np.zeros(n, np.uint64))
        slots = (idx % np.uint64(capacity)).astype(np.int64)
        load = np.bincount(slots, minlength=capacity)
        occupancy = np.bincount(load)
        lam = n / capacity
        kmax = max(6, len(occupancy) - 1)
        pmf = np.array([math.exp(-lam) * lam ** k / math.factorial(k)
                        for k in range(kmax + 1)])
        observed = np.zeros(kmax + 1)
        observed[: len(occupancy)] = occupancy
        # merge the sparse tail so expected counts stay above ~5
        expected = pmf * capacity
        cut = np.searchsorted(np.cumsum(expected[::-1]), 5.0)
        cut = kmax - cut
        obs = np.concatenate([observed[:cut], [observed[cut:].sum()]])
        exp = np.concatenate([expected[:cut], [expected[cut:].sum()]])
        exp *= obs.sum() / exp.sum()
        stat, p = scipy_stats.chisquare(obs, exp)
        assert p > 0.01, (stat, p, obs, exp)

    def test_avalanche(self):
        base = hashes(CellKey(10, 20, 30, 4, 7))
        flip = hashes(CellKey(11, 20, 30, 4, 7))
        assert bin(base.index ^ flip.index).count("1") > 16
