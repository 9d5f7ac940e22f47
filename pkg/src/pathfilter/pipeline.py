"""Per-frame orchestration of the two-phase filtering algorithm.

Phase one traces paths (tracer module); phase two accumulates every selected
vertex into the fine (and optionally coarse) voxel table, then resolves each
vertex to a filtered mean with a total fallback ladder:

    1. fine voxel with at least `low_count_threshold` samples
    2. 3x3x3 neighborhood pool reaching the threshold
    3. coarse voxel reaching the threshold
    4. whichever of neighborhood/coarse has any samples at all
    5. the vertex's own unfiltered contribution

The filtered image is the per-path base radiance plus throughput times the
chosen mean, averaged over samples per pixel.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng, temporal
from .keys import FilterConfig, KeyArrays, hash_arrays, make_key_arrays
from .scene import Scene
from .table import VoxelTable
from .tracer import TraceOptions, TraceResult, VertexStream, reevaluate, trace

SOURCE_FINE = 0
SOURCE_NEIGHBORHOOD = 1
SOURCE_COARSE = 2
SOURCE_UNFILTERED = 3


@dataclass
class ResolveReport:
    source: np.ndarray          # per-vertex source code
    image: np.ndarray           # filtered (H, W, 3)
    means: np.ndarray | None = None  # per-vertex chosen mean

    @property
    def counts(self) -> dict[str, int]:
        return {"fine_voxel": int((self.source == SOURCE_FINE).sum()),
                "neighborhood": int((self.source == SOURCE_NEIGHBORHOOD).sum()),
                "coarse_voxel": int((self.source == SOURCE_COARSE).sum()),
                "unfiltered": int((self.source == SOURCE_UNFILTERED).sum())}


@dataclass
class FrameStats:
    frame: int = 0
    n_vertices: int = 0
    probe_failures: int = 0
    coarse_probe_failures: int = 0
    collisions: int = 0
    evictions: int = 0
    horizon_clears: int = 0
    occupancy_fine: float = 0.0
    occupancy_coarse: float = 0.0
    probe_histogram: dict[int, int] = field(default_factory=dict)
    source_counts: dict[str, int] = field(default_factory=dict)
    time_trace: float = 0.0
    time_accumulate: float = 0.0
    time_resolve: float = 0.0
    time_total: float = 0.0

    def lines(self) -> list[str]:
        out = [f"frame={self.frame}", f"vertices={self.n_vertices}",
               f"probe_failures={self.probe_failures}",
               f"coarse_probe_failures={self.coarse_probe_failures}",
               f"collisions={self.collisions}", f"evictions={self.evictions}",
               f"horizon_clears={self.horizon_clears}",
               f"occupancy_fine={self.occupancy_fine:.6f}",
               f"occupancy_coarse={self.occupancy_coarse:.6f}"]
        for k in sorted(self.probe_histogram):
            out.append(f"probe_hist_{k}={self.probe_histogram[k]}")
        for k, v in self.source_counts.items():
            out.append(f"source_{k}={v}")
        out += [f"time_trace={self.time_trace:.6f}",
                f"time_accumulate={self.time_accumulate:.6f}",
                f"time_resolve={self.time_resolve:.6f}",
                f"time_total={self.time_total:.6f}"]
        return out


@dataclass
class FrameState:
    """Persistent tables plus what re-evaluation needs from the last frame."""

    fine: VoxelTable
    coarse: VoxelTable | None
    frame: int = 0
    prev_vertices: VertexStream | None = None
    prev_fine_keys: KeyArrays | None = None
    prev_coarse_keys: KeyArrays | None = None
    prev_seed: int = 0
    prev_spp: int = 0

    @classmethod
    def from_config(cls, cfg: FilterConfig, backend: str | None = None) -> "FrameState":
        fine = VoxelTable.from_config(cfg, backend)
        coarse = VoxelTable.from_config(cfg, backend) if cfg.multi_level else None
        return cls(fine, coarse)


@dataclass
class FrameResult:
    filtered: np.ndarray
    unfiltered: np.ndarray
    stats: FrameStats
    report: ResolveReport
    trace_result: TraceResult
    fine_keys: KeyArrays
    coarse_keys: KeyArrays | None


def _jitter_draws(stream_tag: int, vertices: VertexStream, seed: int):
    pid = vertices.path_id
    u1 = rng.draw_unit_array(seed, stream_tag, pid, 0, 0)
    u2 = rng.draw_unit_array(seed, stream_tag, pid, 0, 1)
    return u1, u2


def vertex_keys(vertices: VertexStream, cfg: FilterConfig, seed: int,
                stream_tag: int = rng.STREAM_JITTER_ACCUM,
                level_delta: int = 0) -> KeyArrays:
    """Key arrays for a vertex stream with the given jitter stream."""
    u1 = u2 = None
    if cfg.jitter:
        u1, u2 = _jitter_draws(stream_tag, vertices, seed)
    return make_key_arrays(vertices.position, vertices.normal, vertices.omega_r,
                           vertices.layer_id, vertices.camera_distance,
                           cfg, u1, u2, level_delta)


def _accumulate_into(table: VoxelTable, keya: KeyArrays, contributions,
                     frame: int, threads: int):
    n = len(keya)
    if threads <= 1 or n < 4096:
        return table.accumulate_batch(keya.index, keya.fingerprint, contributions, frame)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(table.accumulate_batch, keya.index[lo:hi],
                            keya.fingerprint[lo:hi], contributions[lo:hi], frame)
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        parts = [f.result() for f in futs]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def accumulate_phase(vertices: VertexStream, cfg: FilterConfig, state: FrameState,
                     frame: int, seed: int, threads: int = 1):
    """Insert all selected vertices into the fine and coarse tables.

    Returns (fine keys, coarse keys, stats); probe failures become unfiltered
    fallbacks later, they are not errors.
    """
    stats = FrameStats(frame=frame, n_vertices=len(vertices))
    fine_keys = vertex_keys(vertices, cfg, seed)
    coarse_keys = None
    if len(vertices) == 0:
        return fine_keys, coarse_keys, stats
    status, _, probe_len = _accumulate_into(state.fine, fine_keys,
                                            vertices.contribution, frame, threads)
    stats.probe_failures = int((status == 2).sum())
    stats.collisions = int(probe_len.astype(np.int64).sum()) - len(vertices)
    hist = np.bincount(probe_len)
    stats.probe_histogram = {int(k): int(v) for k, v in enumerate(hist) if v and k}
    if state.coarse is not None:
        coarse_keys = vertex_keys(vertices, cfg, seed, level_delta=cfg.coarse_delta)
        cstatus, _, _ = _accumulate_into(state.coarse, coarse_keys,
                                         vertices.contribution, frame, threads)
        stats.coarse_probe_failures = int((cstatus == 2).sum())
    return fine_keys, coarse_keys, stats


def _neighbor_pool(table: VoxelTable, keya: KeyArrays, rows: np.ndarray,
                   eff_sum, eff_cnt):
    """Pooled (sum, count) over the 3x3x3 neighborhood of each row's voxel."""
    qx, qy, qz = keya.qx[rows], keya.qy[rows], keya.qz[rows]
    lvl, aux = keya.level[rows], keya.aux[rows]
    pool_sum = np.zeros((len(rows), 3), eff_sum.dtype)
    pool_cnt = np.zeros(len(rows), eff_cnt.dtype)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                idx, fp = hash_arrays(qx + dx, qy + dy, qz + dz, lvl, aux)
                slots = table.lookup_slots(idx, fp)
                ok = slots >= 0
                pool_sum[ok] += eff_sum[slots[ok]]
                pool_cnt[ok] += eff_cnt[slots[ok]]
    return pool_sum, pool_cnt


def _mean_rows(sums, cnts, fixed: bool) -> np.ndarray:
    denom = np.maximum(np.asarray(cnts, np.float64), 1e-300)
    if fixed:
        denom = denom * 65536.0
    return np.asarray(sums, np.float64) / denom[:, None]


def _stream_rows(vertices: VertexStream, rows: np.ndarray) -> VertexStream:
    return vertices.select(rows)


def resolve_phase(vertices: VertexStream, cfg: FilterConfig, state: FrameState,
                  frame: int, seed: int, spp: int, base_image: np.ndarray,
                  fine_keys: KeyArrays | None = None):
    """Per-vertex filtered means composited onto the base image.

    Requires a completed accumulate_phase for this frame (read-only table
    access from here on).  With jitter enabled the lookup keys use an
    independent jitter draw, per the kernel-approximation scheme.
    """
    h, w = base_image.shape[:2]
    n = len(vertices)
    source = np.full(n, SOURCE_UNFILTERED, np.uint8)
    if n == 0:
        return base_image.copy(), ResolveReport(source, base_image.copy(),
                                                    np.zeros((0, 3)))
    if cfg.jitter or fine_keys is None:
        lk = vertex_keys(vertices, cfg, seed, rng.STREAM_JITTER_LOOKUP)
    else:
        lk = fine_keys
    fixed = state.fine.sum_mode == "fixed"
    eff_sum, eff_cnt = state.fine.effective(cfg.temporal_mode, cfg.ema_alpha,
                                            cfg.delta_max)
    thr = max(cfg.low_count_threshold, 1)
    chosen = np.array(vertices.contribution, np.float64, copy=True)

    slots = state.fine.lookup_slots(lk.index, lk.fingerprint)
    found = slots >= 0
    cnt_fine = np.zeros(n, np.float64)
    cnt_fine[found] = eff_cnt[slots[found]]
    ok_fine = cnt_fine >= thr

    # rung 2/4a: neighborhood pool for everything below the fine threshold
    rest = np.nonzero(~ok_fine)[0]
    cnt_nb = np.zeros(n, np.float64)
    mean_nb = np.zeros((n, 3))
    if len(rest):
        nb_sum, nb_cnt = _neighbor_pool(state.fine, lk, rest, eff_sum, eff_cnt)
        cnt_nb[rest] = nb_cnt
        some = nb_cnt > 0
        mean_nb[rest[some]] = _mean_rows(nb_sum[some], nb_cnt[some], fixed)
    ok_nb = ~ok_fine & (cnt_nb >= thr)

    # rung 3/4b: coarse table for everything still unresolved
    cnt_co = np.zeros(n, np.float64)
    mean_co = np.zeros((n, 3))
    rest2 = np.nonzero(~ok_fine & ~ok_nb)[0]
    if len(rest2) and state.coarse is not None:
        sub = _stream_rows(vertices, rest2)
        tag = rng.STREAM_JITTER_LOOKUP if cfg.jitter else rng.STREAM_JITTER_ACCUM
        ck = vertex_keys(sub, cfg, seed, tag, level_delta=cfg.coarse_delta)
        ceff_sum, ceff_cnt = state.coarse.effective(cfg.temporal_mode,
                                                    cfg.ema_alpha, cfg.delta_max)
        cslots = state.coarse.lookup_slots(ck.index, ck.fingerprint)
        cfound = cslots >= 0
        rows = rest2[cfound]
        cnt_co[rows] = ceff_cnt[cslots[cfound]]
        some = cnt_co[rows] > 0
        mean_co[rows[some]] = _mean_rows(ceff_sum[cslots[cfound]][some],
                                         cnt_co[rows][some], fixed)
    ok_co = ~ok_fine & ~ok_nb & (cnt_co >= thr)

    any_nb = ~ok_fine & ~ok_nb & ~ok_co & (cnt_nb >= 1)
    any_co = ~ok_fine & ~ok_nb & ~ok_co & ~any_nb & (cnt_co >= 1)

    rows = np.nonzero(ok_fine)[0]
    chosen[rows] = _mean_rows(eff_sum[slots[rows]], cnt_fine[rows], fixed)
    source[rows] = SOURCE_FINE
    for mask, mean, code in ((ok_nb | any_nb, mean_nb, SOURCE_NEIGHBORHOOD),
                             (ok_co | any_co, mean_co, SOURCE_COARSE)):
        rows = np.nonzero(mask)[0]
        chosen[rows] = mean[rows]
        source[rows] = code

    flat = np.zeros((h * w, 3))
    np.add.at(flat, vertices.pixel, vertices.throughput * chosen)
    image = base_image + flat.reshape(h, w, 3) / spp
    return image, ResolveReport(source, image, chosen)


def _apply_temporal_differences(scene_f: Scene, cfg: FilterConfig,
                                state: FrameState, frame: int,
                                options: TraceOptions | None):
    """Replay a round-robin slice of last frame's paths and store deltas."""
    prev = state.prev_vertices
    if prev is None or len(prev) == 0:
        return
    chosen = temporal.select_replay_ids(prev.path_id, frame, cfg.reevaluate_fraction)
    if len(chosen) == 0:
        return
    hit = np.isin(prev.path_id, chosen)
    rows = np.nonzero(hit)[0]
    re_stream = reevaluate(scene_f, state.prev_seed, state.prev_spp,
                           prev.path_id[rows], options)
    # replay may lose vertices if moving geometry changed the path; match ids
    re_ids = re_stream.path_id
    common, orig_pos, re_pos = np.intersect1d(prev.path_id[rows], re_ids,
                                              return_indices=True)
    if len(common) == 0:
        return
    rows = rows[orig_pos]
    re_stream = re_stream.select(re_pos)
    orig = prev.select(rows)
    for table, keya in ((state.fine, state.prev_fine_keys),
                        (state.coarse, state.prev_coarse_keys)):
        if table is None or keya is None:
            continue
        idx, fp, deltas = temporal.reevaluation_deltas(
            orig, re_stream, keya.qx[rows], keya.qy[rows], keya.qz[rows],
            keya.level[rows], keya.aux[rows], cfg)
        slots = table.lookup_slots(idx, fp)
        ok = slots >= 0
        table.set_deltas(slots[ok], deltas[ok])


def render_frame(scene: Scene, cfg: FilterConfig, state: FrameState, spp: int,
                 seed: int, threads: int = 1,
                 options: TraceOptions | None = None) -> FrameResult:
    """Trace, begin generation, accumulate, resolve, advance temporal state."""
    t0 = time.perf_counter()
    frame = state.frame
    scene_f = scene.at_frame(frame)
    cfg_f = cfg.for_camera(scene_f.camera.fov, scene_f.camera.height)
    frame_seed = rng.mix64(seed ^ (frame * 0x9E3779B97F4A7C15)) if scene.frames > 1 else seed

    state.fine.begin_frame(frame, cfg_f)
    if state.coarse is not None:
        state.coarse.begin_frame(frame, cfg_f)

    t1 = time.perf_counter()
    tr = trace(scene_f, spp, frame_seed, options, threads)
    t2 = time.perf_counter()
    fine_keys, coarse_keys, stats = accumulate_phase(tr.vertices, cfg_f, state,
                                                     frame, frame_seed, threads)
    if cfg.temporal_mode == "hybrid":
        _apply_temporal_differences(scene_f, cfg_f, state, frame, options)
    t3 = time.perf_counter()
    filtered, report = resolve_phase(tr.vertices, cfg_f, state, frame, frame_seed,
                                     spp, tr.base_image, fine_keys)
    t4 = time.perf_counter()

    stats.evictions = len(state.fine.eviction_events)
    stats.horizon_clears = state.fine.horizon_clears
    stats.occupancy_fine = state.fine.occupancy()
    stats.occupancy_coarse = state.coarse.occupancy() if state.coarse else 0.0
    stats.source_counts = report.counts
    stats.time_trace = t2 - t1
    stats.time_accumulate = t3 - t2
    stats.time_resolve = t4 - t3
    stats.time_total = t4 - t0

    state.prev_vertices = tr.vertices
    state.prev_fine_keys = fine_keys
    state.prev_coarse_keys = coarse_keys
    state.prev_seed = frame_seed
    state.prev_spp = spp
    state.frame = frame + 1
    return FrameResult(filtered, tr.image, stats, report, tr, fine_keys, coarse_keys)


def run_sequence(scene: Scene, cfg: FilterConfig, spp: int, seed: int,
                 frames: int | None = None, threads: int = 1,
                 options: TraceOptions | None = None,
                 backend: str | None = None,
                 on_frame=None) -> list[FrameResult]:
    """Render `frames` frames with persistent temporal state."""
    cfg = cfg.for_camera(scene.camera.fov, scene.camera.height)
    state = FrameState.from_config(cfg, backend)
    results = []
    for _ in range(frames if frames is not None else scene.frames):
        res = render_frame(scene, cfg, state, spp, seed, threads, options)
        results.append(res)
        if on_frame is not None:
            on_frame(res)
    return results
