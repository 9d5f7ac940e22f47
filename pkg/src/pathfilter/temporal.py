"""Cross-frame blending of voxel averages.

Three modes: a constant-alpha exponential moving average (adapts but never
converges), exact integration with alpha = N_old / (N_old + N_new), and a
hybrid that scales the integration alpha down as the per-voxel temporal
difference grows, so changed regions forget their history while static ones
keep converging.

Also hosts the resolution-migration helpers used when the LOD ladder shifts
between frames, operating on keyed (sum, count) snapshots.
"""

from __future__ import annotations

import numpy as np

from .keys import CellKey, FilterConfig, hash_arrays
from .tracer import VertexStream


def blend(c_old, n_old: float, c_new, n_new: float, mode: str, delta: float = 0.0,
          ema_alpha: float = 0.8, delta_max: float = 0.5):
    """Combine an old and a new per-voxel mean; returns (mean, effective N).

    integrate is exact sample accumulation; hybrid interpolates between
    integrate (delta = 0) and discarding history (delta >= delta_max).
    """
    if n_old < 0 or n_new < 0:
        raise ValueError("counts must be non-negative")
    if n_old == 0 and n_new == 0:
        raise ValueError("blend needs at least one sample on either side")
    c_old = np.asarray(c_old, np.float64)
    c_new = np.asarray(c_new, np.float64)
    if n_old == 0:
        return c_new.copy(), float(n_new)
    if mode == "filter":
        if n_new == 0:
            return c_old.copy(), float(n_old)
        return ema_alpha * c_old + (1.0 - ema_alpha) * c_new, float(n_new)
    if mode == "integrate":
        alpha = n_old / (n_old + n_new)
        return alpha * c_old + (1.0 - alpha) * c_new, float(n_old + n_new)
    if mode == "hybrid":
        k = min(max(delta / delta_max, 0.0), 1.0)
        n_eff = (1.0 - k) * n_old + n_new
        if n_new == 0:
            return c_old.copy(), n_eff
        alpha = (1.0 - k) * n_old / (n_old + n_new)
        return alpha * c_old + (1.0 - alpha) * c_new, n_eff
    raise ValueError(f"unknown temporal mode {mode!r}")


def temporal_difference(mean_old, mean_new, eps: float = 1e-4) -> float:
    """Relative L1 change of a voxel mean between replays."""
    old = np.asarray(mean_old, np.float64)
    new = np.asarray(mean_new, np.float64)
    return float(np.abs(new - old).sum() / (np.abs(old).sum() + eps))


def reevaluation_deltas(original: VertexStream, reevaluated: VertexStream,
                        keys_qx, keys_qy, keys_qz, keys_level, keys_aux,
                        cfg: FilterConfig):
    """Per-voxel temporal differences from a replayed path subset.

    `original` and `reevaluated` carry the same paths in the same order (the
    replay preserves path identity); the key arrays are the original frame's
    accumulation keys for those rows, so the deltas land in the cells that
    actually hold the history.  Returns (index hash, fingerprint, delta)
    arrays, one row per voxel with at least one replayed sample.
    """
    if len(original) != len(reevaluated):
        raise ValueError("original and reevaluated streams differ in length")
    if len(original) == 0:
        return (np.zeros(0, np.uint64), np.zeros(0, np.uint32), np.zeros(0))
    keyrows = np.stack([np.asarray(keys_qx, np.int64), np.asarray(keys_qy, np.int64),
                        np.asarray(keys_qz, np.int64), np.asarray(keys_level, np.int64),
                        np.asarray(keys_aux, np.int64)], axis=1)
    uniq, inverse = np.unique(keyrows, axis=0, return_inverse=True)
    n_vox = len(uniq)
    sum_old = np.zeros((n_vox, 3))
    sum_new = np.zeros((n_vox, 3))
    cnt = np.zeros(n_vox)
    np.add.at(sum_old, inverse, original.contribution)
    np.add.at(sum_new, inverse, reevaluated.contribution)
    np.add.at(cnt, inverse, 1.0)
    mean_old = sum_old / cnt[:, None]
    mean_new = sum_new / cnt[:, None]
    deltas = np.abs(mean_new - mean_old).sum(axis=1) / (
        np.abs(mean_old).sum(axis=1) + cfg.delta_eps)
    idx, fp = hash_arrays(uniq[:, 0], uniq[:, 1], uniq[:, 2], uniq[:, 3],
                          uniq[:, 4].astype(np.uint64))
    return idx, fp, deltas


def select_replay_ids(path_ids: np.ndarray, frame: int, fraction: float) -> np.ndarray:
    """Round-robin slice of last frame's path ids for re-evaluation."""
    if fraction <= 0.0 or len(path_ids) == 0:
        return np.zeros(0, np.uint64)
    ids = np.sort(np.unique(np.asarray(path_ids, np.uint64)))
    buckets = max(1, int(round(1.0 / fraction)))
    return ids[frame % buckets::buckets]


# -- resolution migration ----------------------------------------------------


def migrate_resolution(cells: dict[CellKey, tuple], l_old: int, l_new: int,
                       alpha_refine: float = 0.25,
                       fixed: bool = False) -> dict[CellKey, tuple]:
    """Move a keyed {CellKey: (sum, count)} snapshot to another LOD level.

    Coarsening adds child sums and counts into the parent; refining seeds
    every child with the parent mean, down-weighting the borrowed count by
    alpha_refine.  Keys not at l_old are passed through untouched.
    """
    if l_new == l_old:
        return dict(cells)
    out: dict[CellKey, tuple] = {}
    if l_new > l_old:
        shift = l_new - l_old
        for key, (total, count) in cells.items():
            if key.level != l_old:
                out[key] = (np.array(total).copy(), count)
                continue
            parent = CellKey(key.qx >> shift, key.qy >> shift, key.qz >> shift,
                             l_new, key.aux)
            if parent in out:
                ptotal, pcount = out[parent]
                out[parent] = (ptotal + np.asarray(total), pcount + count)
            else:
                out[parent] = (np.array(total).copy(), count)
        return out
    shift = l_old - l_new
    childs = 1 << shift
    for key, (total, count) in cells.items():
        if key.level != l_old:
            out[key] = (np.array(total).copy(), count)
            continue
        total = np.asarray(total, np.float64)
        mean = total / count
        child_count = max(1, int(round(alpha_refine * count)))
        child_total = mean * child_count
        if fixed:
            child_total = np.floor(child_total + 0.5).astype(np.int64)
        for ix in range(childs):
            for iy in range(childs):
                for iz in range(childs):
                    child = CellKey((key.qx << shift) + ix, (key.qy << shift) + iy,
                                    (key.qz << shift) + iz, l_new, key.aux)
                    out[child] = (child_total.copy(), child_count)
    return out
