"""Table-throughput benchmark: scaling sweep plus backend comparison.

Feeds synthetic vertex streams straight into the voxel table so the timing
isolates accumulate + lookup, the per-vertex hot path.  The scaling sweep
checks the constant-time claim (per-vertex cost should not drift as the
stream and the table grow together); the comparison run times the compiled
kernels against the numpy fallback on the same stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._backend import BACKEND, available_backends
from .keys import hash_arrays
from .table import VoxelTable


@dataclass
class BenchPoint:
    backend: str
    n_vertices: int
    capacity: int
    accumulate_s: float
    lookup_s: float

    @property
    def per_vertex_ns(self) -> float:
        return (self.accumulate_s + self.lookup_s) / self.n_vertices * 1e9

    def line(self) -> str:
        return (f"backend={self.backend} n={self.n_vertices} capacity={self.capacity} "
                f"accumulate_s={self.accumulate_s:.4f} lookup_s={self.lookup_s:.4f} "
                f"per_vertex_ns={self.per_vertex_ns:.1f}")


def synthetic_stream(n: int, n_voxels: int, seed: int = 1, pixels_per_voxel: int = 36):
    """Hashes and contributions for n vertices over ~n_voxels keys.

    Vertices arrive in image-scan order, the way the pipeline emits them:
    each voxel's samples are adjacent pixels, so consecutive inserts mostly
    revisit the same slot (the access pattern filtering actually produces).
    """
    r = np.random.default_rng(seed)
    side = max(1, int(round((n_voxels * pixels_per_voxel) ** 0.5)))
    px = np.arange(n, dtype=np.int64)
    col = px % side
    row = px // side
    vox_side = max(1, int(round(pixels_per_voxel ** 0.5)))
    qx = col // vox_side
    qy = row // vox_side
    qz = np.zeros(n, np.int64)
    lvl = np.zeros(n, np.int64)
    aux = np.zeros(n, np.uint64)
    idx, fp = hash_arrays(qx, qy, qz, lvl, aux)
    vals = r.uniform(0.0, 2.0, (n, 3))
    return idx, fp, vals


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def run_point(n: int, backend: str | None = None, sum_mode: str = "fixed",
              seed: int = 1) -> BenchPoint:
    """One measurement with capacity proportional to the vertex count.

    Capacity follows the sizing rule from rendering (about 2x the pixel
    count, which is also 2x the vertex count at one sample per pixel).
    """
    capacity = _next_pow2(max(256, n))
    idx, fp, vals = synthetic_stream(n, max(16, n // 36), seed)
    tab = VoxelTable(capacity, sum_mode=sum_mode, backend=backend)
    # fault in the table pages so the timing measures probing, not first-touch
    for arr in (tab.sums, tab.counts, tab.hist_sums, tab.hist_counts,
                tab.last_touch, tab.deltas):
        arr.fill(0)
    t0 = time.perf_counter()
    tab.accumulate_batch(idx, fp, vals, 0)
    t1 = time.perf_counter()
    tab.lookup_slots(idx, fp)
    t2 = time.perf_counter()
    return BenchPoint(backend or BACKEND, n, capacity, t1 - t0, t2 - t1)


def scaling_sweep(counts=(100_000, 1_000_000, 10_000_000),
                  backend: str | None = None, sum_mode: str = "fixed") -> list[BenchPoint]:
    return [run_point(n, backend, sum_mode) for n in counts]


def backend_comparison(n: int = 1_000_000, sum_mode: str = "fixed") -> list[BenchPoint]:
    return [run_point(n, b, sum_mode) for b in available_backends()]


def spread(points: list[BenchPoint]) -> float:
    """max/min per-vertex time across a sweep."""
    per = [p.per_vertex_ns for p in points]
    return max(per) / min(per)
