"""Brute-force references for the filtering pipeline.

Everything here is deliberately scalar and self-contained: keys are re-derived
with plain math on one vertex at a time, sums run in vertex-index order, and
nothing is shared with the vectorized code paths being checked.  Slow on
purpose; this is the determinism anchor the equivalence tests compare against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .keys import FilterConfig
from .tracer import VertexStream

_FIXED = 65536


def _lod(distance: float, cfg: FilterConfig) -> int:
    ratio = distance * cfg.footprint_scale * cfg.s_pixels / cfg.base_voxel
    if ratio <= 1.0:
        return 0
    return min(int(math.floor(math.log2(ratio))), 31)


def _octa_bin(nx: float, ny: float, nz: float, bins: int) -> int:
    s = abs(nx) + abs(ny) + abs(nz)
    if s == 0.0:
        return 0
    px, py, pz = nx / s, ny / s, nz / s
    if pz < 0.0:
        px, py = ((1.0 - abs(py)) * (1.0 if px >= 0.0 else -1.0),
                  (1.0 - abs(px)) * (1.0 if py >= 0.0 else -1.0))
    bx = min(int((px * 0.5 + 0.5) * bins), bins - 1)
    by = min(int((py * 0.5 + 0.5) * bins), bins - 1)
    return by * bins + bx


def derive_key(position, normal, omega_r, layer_id: int, camera_distance: float,
               cfg: FilterConfig, jittered=None) -> tuple:
    """Re-derive one vertex's cell key from scratch.

    When the pipeline ran with jitter, pass its recorded jittered position so
    both sides quantize the identical point; the level is then recomputed at
    the jittered location the same way the pipeline defines it (path length
    grown by the jitter offset).
    """
    d = camera_distance
    x = position
    if jittered is not None:
        dx = jittered[0] - position[0]
        dy = jittered[1] - position[1]
        dz = jittered[2] - position[2]
        d = camera_distance + math.sqrt(dx * dx + dy * dy + dz * dz)
        x = jittered
    level = _lod(d, cfg)
    voxel = cfg.base_voxel * float(2 ** level)
    q = (int(math.floor(x[0] / voxel)), int(math.floor(x[1] / voxel)),
         int(math.floor(x[2] / voxel)))
    aux = 0
    if cfg.include_normal and not cfg.normal_in_fingerprint:
        aux |= _octa_bin(float(normal[0]), float(normal[1]), float(normal[2]),
                         cfg.normal_bins)
    if cfg.include_incident_angle and layer_id == 1:
        c = (float(normal[0]) * float(omega_r[0]) + float(normal[1]) * float(omega_r[1])
             + float(normal[2]) * float(omega_r[2]))
        c = min(max(c, 0.0), 1.0)
        aux |= min(int(c * cfg.incident_angle_bins), cfg.incident_angle_bins - 1) << 16
    if cfg.include_layer:
        aux |= layer_id << 24
    return (q[0], q[1], q[2], level, aux)


@dataclass
class PartitionCell:
    total: np.ndarray          # int64 fixed-point or float64 sums
    count: int = 0
    members: list[int] = field(default_factory=list)

    def mean(self, fixed: bool) -> np.ndarray:
        if fixed:
            return self.total.astype(np.float64) / (self.count * _FIXED)
        return self.total / self.count


@dataclass
class VoxelPartition:
    cells: dict[tuple, PartitionCell]
    fixed: bool

    def __len__(self):
        return len(self.cells)

    def mean_of(self, key: tuple) -> np.ndarray:
        return self.cells[key].mean(self.fixed)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("qx,qy,qz,level,aux,count,mean_r,mean_g,mean_b\n")
            for key in sorted(self.cells):
                cell = self.cells[key]
                m = [float(v) for v in cell.mean(self.fixed)]
                fh.write(",".join(str(v) for v in key)
                         + f",{cell.count},{m[0]!r},{m[1]!r},{m[2]!r}\n")


def _quantize_fixed_scalar(c) -> np.ndarray:
    return np.array([int(math.floor(float(v) * _FIXED + 0.5)) for v in c], np.int64)


def brute_voxel_average(vertices: VertexStream, cfg: FilterConfig,
                        jittered: np.ndarray | None = None,
                        sum_mode: str | None = None) -> VoxelPartition:
    """Exact per-voxel partition of a vertex stream.

    Groups by full key equality in vertex-index order.  `jittered` is the
    pipeline's recorded jitter schedule (same row order as the stream); leave
    it out when the pipeline ran with jitter disabled.
    """
    fixed = (sum_mode or cfg.sum_mode) == "fixed"
    cells: dict[tuple, PartitionCell] = {}
    for i in range(len(vertices)):
        key = derive_key(vertices.position[i], vertices.normal[i],
                         vertices.omega_r[i], int(vertices.layer_id[i]),
                         float(vertices.camera_distance[i]), cfg,
                         None if jittered is None else jittered[i])
        cell = cells.get(key)
        if cell is None:
            zero = np.zeros(3, np.int64 if fixed else np.float64)
            cell = cells[key] = PartitionCell(zero)
        if fixed:
            cell.total = cell.total + _quantize_fixed_scalar(vertices.contribution[i])
        else:
            cell.total = cell.total + vertices.contribution[i]
        cell.count += 1
        cell.members.append(i)
    return VoxelPartition(cells, fixed)


def neighborhood_mean(partition: VoxelPartition, key: tuple) -> np.ndarray | None:
    """Count-weighted mean over the 3x3x3 spatial neighbors of a voxel."""
    total = np.zeros(3, np.int64 if partition.fixed else np.float64)
    count = 0
    qx, qy, qz, level, aux = key
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                cell = partition.cells.get((qx + dx, qy + dy, qz + dz, level, aux))
                if cell is not None:
                    total = total + cell.total
                    count += cell.count
    if count == 0:
        return None
    if partition.fixed:
        return total.astype(np.float64) / (count * _FIXED)
    return total / count


def ball_average(vertices: VertexStream, center, radius: float,
                 weight=None) -> np.ndarray | None:
    """Weighted average of contributions inside an open ball; None if empty."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, float)
    total = np.zeros(3)
    wsum = 0.0
    r2 = radius * radius
    for i in range(len(vertices)):
        dx = vertices.position[i] - center
        if float(dx @ dx) < r2:
            w = 1.0 if weight is None else float(weight(center, vertices.position[i]))
            total += w * vertices.contribution[i]
            wsum += w
    if wsum == 0.0:
        return None
    return total / wsum


def image_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over pixels and channels."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(diff * diff))
