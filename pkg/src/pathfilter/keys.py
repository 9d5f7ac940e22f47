"""Filter keys: resolution selection, tangent-plane jitter, quantization, hashing.

A vertex descriptor is reduced to a CellKey (quantized position + LOD level +
packed auxiliary bins); equal keys define one voxel.  Two avalanche hashes of
the key drive the hash table: a 64-bit index hash and a 32-bit fingerprint
that never takes the empty-cell sentinel value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng

SENTINEL = 0  # fingerprint value reserved for empty cells
MAX_LEVEL = 31

_MASK = 0xFFFFFFFFFFFFFFFF
_INIT_INDEX = 0x9E3779B97F4A7C15
_INIT_FINGERPRINT = 0xC2B2AE3D27D4EB4F

# aux bit layout (frozen): normal bin 0..15, incident-angle bin 16..23, layer 24..31
_AUX_ANGLE_SHIFT = 16
_AUX_LAYER_SHIFT = 24


@dataclass
class FilterConfig:
    """Everything the key/table/pipeline stages need to agree on."""

    s_pixels: float = 8.0            # voxel footprint in projected pixels
    include_normal: bool = True
    normal_bins: int = 8             # octahedral bins per axis
    include_incident_angle: bool = False
    incident_angle_bins: int = 4
    include_layer: bool = False
    normal_in_fingerprint: bool = False  # move the normal bin from key to fingerprint
    jitter: bool = True
    base_voxel: float = 0.01         # world size (m) of a level-0 voxel
    footprint_scale: float = 0.01    # world size of one pixel at unit distance
    capacity: int = 1 << 13          # table slots, power of two
    probe_limit: int = 32
    low_count_threshold: int = 8
    temporal_mode: str = "integrate"  # filter | integrate | hybrid
    ema_alpha: float = 0.8
    sum_mode: str = "fixed"          # fixed | float
    multi_level: bool = True
    coarse_delta: int = 2            # coarse table level = fine level + delta
    evict_horizon: int = 8           # frames a cell may stay untouched
    evict_min_age: int = 3           # minimum age before in-frame eviction
    delta_max: float = 0.5           # temporal difference saturating at alpha=0
    delta_eps: float = 1e-4
    alpha_refine: float = 0.25       # count discount when refining resolution
    reevaluate_fraction: float = 1.0 / 16.0
    sample_cap: int = 256            # history count cap for integration

    def __post_init__(self):
        if self.capacity < 1 or self.capacity & (self.capacity - 1):
            raise ValueError("capacity must be a power of two")
        if self.probe_limit < 1:
            raise ValueError("probe_limit must be >= 1")
        if self.s_pixels <= 0:
            raise ValueError("s_pixels must be positive")
        if self.temporal_mode not in ("filter", "integrate", "hybrid"):
            raise ValueError(f"unknown temporal_mode {self.temporal_mode!r}")
        if self.sum_mode not in ("fixed", "float"):
            raise ValueError(f"unknown sum_mode {self.sum_mode!r}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in [0, 1]")

    def for_camera(self, fov: float, image_height: int) -> "FilterConfig":
        """Copy with footprint_scale derived from a camera."""
        return replace(self, footprint_scale=2.0 * math.tan(fov / 2.0) / image_height)

    def voxel_size(self, level: int) -> float:
        return self.base_voxel * float(2 ** level)


@dataclass(frozen=True)
class CellKey:
    qx: int
    qy: int
    qz: int
    level: int
    aux: int = 0

    def neighbor(self, dx: int, dy: int, dz: int) -> "CellKey":
        return CellKey(self.qx + dx, self.qy + dy, self.qz + dz, self.level, self.aux)


@dataclass(frozen=True)
class CellHashes:
    index: int       # 64-bit position hash
    fingerprint: int  # 32-bit, never SENTINEL


def pack_aux(normal_bin: int = 0, angle_bin: int = 0, layer: int = 0) -> int:
    return normal_bin | (angle_bin << _AUX_ANGLE_SHIFT) | (layer << _AUX_LAYER_SHIFT)


def level_of_detail(camera_distance: float, cfg: FilterConfig) -> int:
    """LOD level so one voxel covers ~s_pixels projected pixels.

    The world-space footprint of a pixel at distance d is d * footprint_scale;
    the level-L voxel size is base_voxel * 2^L.  Monotone in distance, clamped
    to [0, 31].
    """
    if camera_distance <= 0.0:
        raise ValueError("camera_distance must be positive")
    ratio = camera_distance * cfg.footprint_scale * cfg.s_pixels / cfg.base_voxel
    if ratio <= 1.0:
        return 0
    return min(int(math.floor(math.log2(ratio))), MAX_LEVEL)


def tangent_basis(n) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent frame (branchless construction)."""
    x, y, z = float(n[0]), float(n[1]), float(n[2])
    s = 1.0 if z >= 0.0 else -1.0
    a = -1.0 / (s + z)
    b = x * y * a
    t1 = np.array([1.0 + s * x * x * a, s * b, -s * x])
    t2 = np.array([b, s + y * y * a, -y])
    return t1, t2


def disc_offsets(u1, u2):
    """Map two uniforms to a point in the disc of radius 1/2 (polar warp)."""
    r = 0.5 * np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    return r * np.cos(phi), r * np.sin(phi)


def jitter_position(x, n, level: int, draws, cfg: FilterConfig):
    """Offset x inside the tangent-plane disc of radius half a voxel.

    draws are two uniforms in [0, 1); (0, 0) maps to a zero offset.  With
    jitter disabled the position is returned unchanged.
    """
    x = np.asarray(x, float)
    if not cfg.jitter:
        return x
    u, v = disc_offsets(float(draws[0]), float(draws[1]))
    t1, t2 = tangent_basis(n)
    return x + (u * t1 + v * t2) * cfg.voxel_size(level)


def normal_bin(n, bins: int) -> int:
    """Octahedral-map bin index in [0, bins^2)."""
    x, y, z = float(n[0]), float(n[1]), float(n[2])
    s = abs(x) + abs(y) + abs(z)
    if s == 0.0:
        return 0
    px, py, pz = x / s, y / s, z / s
    if pz < 0.0:
        px, py = ((1.0 - abs(py)) * (1.0 if px >= 0.0 else -1.0),
                  (1.0 - abs(px)) * (1.0 if py >= 0.0 else -1.0))
    bx = min(int((px * 0.5 + 0.5) * bins), bins - 1)
    by = min(int((py * 0.5 + 0.5) * bins), bins - 1)
    return by * bins + bx


def incident_angle_bin(n, omega_r, bins: int) -> int:
    c = float(np.dot(np.asarray(n, float), np.asarray(omega_r, float)))
    c = min(max(c, 0.0), 1.0)
    return min(int(c * bins), bins - 1)


def aux_bits(v, cfg: FilterConfig) -> int:
    nb = normal_bin(v.normal, cfg.normal_bins) if (
        cfg.include_normal and not cfg.normal_in_fingerprint) else 0
    ab = 0
    if cfg.include_incident_angle and v.layer_id == 1:
        ab = incident_angle_bin(v.normal, v.omega_r, cfg.incident_angle_bins)
    lb = v.layer_id if cfg.include_layer else 0
    return pack_aux(nb, ab, lb)


def quantize(x, voxel: float) -> tuple[int, int, int]:
    return (int(math.floor(x[0] / voxel)),
            int(math.floor(x[1] / voxel)),
            int(math.floor(x[2] / voxel)))


def make_cell_key(v, cfg: FilterConfig, jitter_draws=None, level_delta: int = 0) -> CellKey:
    """CellKey of one vertex descriptor.

    Jitters in the tangent plane at the level of the original position, then
    recomputes the level at the jittered position before quantizing (the
    jittered point may cross an LOD boundary).  level_delta shifts the ladder
    for the coarse table.
    """
    lvl = min(level_of_detail(v.camera_distance, cfg) + level_delta, MAX_LEVEL)
    x = np.asarray(v.position, float)
    if cfg.jitter and jitter_draws is not None:
        x = jitter_position(x, v.normal, lvl, jitter_draws, cfg)
        moved = v.camera_distance + float(np.linalg.norm(x - np.asarray(v.position, float)))
        lvl = min(level_of_detail(moved, cfg) + level_delta, MAX_LEVEL)
    qx, qy, qz = quantize(x, cfg.voxel_size(lvl))
    return CellKey(qx, qy, qz, lvl, aux_bits(v, cfg))


def _absorb(h: int, x: int) -> int:
    return rng.mix64(h ^ (x & _MASK))


def finalize_fingerprint(fp: int, normal_fp_bin: int | None = None) -> int:
    """Structural bits plus the sentinel remap shared by both hash paths."""
    if normal_fp_bin is not None:
        fp = ((fp << 6) & 0xFFFFFFFF) | (normal_fp_bin & 0x3F)
    if fp == SENTINEL:
        fp = SENTINEL + 1
    return fp


def hashes(key: CellKey, normal_fp_bin: int | None = None) -> CellHashes:
    """Index hash and fingerprint of a key (Python-int reference path).

    normal_fp_bin, when given, is appended structurally to the fingerprint's
    low six bits instead of being hashed, so linear probing can match "same
    voxel, any normal" by comparing the high bits.
    """
    h = _INIT_INDEX
    for f in (key.qx, key.qy, key.qz, key.level, key.aux):
        h = _absorb(h, f)
    index = h
    g = _INIT_FINGERPRINT
    for f in (key.qx, key.qy, key.qz, key.level, key.aux):
        g = _absorb(g, f)
    fp = finalize_fingerprint((g ^ (g >> 32)) & 0xFFFFFFFF, normal_fp_bin)
    return CellHashes(index, fp)


def fingerprint_spatial_bits(fp: int) -> int:
    """High bits of a structured fingerprint (normal_in_fingerprint mode)."""
    return fp >> 6


# ---------------------------------------------------------------------------
# vectorized pipeline path (numpy); semantics identical to the scalar one

def levels_array(camera_distance: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    ratio = camera_distance * (cfg.footprint_scale * cfg.s_pixels / cfg.base_voxel)
    lvl = np.floor(np.log2(np.maximum(ratio, 1.0))).astype(np.int64)
    return np.minimum(lvl, MAX_LEVEL)


def tangent_basis_array(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    s = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + z)
    b = x * y * a
    t1 = np.stack([1.0 + s * x * x * a, s * b, -s * x], axis=1)
    t2 = np.stack([b, s + y * y * a, -y], axis=1)
    return t1, t2


def jittered_positions(position, normal, level, u1, u2, cfg: FilterConfig) -> np.ndarray:
    if not cfg.jitter:
        return position
    r = 0.5 * np.sqrt(u1)
    phi = (2.0 * math.pi) * u2
    u = r * np.cos(phi)
    v = r * np.sin(phi)
    t1, t2 = tangent_basis_array(normal)
    step = cfg.base_voxel * np.exp2(level.astype(np.float64))
    return position + (u[:, None] * t1 + v[:, None] * t2) * step[:, None]


def normal_bins_array(n: np.ndarray, bins: int) -> np.ndarray:
    s = np.abs(n).sum(axis=1)
    s = np.maximum(s, 1e-300)
    p = n / s[:, None]
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    neg = pz < 0.0
    fx = np.where(neg, (1.0 - np.abs(py)) * np.where(px >= 0.0, 1.0, -1.0), px)
    fy = np.where(neg, (1.0 - np.abs(px)) * np.where(py >= 0.0, 1.0, -1.0), py)
    bx = np.minimum(((fx * 0.5 + 0.5) * bins).astype(np.int64), bins - 1)
    by = np.minimum(((fy * 0.5 + 0.5) * bins).astype(np.int64), bins - 1)
    return by * bins + bx


def aux_bits_array(normal, omega_r, layer_id, cfg: FilterConfig) -> np.ndarray:
    n = len(normal)
    aux = np.zeros(n, np.uint64)
    if cfg.include_normal and not cfg.normal_in_fingerprint:
        aux |= normal_bins_array(normal, cfg.normal_bins).astype(np.uint64)
    if cfg.include_incident_angle:
        c = np.clip(np.einsum("ij,ij->i", normal, omega_r), 0.0, 1.0)
        ab = np.minimum((c * cfg.incident_angle_bins).astype(np.int64),
                        cfg.incident_angle_bins - 1)
        ab = np.where(layer_id == 1, ab, 0).astype(np.uint64)
        aux |= ab << np.uint64(_AUX_ANGLE_SHIFT)
    if cfg.include_layer:
        aux |= layer_id.astype(np.uint64) << np.uint64(_AUX_LAYER_SHIFT)
    return aux


@dataclass
class KeyArrays:
    """Struct-of-arrays CellKeys plus their hashes, as fed to the table."""

    qx: np.ndarray
    qy: np.ndarray
    qz: np.ndarray
    level: np.ndarray
    aux: np.ndarray
    index: np.ndarray        # uint64
    fingerprint: np.ndarray  # uint32
    jittered: np.ndarray     # positions actually quantized (N, 3)

    def __len__(self):
        return len(self.qx)

    def cell_key(self, i: int) -> CellKey:
        return CellKey(int(self.qx[i]), int(self.qy[i]), int(self.qz[i]),
                       int(self.level[i]), int(self.aux[i]))


def _absorb_array(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    return rng.mix64_array(h ^ x.astype(np.uint64))


def hash_arrays(qx, qy, qz, level, aux, normal_fp_bins=None):
    fields = (qx, qy, qz, level, aux)
    h = np.full(len(qx), _INIT_INDEX, np.uint64)
    for f in fields:
        h = _absorb_array(h, np.asarray(f))
    g = np.full(len(qx), _INIT_FINGERPRINT, np.uint64)
    for f in fields:
        g = _absorb_array(g, np.asarray(f))
    fp = ((g ^ (g >> np.uint64(32))) & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    if normal_fp_bins is not None:
        fp = (fp << np.uint32(6)) | normal_fp_bins.astype(np.uint32)
    fp = np.where(fp == SENTINEL, np.uint32(SENTINEL + 1), fp)
    return h, fp


def make_key_arrays(position, normal, omega_r, layer_id, camera_distance,
                    cfg: FilterConfig, u1=None, u2=None, level_delta: int = 0) -> KeyArrays:
    """Vectorized make_cell_key + hashes over a vertex stream."""
    lvl = np.minimum(levels_array(camera_distance, cfg) + level_delta, MAX_LEVEL)
    if cfg.jitter and u1 is not None:
        x = jittered_positions(position, normal, lvl, u1, u2, cfg)
        moved = camera_distance + np.linalg.norm(x - position, axis=1)
        lvl = np.minimum(levels_array(moved, cfg) + level_delta, MAX_LEVEL)
    else:
        x = position
    step = cfg.base_voxel * np.exp2(lvl.astype(np.float64))
    q = np.floor(x / step[:, None]).astype(np.int64)
    aux = aux_bits_array(normal, omega_r, layer_id, cfg)
    fp_bins = None
    if cfg.include_normal and cfg.normal_in_fingerprint:
        fp_bins = normal_bins_array(normal, 8) & 0x3F  # 6 structured bits
    index, fp = hash_arrays(q[:, 0], q[:, 1], q[:, 2], lvl, aux, fp_bins)
    return KeyArrays(q[:, 0], q[:, 1], q[:, 2], lvl, aux, index, fp, x)
