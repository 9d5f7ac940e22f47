"""Concurrent open-addressing voxel table.

Each slot stores one 64-bit tag word (eviction priority in the high 32 bits,
key fingerprint in the low 32), a running radiance sum, a sample counter, and
a previous-generation copy of both for temporal blending.

Tag layout (frozen):

    bits 63..56  255 - min(total samples, 255)   (sparse cells sort high)
    bits 55..32  min(frames since last touch, 0xFFFFFE)
    bits 31..0   fingerprint (sentinel 0 == empty slot)

Empty slots hold 0xFFFFFFFF_00000000, the numeric maximum of any occupied
tag, so a compare-and-swap claim is an atomic-minimum: tags only ever
decrease between frame boundaries.  A slot may be evicted mid-frame only if
its tag age is at least `evict_min_age` frames and it has no samples in the
live generation; among candidates the numerically largest tag (sparsest,
then oldest) loses first.  `begin_frame` recomputes priorities, folds the
live generation into the history per the temporal mode, and clears cells
untouched for longer than the horizon.

Sums default to 16.16 fixed point accumulated with integer adds, which makes
parallel accumulation order-independent and equality tests exact; float mode
trades that for range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._backend import get_kernels
from .keys import SENTINEL, CellHashes, FilterConfig

FIXED_SCALE = 65536  # 2**16 radiance units per integer step
EMPTY_TAG = 0xFFFFFFFF00000000
_AGE_MASK = 0xFFFFFE
_DUMP_MAGIC = b"PFVT\x01"


def quantize_fixed(values: np.ndarray) -> np.ndarray:
    """Round radiance to 16.16 fixed point (half away from zero for >= 0)."""
    return np.floor(np.asarray(values, np.float64) * FIXED_SCALE + 0.5).astype(np.int64)


def fixed_to_float(sums: np.ndarray) -> np.ndarray:
    return np.asarray(sums, np.float64) / FIXED_SCALE


def pack_priority(count, age):
    """Priority word; smaller values win the atomic-minimum arbitration."""
    c = np.minimum(count, 255).astype(np.uint64)
    a = np.minimum(age, _AGE_MASK).astype(np.uint64)
    return ((np.uint64(255) - c) << np.uint64(24)) | a


class Outcome(Enum):
    ACCUMULATED = 0
    EVICTED_THEN_ACCUMULATED = 1
    PROBE_LIMIT_EXCEEDED = 2


@dataclass
class InsertOutcome:
    status: Outcome
    slot: int


@dataclass
class EvictionEvent:
    frame: int
    slot: int
    victim_age: int
    victim_last_touch: int


class VoxelTable:
    """One resolution level of the filter cache."""

    def __init__(self, capacity: int, probe_limit: int = 32, sum_mode: str = "fixed",
                 evict_horizon: int = 8, evict_min_age: int = 3,
                 backend: str | None = None):
        if capacity < 2 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two")
        if sum_mode not in ("fixed", "float"):
            raise ValueError(f"unknown sum_mode {sum_mode!r}")
        self.capacity = capacity
        self.probe_limit = int(probe_limit)
        self.sum_mode = sum_mode
        self.evict_horizon = int(evict_horizon)
        self.evict_min_age = int(evict_min_age)
        self._k = get_kernels(backend)
        sum_dtype = np.int64 if sum_mode == "fixed" else np.float64
        self.tags = np.full(capacity, EMPTY_TAG, np.uint64)
        self.sums = np.zeros((capacity, 3), sum_dtype)
        self.counts = np.zeros(capacity, np.int64)
        self.hist_sums = np.zeros((capacity, 3), sum_dtype)
        self.hist_counts = np.zeros(capacity, np.int64)
        self.last_touch = np.zeros(capacity, np.int64)
        self.deltas = np.zeros(capacity, np.float64)
        self.frame = 0
        self.eviction_events: list[EvictionEvent] = []
        self.horizon_clears = 0
        # slot -> key shadow map, maintained only when tests ask for it
        self.shadow: dict[int, set] | None = None

    @classmethod
    def from_config(cls, cfg: FilterConfig, backend: str | None = None) -> "VoxelTable":
        return cls(cfg.capacity, cfg.probe_limit, cfg.sum_mode,
                   cfg.evict_horizon, cfg.evict_min_age, backend)

    # -- accumulation -------------------------------------------------------

    def accumulate_batch(self, index: np.ndarray, fingerprint: np.ndarray,
                         contributions: np.ndarray, frame: int | None = None):
        """Insert a batch; returns (status, slot, probe_len) arrays.

        Contributions are float radiance; fixed mode quantizes inside the
        kernel.  Safe to call concurrently from several threads for disjoint
        batches.
        """
        if frame is None:
            frame = self.frame
        vals = np.ascontiguousarray(contributions, np.float64)
        if np.any(~np.isfinite(vals)) or np.any(vals < 0.0):
            raise ValueError("contributions must be finite and non-negative")
        fn = self._k.accumulate_fixed if self.sum_mode == "fixed" else self._k.accumulate_float
        status, slots, probe_len, victim_tags, victim_touch = fn(
            self.tags, self.sums, self.counts, self.hist_sums, self.hist_counts,
            self.last_touch, self.deltas,
            np.ascontiguousarray(index, np.uint64),
            np.ascontiguousarray(fingerprint, np.uint32),
            vals, frame, self.probe_limit, self.evict_min_age)
        ev = np.nonzero(status == 1)[0]
        for i in ev:
            age = int((int(victim_tags[i]) >> 32) & _AGE_MASK)
            self.eviction_events.append(EvictionEvent(
                frame, int(slots[i]), age, int(victim_touch[i])))
        return status, slots, probe_len

    def accumulate(self, h: CellHashes, contribution, frame: int | None = None,
                   key=None) -> InsertOutcome:
        """Single-vertex insert (spec-level API); key feeds the shadow audit."""
        status, slots, _ = self.accumulate_batch(
            np.array([h.index], np.uint64), np.array([h.fingerprint], np.uint32),
            np.asarray(contribution, np.float64).reshape(1, 3), frame)
        out = InsertOutcome(Outcome(int(status[0])), int(slots[0]))
        if self.shadow is not None and out.status is not Outcome.PROBE_LIMIT_EXCEEDED:
            if out.status is Outcome.EVICTED_THEN_ACCUMULATED:
                self.shadow[out.slot] = set()
            if key is not None:
                self.shadow.setdefault(out.slot, set()).add(key)
        return out

    # -- queries ------------------------------------------------------------

    def lookup_slots(self, index: np.ndarray, fingerprint: np.ndarray) -> np.ndarray:
        return self._k.lookup_slots(self.tags,
                                    np.ascontiguousarray(index, np.uint64),
                                    np.ascontiguousarray(fingerprint, np.uint32),
                                    self.probe_limit)

    def mean_at(self, slots: np.ndarray, sums: np.ndarray | None = None,
                counts: np.ndarray | None = None) -> np.ndarray:
        """Per-slot mean radiance; slots must be valid and have count > 0."""
        sums = self.sums if sums is None else sums
        counts = self.counts if counts is None else counts
        c = counts[slots].astype(np.float64)
        if self.sum_mode == "fixed" and sums.dtype == np.int64:
            return sums[slots].astype(np.float64) / (c * FIXED_SCALE)[:, None]
        return sums[slots] / c[:, None]

    def lookup(self, h: CellHashes):
        """(mean, count) of the live generation, or None when absent."""
        slots = self.lookup_slots(np.array([h.index], np.uint64),
                                  np.array([h.fingerprint], np.uint32))
        s = int(slots[0])
        if s < 0 or self.counts[s] == 0:
            return None
        mean = self.mean_at(np.array([s]))[0]
        return mean, int(self.counts[s])

    def probe_scan(self, h: CellHashes, accept) -> list[tuple[np.ndarray, int]]:
        """All occupied windows slots whose fingerprint satisfies `accept`.

        Unlike lookup this walks the whole probe window, skipping holes, so
        key variants that share the index hash are all found.
        """
        mask = self.capacity - 1
        home = int(h.index) & mask
        out = []
        for j in range(self.probe_limit):
            s = (home + j) & mask
            tag = int(self.tags[s])
            fp = tag & 0xFFFFFFFF
            if fp == SENTINEL or self.counts[s] == 0:
                continue
            if accept(fp):
                out.append((self.mean_at(np.array([s]))[0], int(self.counts[s])))
        return out

    def effective(self, mode: str, ema_alpha: float = 0.8, delta_max: float = 0.5):
        """Temporally blended (sum, count) per slot for the resolve phase.

        integrate keeps the storage dtype (exact in fixed point); filter and
        hybrid return float arrays.
        """
        if mode == "integrate":
            return self.sums + self.hist_sums, self.counts + self.hist_counts
        live = self.sums.astype(np.float64)
        hist = self.hist_sums.astype(np.float64)
        if self.sum_mode == "fixed":
            live /= FIXED_SCALE
            hist /= FIXED_SCALE
        lc = self.counts.astype(np.float64)
        hc = self.hist_counts.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            lmean = np.where(lc[:, None] > 0, live / np.maximum(lc, 1)[:, None], 0.0)
            hmean = np.where(hc[:, None] > 0, hist / np.maximum(hc, 1)[:, None], 0.0)
        if mode == "filter":
            alpha = np.where(hc > 0, np.where(lc > 0, ema_alpha, 1.0), 0.0)
            eff_count = lc + hc
        elif mode == "hybrid":
            # no new samples: keep the old mean, only its weight decays
            k = np.clip(self.deltas / delta_max, 0.0, 1.0)
            both = np.maximum(lc + hc, 1.0)
            alpha = np.where(hc > 0, np.where(lc > 0, (1.0 - k) * hc / both, 1.0), 0.0)
            eff_count = np.round((1.0 - k) * hc) + lc
        else:
            raise ValueError(f"unknown temporal mode {mode!r}")
        mean = alpha[:, None] * hmean + (1.0 - alpha)[:, None] * lmean
        eff_sum = mean * eff_count[:, None]
        if self.sum_mode == "fixed":
            eff_sum *= FIXED_SCALE
        return eff_sum, eff_count

    # -- frame maintenance --------------------------------------------------

    def begin_frame(self, frame: int, cfg: FilterConfig | None = None):
        """Start a generation: fold live into history, re-prioritize, evict.

        Must not run concurrently with accumulate or lookup.
        """
        mode = cfg.temporal_mode if cfg else "integrate"
        ema_alpha = cfg.ema_alpha if cfg else 0.8
        delta_max = cfg.delta_max if cfg else 0.5
        sample_cap = cfg.sample_cap if cfg else 0
        occupied = self.tags != EMPTY_TAG
        age = frame - self.last_touch
        clear = occupied & (age > self.evict_horizon)
        keep = occupied & ~clear
        self.horizon_clears += int(clear.sum())

        if mode == "integrate":
            self.hist_sums[keep] += self.sums[keep]
            self.hist_counts[keep] += self.counts[keep]
        else:
            eff_sum, eff_count = self.effective(mode, ema_alpha, delta_max)
            cnt = np.round(eff_count).astype(np.int64)
            if mode == "filter":
                cnt = np.minimum(cnt, 1)
            has = keep & (cnt > 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = eff_sum / np.maximum(eff_count, 1e-300)[:, None]
            new_hist = mean * cnt[:, None]
            if self.sum_mode == "fixed":
                new_hist = np.floor(new_hist + 0.5).astype(np.int64)
            self.hist_sums[has] = new_hist[has]
            self.hist_counts[has] = cnt[has]
            gone = keep & (cnt <= 0)
            self.hist_sums[gone] = 0
            self.hist_counts[gone] = 0
        if sample_cap and mode in ("integrate", "hybrid"):
            over = keep & (self.hist_counts > sample_cap)
            if over.any():
                scale = sample_cap / self.hist_counts[over].astype(np.float64)
                scaled = self.hist_sums[over] * scale[:, None]
                if self.sum_mode == "fixed":
                    scaled = np.floor(scaled + 0.5).astype(np.int64)
                self.hist_sums[over] = scaled
                self.hist_counts[over] = sample_cap
        self.sums[occupied] = 0
        self.counts[occupied] = 0
        self.deltas[:] = 0.0

        prio = pack_priority(self.hist_counts[keep], age[keep])
        self.tags[keep] = (prio << np.uint64(32)) | (self.tags[keep] & np.uint64(0xFFFFFFFF))
        self.tags[clear] = EMPTY_TAG
        self.hist_sums[clear] = 0
        self.hist_counts[clear] = 0
        self.last_touch[clear] = 0
        if self.shadow is not None:
            for s in np.nonzero(clear)[0]:
                self.shadow.pop(int(s), None)
        self.frame = frame

    # -- introspection ------------------------------------------------------

    def occupancy(self) -> float:
        return float((self.tags != EMPTY_TAG).mean())

    def total_counts(self) -> int:
        return int(self.counts.sum())

    def total_sums(self) -> np.ndarray:
        return self.sums.sum(axis=0)

    def set_deltas(self, slots: np.ndarray, values: np.ndarray):
        self.deltas[slots] = values

    def export_csv(self, path):
        """slot,fingerprint,count,sum_r,sum_g,sum_b for occupied slots."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("slot,fingerprint,count,sum_r,sum_g,sum_b\n")
            for s in np.nonzero(self.tags != EMPTY_TAG)[0]:
                fp = int(self.tags[s]) & 0xFFFFFFFF
                if self.sum_mode == "fixed":
                    r, g, b = (float(v) for v in fixed_to_float(self.sums[s]))
                else:
                    r, g, b = (float(v) for v in self.sums[s])
                fh.write(f"{int(s)},{fp},{int(self.counts[s])},{r!r},{g!r},{b!r}\n")

    def dump(self, path):
        """Binary snapshot (little-endian); layout in docs/FORMATS.md."""
        mode = 0 if self.sum_mode == "fixed" else 1
        with open(path, "wb") as fh:
            fh.write(_DUMP_MAGIC)
            fh.write(struct.pack("<QBQ", self.capacity, mode, self.frame))
            for arr in (self.tags, self.sums, self.counts,
                        self.hist_sums, self.hist_counts, self.last_touch):
                fh.write(arr.tobytes())

    def audit_no_false_merge(self) -> int:
        """Number of slots shared by distinct keys (shadow map must be on)."""
        if self.shadow is None:
            raise RuntimeError("shadow map not enabled")
        return sum(1 for ks in self.shadow.values() if len(ks) > 1)
