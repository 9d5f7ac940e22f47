"""Deterministic forward path tracer with next event estimation.

Phase one of the two-phase filtering algorithm: traces one path per (pixel,
sample), gathers radiance the usual way, and records one vertex per path at
the first sufficiently diffuse interaction.  Everything downstream of that
vertex accumulates into its `contribution` (the reflected-radiance gather);
everything upstream lands in the per-path `base` term, so

    pixel radiance = base + throughput * contribution

holds exactly and the filter later replaces `contribution` by a voxel mean.

All randomness is counter-based: a draw depends only on (seed, path id,
bounce, dimension), so re-tracing any subset of paths replays bit-identical
sequences.  Path ids encode (sample << 32) | pixel.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from ._backend import get_kernels
from .scene import Scene

T_MIN = 1e-7          # self-intersection offset along rays
SHADOW_SHRINK = 1.0 - 1e-6
DIMS = dict(light_sel=0, light_u=1, light_v=2, lobe=3, dir_u=4, dir_v=5, rr=6)


@dataclass
class TraceOptions:
    max_depth: int = 8
    rr_start: int = 3            # bounce index where Russian roulette begins
    rr_clamp: tuple = (0.05, 0.95)
    nee: bool = True
    select_k: int = 1            # which qualifying vertex to record
    diffuse_threshold: float = 0.5
    pixel_jitter: bool = True    # False pins rays to pixel centers (no AA noise)


@dataclass
class VertexDescriptor:
    """One recorded path vertex (scalar view of the stream)."""

    position: np.ndarray
    normal: np.ndarray
    omega_r: np.ndarray          # unit direction toward the previous vertex
    contribution: np.ndarray
    throughput: np.ndarray
    pixel: int                   # row * width + col
    sample: int
    layer_id: int
    camera_distance: float       # path length from the sensor

    @property
    def path_id(self) -> int:
        return (self.sample << 32) | self.pixel


@dataclass
class VertexStream:
    """Struct-of-arrays vertex record, one row per selected vertex."""

    position: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    omega_r: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    contribution: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    throughput: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pixel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sample: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    layer_id: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    camera_distance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.pixel)

    @property
    def path_id(self) -> np.ndarray:
        return (self.sample.astype(np.uint64) << np.uint64(32)) | self.pixel.astype(np.uint64)

    def descriptor(self, i: int) -> VertexDescriptor:
        return VertexDescriptor(self.position[i], self.normal[i], self.omega_r[i],
                                self.contribution[i], self.throughput[i],
                                int(self.pixel[i]), int(self.sample[i]),
                                int(self.layer_id[i]), float(self.camera_distance[i]))

    def select(self, mask) -> "VertexStream":
        return VertexStream(*(getattr(self, f)[mask] for f in _STREAM_FIELDS))

    @staticmethod
    def concat(streams: list["VertexStream"]) -> "VertexStream":
        if not streams:
            return VertexStream()
        return VertexStream(*(np.concatenate([getattr(s, f) for s in streams])
                              for f in _STREAM_FIELDS))


_STREAM_FIELDS = ("position", "normal", "omega_r", "contribution", "throughput",
                  "pixel", "sample", "layer_id", "camera_distance")


@dataclass
class TraceResult:
    image: np.ndarray            # (H, W, 3) plain Monte Carlo estimate
    base_image: np.ndarray       # (H, W, 3) radiance not routed through vertices
    vertices: VertexStream
    variance: np.ndarray | None  # (H, W, 3) variance of the per-pixel mean
    spp: int
    seed: int


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _tangent_frame(n):
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    s = np.where(z >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + z)
    b = x * y * a
    t1 = np.stack([1.0 + s * x * x * a, s * b, -s * x], axis=1)
    t2 = np.stack([b, s + y * y * a, -y], axis=1)
    return t1, t2


def _cosine_dirs(n, u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    t1, t2 = _tangent_frame(n)
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    return (r * np.cos(phi))[:, None] * t1 + (r * np.sin(phi))[:, None] * t2 + z[:, None] * n


def _phong_dirs(axis, exponent, u1, u2):
    c = u1 ** (1.0 / (exponent + 1.0))
    s = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    phi = 2.0 * math.pi * u2
    t1, t2 = _tangent_frame(axis)
    return (s * np.cos(phi))[:, None] * t1 + (s * np.sin(phi))[:, None] * t2 + c[:, None] * axis


class _SceneTables:
    """Per-scene flat arrays the walk indexes by triangle / material id."""

    def __init__(self, scene: Scene):
        self.v0 = np.ascontiguousarray(scene.v0)
        self.e1 = np.ascontiguousarray(scene.e1)
        self.e2 = np.ascontiguousarray(scene.e2)
        self.normal = scene.normal
        self.emission = scene.emission
        self.albedo = np.stack([m.albedo for m in scene.materials])
        self.glossy_w = np.array([m.glossy_weight for m in scene.materials])
        self.glossy_e = np.array([m.glossy_exponent for m in scene.materials])
        self.diffuse_w = 1.0 - self.glossy_w
        self.material_id = scene.material_id
        li = scene.light_indices
        self.light_tri = li
        self.n_lights = len(li)
        self.light_v0 = scene.v0[li]
        self.light_e1 = scene.e1[li]
        self.light_e2 = scene.e2[li]
        self.light_n = scene.normal[li]
        self.light_area = scene.area[li]
        self.light_emission = scene.emission[li]
        self.background = scene.background


def _bsdf_eval(tab, mat, wo, wi, n):
    """Layered BRDF value for directions on the upper hemisphere of n."""
    cosi = _dot(n, wi)
    f = tab.albedo[mat] * (tab.diffuse_w[mat] / math.pi)[:, None]
    gw = tab.glossy_w[mat]
    if np.any(gw > 0.0):
        r = 2.0 * _dot(n, wo)[:, None] * n - wo
        align = np.maximum(_dot(r, wi), 0.0)
        e = tab.glossy_e[mat]
        spec = gw * (e + 2.0) / (2.0 * math.pi) * align ** e
        f = f + spec[:, None]
    return np.where((cosi > 0.0)[:, None], f, 0.0)


def _bsdf_pdf(tab, mat, wo, wi, n):
    cosi = np.maximum(_dot(n, wi), 0.0)
    pdf = tab.diffuse_w[mat] * cosi / math.pi
    gw = tab.glossy_w[mat]
    if np.any(gw > 0.0):
        r = 2.0 * _dot(n, wo)[:, None] * n - wo
        align = np.maximum(_dot(r, wi), 0.0)
        e = tab.glossy_e[mat]
        pdf = pdf + gw * (e + 1.0) / (2.0 * math.pi) * align ** e
    return pdf


@dataclass
class _WalkOut:
    base: np.ndarray
    radiance: np.ndarray
    has_vertex: np.ndarray
    vertices: VertexStream


def _walk(tab: _SceneTables, cam, pixels: np.ndarray, samples: np.ndarray,
          seed: int, opt: TraceOptions, kern) -> _WalkOut:
    """Trace one path per (pixel, sample) pair; fully deterministic."""
    n = len(pixels)
    path_id = (samples.astype(np.uint64) << np.uint64(32)) | pixels.astype(np.uint64)

    def draw(bounce, dim):
        return rng.draw_unit_array(seed, rng.STREAM_TRACE, path_id, bounce, dim)

    right, up, fwd = cam.basis()
    tanf = math.tan(cam.fov / 2.0)
    aspect = cam.width / cam.height
    col = (pixels % cam.width).astype(np.float64)
    row = (pixels // cam.width).astype(np.float64)
    jx = draw(0, 0) if opt.pixel_jitter else 0.5
    jy = draw(0, 1) if opt.pixel_jitter else 0.5
    ndc_x = ((col + jx) / cam.width - 0.5) * (2.0 * tanf * aspect)
    ndc_y = (0.5 - (row + jy) / cam.height) * (2.0 * tanf)
    d = _normalize(fwd[None, :] + ndc_x[:, None] * right[None, :] + ndc_y[:, None] * up[None, :])
    o = np.broadcast_to(cam.position, (n, 3)).copy()

    alive = np.ones(n, bool)
    post = np.zeros(n, bool)          # past the selected vertex
    T = np.ones((n, 3))               # camera->current attenuation (pre stage)
    Tsfx = np.zeros((n, 3))           # suffix attenuation (post stage)
    base = np.zeros((n, 3))
    contrib = np.zeros((n, 3))
    qual = np.zeros(n, np.int64)
    pathlen = np.zeros(n)
    has_v = np.zeros(n, bool)
    v_pos = np.zeros((n, 3))
    v_n = np.zeros((n, 3))
    v_wr = np.zeros((n, 3))
    v_T = np.zeros((n, 3))
    v_layer = np.zeros(n, np.int64)
    v_dist = np.zeros(n)

    for k in range(1, opt.max_depth + 1):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        t, tri = kern.intersect_closest(tab.v0, tab.e1, tab.e2,
                                        np.ascontiguousarray(o[idx]),
                                        np.ascontiguousarray(d[idx]),
                                        T_MIN, np.inf)
        miss = tri < 0
        if miss.any() and tab.background.max() > 0.0:
            mi = idx[miss]
            mp = post[mi]
            base[mi[~mp]] += T[mi[~mp]] * tab.background
            contrib[mi[mp]] += Tsfx[mi[mp]] * tab.background
        alive[idx[miss]] = False
        idx = idx[~miss]
        if len(idx) == 0:
            break
        t = t[~miss]
        tri = tri[~miss]

        x = o[idx] + t[:, None] * d[idx]
        pathlen[idx] += t
        mat = tab.material_id[tri]
        n_g = tab.normal[tri]
        facing = -_dot(n_g, d[idx])
        nrm = np.where((facing > 0.0)[:, None], n_g, -n_g)
        wo = -d[idx]

        # emitted radiance; with NEE on, later hits were already estimated
        if k == 1 or not opt.nee:
            em = tab.emission[tri] * ((facing > 0.0)[:, None])
            lit = em.max(axis=1) > 0.0
            if lit.any():
                li = idx[lit]
                lp = post[li]
                base[li[~lp]] += T[li[~lp]] * em[lit][~lp]
                contrib[li[lp]] += Tsfx[li[lp]] * em[lit][lp]

        # vertex selection: k-th sufficiently diffuse interaction
        can = ~post[idx] & (tab.diffuse_w[mat] >= opt.diffuse_threshold)
        qual[idx[can]] += 1
        new = np.zeros(len(idx), bool)
        new[can] = qual[idx[can]] == opt.select_k
        ni = idx[new]
        if len(ni):
            post[ni] = True
            has_v[ni] = True
            v_pos[ni] = x[new]
            v_n[ni] = nrm[new]
            v_wr[ni] = wo[new]
            v_T[ni] = T[ni]
            v_dist[ni] = pathlen[ni]
            Tsfx[ni] = 1.0

        # next event estimation toward a sampled light point
        if opt.nee:
            xi = draw(k, DIMS["light_sel"])[idx]
            li = np.minimum((xi * tab.n_lights).astype(np.int64), tab.n_lights - 1)
            r1 = draw(k, DIMS["light_u"])[idx]
            r2 = draw(k, DIMS["light_v"])[idx]
            sq = np.sqrt(r1)
            y = (tab.light_v0[li] + (sq * (1.0 - r2))[:, None] * tab.light_e1[li]
                 + (sq * r2)[:, None] * tab.light_e2[li])
            wl = y - x
            dl = np.linalg.norm(wl, axis=1)
            ok = dl > 1e-6
            wl = np.where(ok[:, None], wl / np.maximum(dl, 1e-6)[:, None], 0.0)
            cosx = _dot(nrm, wl)
            cosl = -_dot(tab.light_n[li], wl)
            pot = ok & (cosx > 0.0) & (cosl > 0.0)
            if pot.any():
                pi = np.nonzero(pot)[0]
                occ = kern.intersect_any(tab.v0, tab.e1, tab.e2,
                                         np.ascontiguousarray(x[pi]),
                                         np.ascontiguousarray(wl[pi]),
                                         T_MIN, np.ascontiguousarray(dl[pi] * SHADOW_SHRINK))
                vis = pi[occ == 0]
                if len(vis):
                    f = _bsdf_eval(tab, mat[vis], wo[vis], wl[vis], nrm[vis])
                    geo = cosx[vis] * cosl[vis] / (dl[vis] ** 2)
                    inv_pdf = tab.n_lights * tab.light_area[li[vis]]
                    val = tab.light_emission[li[vis]] * f * (geo * inv_pdf)[:, None]
                    gi = idx[vis]
                    gp = post[gi]
                    base[gi[~gp]] += T[gi[~gp]] * val[~gp]
                    contrib[gi[gp]] += Tsfx[gi[gp]] * val[gp]

        # continuation: one-sample estimate over the layered BRDF
        gw = tab.glossy_w[mat]
        pick_gloss = draw(k, DIMS["lobe"])[idx] < gw
        u1 = draw(k, DIMS["dir_u"])[idx]
        u2 = draw(k, DIMS["dir_v"])[idx]
        wi = _cosine_dirs(nrm, u1, u2)
        if pick_gloss.any():
            g = pick_gloss
            mirror = 2.0 * _dot(nrm[g], wo[g])[:, None] * nrm[g] - wo[g]
            wi[g] = _phong_dirs(mirror, tab.glossy_e[mat[g]], u1[g], u2[g])
        if len(ni):
            v_layer[ni] = pick_gloss[new].astype(np.int64)
        cosi = _dot(nrm, wi)
        up_ok = cosi > 0.0
        pdf = _bsdf_pdf(tab, mat, wo, wi, nrm)
        up_ok &= pdf > 0.0
        f = _bsdf_eval(tab, mat, wo, wi, nrm)
        w = np.where(up_ok[:, None], f * (cosi / np.maximum(pdf, 1e-300))[:, None], 0.0)
        pp = post[idx]
        T[idx[~pp]] *= w[~pp]
        Tsfx[idx[pp]] *= w[pp]
        alive[idx[~up_ok]] = False

        # Russian roulette on the effective camera-to-here attenuation
        if k >= opt.rr_start:
            live = np.nonzero(alive)[0]
            eff = np.where(post[live, None], v_T[live] * Tsfx[live], T[live])
            q = np.clip(eff.max(axis=1), opt.rr_clamp[0], opt.rr_clamp[1])
            kill = draw(k, DIMS["rr"])[live] >= q
            alive[live[kill]] = False
            keep = live[~kill]
            kp = post[keep]
            T[keep[~kp]] /= q[~kill][~kp, None]
            Tsfx[keep[kp]] /= q[~kill][kp, None]

        live = idx[alive[idx]]
        eff = np.where(post[live, None], Tsfx[live], T[live])
        alive[live[eff.max(axis=1) <= 0.0]] = False
        o[idx] = x
        d[idx] = wi

    radiance = base + np.where(has_v[:, None], v_T * contrib, 0.0)
    stream = VertexStream(v_pos[has_v], v_n[has_v], v_wr[has_v],
                          contrib[has_v], v_T[has_v],
                          pixels[has_v].astype(np.int64),
                          samples[has_v].astype(np.int64),
                          v_layer[has_v], v_dist[has_v])
    return _WalkOut(base, radiance, has_v, stream)


_PIXEL_CHUNK = 1 << 16


def _trace_band(tab, cam, pix_lo, pix_hi, spp, seed, opt, kern,
                sample_offset, want_variance):
    npix = pix_hi - pix_lo
    img = np.zeros((npix, 3))
    base_img = np.zeros((npix, 3))
    sq = np.zeros((npix, 3)) if want_variance else None
    streams = []
    for s in range(sample_offset, sample_offset + spp):
        for lo in range(pix_lo, pix_hi, _PIXEL_CHUNK):
            hi = min(pix_hi, lo + _PIXEL_CHUNK)
            pixels = np.arange(lo, hi, dtype=np.int64)
            samples = np.full(hi - lo, s, np.int64)
            out = _walk(tab, cam, pixels, samples, seed, opt, kern)
            img[lo - pix_lo:hi - pix_lo] += out.radiance
            base_img[lo - pix_lo:hi - pix_lo] += out.base
            if sq is not None:
                sq[lo - pix_lo:hi - pix_lo] += out.radiance ** 2
            if len(out.vertices):
                streams.append(out.vertices)
    return img, base_img, sq, streams


def trace(scene: Scene, spp: int, seed: int, options: TraceOptions | None = None,
          threads: int = 1, sample_offset: int = 0, want_variance: bool = False,
          backend: str | None = None) -> TraceResult:
    """Render and collect the vertex stream.

    Sequential mode (threads=1) is bit-reproducible; with more threads the
    per-pixel results are unchanged (disjoint row bands) but the vertex
    stream ordering differs.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    scene.validate()
    opt = options or TraceOptions()
    tab = _SceneTables(scene)
    kern = get_kernels(backend)
    cam = scene.camera
    npix = cam.width * cam.height

    if threads <= 1:
        bands = [(0, npix)]
    else:
        rows = np.linspace(0, cam.height, threads + 1).astype(int)
        bands = [(int(r0) * cam.width, int(r1) * cam.width)
                 for r0, r1 in zip(rows[:-1], rows[1:]) if r1 > r0]

    results = []
    if len(bands) == 1:
        results.append(_trace_band(tab, cam, 0, npix, spp, seed, opt, kern,
                                   sample_offset, want_variance))
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            futs = [pool.submit(_trace_band, tab, cam, lo, hi, spp, seed, opt,
                                kern, sample_offset, want_variance)
                    for lo, hi in bands]
            results = [f.result() for f in futs]

    sums = np.concatenate([r[0] for r in results])
    img = sums / spp
    base_img = np.concatenate([r[1] for r in results]) / spp
    var = None
    if want_variance:
        sq = np.concatenate([r[2] for r in results])
        if spp > 1:
            var = (sq - sums ** 2 / spp) / (spp - 1) / spp
            var = np.maximum(var, 0.0).reshape(cam.height, cam.width, 3)
        else:
            var = np.zeros((cam.height, cam.width, 3))
    stream = VertexStream.concat([s for r in results for s in r[3]])
    return TraceResult(img.reshape(cam.height, cam.width, 3),
                       base_img.reshape(cam.height, cam.width, 3),
                       stream, var, spp, seed)


def reevaluate(scene: Scene, seed: int, spp: int, path_ids,
               options: TraceOptions | None = None,
               backend: str | None = None) -> VertexStream:
    """Replay specific paths (by path id) under the current scene state.

    Path ids come from a previous trace with the same seed; ids that were
    never traced (pixel or sample out of range) are rejected.  In a static
    scene the returned contributions equal the originals bit-exactly.
    """
    scene.validate()
    ids = np.asarray(path_ids, np.uint64)
    pixels = (ids & np.uint64(0xFFFFFFFF)).astype(np.int64)
    samples = (ids >> np.uint64(32)).astype(np.int64)
    npix = scene.camera.width * scene.camera.height
    if len(ids) == 0:
        return VertexStream()
    if pixels.max(initial=0) >= npix or samples.max(initial=0) >= spp:
        raise ValueError("unknown path seed: pixel or sample index out of range")
    opt = options or TraceOptions()
    tab = _SceneTables(scene)
    kern = get_kernels(backend)
    out = _walk(tab, scene.camera, pixels, samples, seed, opt, kern)
    return out.vertices
