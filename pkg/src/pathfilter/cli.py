"""Command-line front end.

Modes: render (filtered / unfiltered / both), oracle-compare (renders one
frame and diffs every vertex's table lookup against the brute-force voxel
partition), and bench (table-throughput scaling plus a backend comparison).
Outputs are binary PPMs, a key=value stats file per frame, and CSV exports
for the oracle runs.  Flag values win over config-file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from ._backend import BACKEND
from .keys import FilterConfig
from .oracle import brute_voxel_average, derive_key
from .pipeline import FrameState, render_frame
from .scene import SceneError, load_scene
from .images import write_ppm
from . import bench as bench_mod

_BOOL_KEYS = {"include_normal", "include_incident_angle", "include_layer",
              "normal_in_fingerprint", "jitter", "multi_level"}
_INT_KEYS = {"normal_bins", "incident_angle_bins", "capacity", "probe_limit",
             "low_count_threshold", "coarse_delta", "evict_horizon",
             "evict_min_age", "sample_cap"}
_FLOAT_KEYS = {"s_pixels", "base_voxel", "footprint_scale", "ema_alpha",
               "delta_max", "delta_eps", "alpha_refine", "reevaluate_fraction"}
_STR_KEYS = {"temporal_mode", "sum_mode"}
_RUN_KEYS = {"scene", "spp", "seed", "frames", "threads", "mode", "out",
             "width", "height"}


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def load_config_file(path) -> dict:
    """Flat key = value text; [section] headers group lines, keys stay flat."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            val = val.strip()
            if key in _BOOL_KEYS:
                out[key] = _parse_bool(val)
            elif key in _INT_KEYS or key in ("spp", "seed", "frames", "threads",
                                             "width", "height"):
                out[key] = int(val)
            elif key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key in _STR_KEYS or key in ("scene", "mode", "out"):
                out[key] = val
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pathfilter",
        description="Voxel-hashed path space filtering renderer")
    p.add_argument("--scene", default="cornell",
                   help="builtin name (cornell, cornell-glossy, occluded, corridor, "
                        "shadow-sweep) or a scene file path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--spp", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--s-pixels", type=float, default=None)
    p.add_argument("--base-voxel", type=float, default=None)
    p.add_argument("--capacity", type=int, default=None)
    p.add_argument("--jitter", choices=["on", "off"], default=None)
    p.add_argument("--include-normal", choices=["on", "off"], default=None)
    p.add_argument("--multi-level", choices=["on", "off"], default=None)
    p.add_argument("--low-count-threshold", type=int, default=None)
    p.add_argument("--temporal-mode", choices=["filter", "integrate", "hybrid"],
                   default=None)
    p.add_argument("--sum-mode", choices=["fixed", "float"], default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--mode", choices=["filtered", "unfiltered", "both",
                                      "oracle-compare", "bench"], default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--vertices", default="1e5..1e7",
                   help="bench vertex counts: A..B (log-decade steps) or comma list")
    return p


def _merge_settings(args) -> dict:
    settings = {}
    if args.config:
        settings.update(load_config_file(args.config))
    flags = {"scene": args.scene if args.scene != "cornell" else None,
             "spp": args.spp, "seed": args.seed, "frames": args.frames,
             "threads": args.threads, "mode": args.mode, "out": args.out,
             "width": args.width, "height": args.height,
             "s_pixels": args.s_pixels, "base_voxel": args.base_voxel,
             "capacity": args.capacity,
             "low_count_threshold": args.low_count_threshold,
             "temporal_mode": args.temporal_mode, "sum_mode": args.sum_mode}
    for key, flag in (("jitter", args.jitter), ("include_normal", args.include_normal),
                      ("multi_level", args.multi_level)):
        if flag is not None:
            flags[key] = flag == "on"
    settings.update({k: v for k, v in flags.items() if v is not None})
    settings.setdefault("scene", "cornell")
    settings.setdefault("spp", 1)
    settings.setdefault("seed", 1)
    settings.setdefault("frames", None)
    settings.setdefault("threads", 1)
    settings.setdefault("mode", "both")
    settings.setdefault("out", "out")
    return settings


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _filter_config(settings: dict, scene) -> FilterConfig:
    fields = {f.name for f in dataclasses.fields(FilterConfig)}
    kwargs = {k: v for k, v in settings.items() if k in fields}
    if "capacity" not in kwargs:
        kwargs["capacity"] = _next_pow2(2 * scene.camera.width * scene.camera.height)
    return FilterConfig(**kwargs)


def _write_stats(path: Path, lines: list[str]):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_render(settings: dict) -> int:
    scene = load_scene(settings["scene"], settings.get("width"), settings.get("height"))
    cfg = _filter_config(settings, scene)
    out_dir = Path(settings["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = settings["frames"] or scene.frames
    mode = settings["mode"]
    state = FrameState.from_config(cfg.for_camera(scene.camera.fov, scene.camera.height))
    for f in range(frames):
        res = render_frame(scene, cfg, state, settings["spp"], settings["seed"],
                           settings["threads"])
        if mode in ("filtered", "both"):
            write_ppm(out_dir / f"frame_{f:04d}_filtered.ppm", res.filtered)
        if mode in ("unfiltered", "both"):
            write_ppm(out_dir / f"frame_{f:04d}_unfiltered.ppm", res.unfiltered)
        lines = [f"scene={settings['scene']}", f"spp={settings['spp']}",
                 f"seed={settings['seed']}", f"backend={BACKEND}",
                 f"mode={mode}"] + res.stats.lines()
        _write_stats(out_dir / f"stats_{f:04d}.txt", lines)
    return 0


def _run_oracle_compare(settings: dict) -> int:
    scene = load_scene(settings["scene"], settings.get("width"), settings.get("height"))
    cfg = _filter_config(settings, scene)
    out_dir = Path(settings["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_cam = cfg.for_camera(scene.camera.fov, scene.camera.height)
    state = FrameState.from_config(cfg_cam)
    res = render_frame(scene, cfg, state, settings["spp"], settings["seed"],
                       settings["threads"])
    vertices = res.trace_result.vertices
    keya = res.fine_keys
    partition = brute_voxel_average(
        vertices, cfg_cam, jittered=keya.jittered if cfg_cam.jitter else None,
        sum_mode=cfg_cam.sum_mode)
    max_rel = 0.0
    sum_rel = 0.0
    compared = 0
    skipped = 0
    for i in range(len(vertices)):
        hit = state.fine.lookup_slots(keya.index[i:i + 1], keya.fingerprint[i:i + 1])
        if hit[0] < 0:
            skipped += 1
            continue
        mean = state.fine.mean_at(hit)[0]
        key = derive_key(vertices.position[i], vertices.normal[i], vertices.omega_r[i],
                         int(vertices.layer_id[i]), float(vertices.camera_distance[i]),
                         cfg_cam, keya.jittered[i] if cfg_cam.jitter else None)
        ref = partition.mean_of(key)
        denom = max(float(np.abs(ref).max()), 1e-12)
        rel = float(np.abs(mean - ref).max()) / denom if np.abs(mean - ref).max() > 0 else 0.0
        max_rel = max(max_rel, rel)
        sum_rel += rel
        compared += 1
    mean_rel = sum_rel / compared if compared else 0.0
    partition.to_csv(out_dir / "oracle_partition.csv")
    state.fine.export_csv(out_dir / "table_fine.csv")
    lines = [f"scene={settings['scene']}", f"backend={BACKEND}",
             f"vertices={len(vertices)}", f"compared={compared}",
             f"skipped={skipped}", f"voxels={len(partition)}",
             f"max_relative_error={max_rel!r}", f"mean_relative_error={mean_rel!r}"]
    _write_stats(out_dir / "oracle_compare.txt", lines)
    for line in lines:
        print(line)
    return 0


def _parse_counts(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(float(lo)), int(float(hi))
        counts = []
        n = lo
        while n < hi:
            counts.append(n)
            n *= 10
        counts.append(hi)
        return counts
    return [int(float(t)) for t in text.split(",") if t]


def _run_bench(settings: dict, vertices_spec: str) -> int:
    out_dir = Path(settings["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = _parse_counts(vertices_spec)
    sum_mode = settings.get("sum_mode", "fixed")
    points = bench_mod.scaling_sweep(counts, sum_mode=sum_mode)
    lines = [f"backend={BACKEND}", f"sum_mode={sum_mode}"]
    for p in points:
        print(p.line())
        lines.append(p.line())
    ratio = bench_mod.spread(points)
    lines.append(f"per_vertex_spread={ratio:.3f}")
    print(f"per_vertex_spread={ratio:.3f}")
    comparison = bench_mod.backend_comparison(min(1_000_000, counts[-1]), sum_mode)
    for p in comparison:
        line = "compare_" + p.line()
        print(line)
        lines.append(line)
    _write_stats(out_dir / "bench.txt", lines)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _merge_settings(args)
        t0 = time.perf_counter()
        mode = settings["mode"]
        if mode == "bench":
            rc = _run_bench(settings, args.vertices)
        elif mode == "oracle-compare":
            rc = _run_oracle_compare(settings)
        else:
            rc = _run_render(settings)
        print(f"done mode={mode} elapsed={time.perf_counter() - t0:.2f}s "
              f"backend={BACKEND}")
        return rc
    except (SceneError, ValueError, OSError) as exc:
        print(f"pathfilter: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
