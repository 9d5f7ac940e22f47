"""Path space filtering in hashed voxels.

A deterministic CPU path tracer feeds per-path vertices into a concurrent
open-addressing hash table keyed by jittered, quantized, LOD-aware voxel
coordinates; per-voxel radiance averages replace the noisy per-path
contributions.  Hot kernels run in a compiled extension when available
(`pathfilter._backend.BACKEND` reports which one is active).
"""

from ._backend import BACKEND, available_backends
from .keys import CellHashes, CellKey, FilterConfig, hashes, jitter_position, \
    level_of_detail, make_cell_key
from .oracle import ball_average, brute_voxel_average, image_mse
from .pipeline import FrameState, accumulate_phase, render_frame, resolve_phase, \
    run_sequence
from .scene import Scene, cornell_box, load_scene, parse_scene
from .table import InsertOutcome, Outcome, VoxelTable
from .temporal import blend, migrate_resolution, temporal_difference
from .tracer import TraceOptions, TraceResult, VertexDescriptor, VertexStream, \
    reevaluate, trace

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "available_backends", "CellHashes", "CellKey", "FilterConfig",
    "hashes", "jitter_position", "level_of_detail", "make_cell_key",
    "ball_average", "brute_voxel_average", "image_mse", "FrameState",
    "accumulate_phase", "render_frame", "resolve_phase", "run_sequence",
    "Scene", "cornell_box", "load_scene", "parse_scene", "InsertOutcome",
    "Outcome", "VoxelTable", "blend", "migrate_resolution",
    "temporal_difference", "TraceOptions", "TraceResult", "VertexDescriptor",
    "VertexStream", "reevaluate", "trace",
]
