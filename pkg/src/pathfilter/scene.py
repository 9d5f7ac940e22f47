"""Scene description: triangle geometry, materials, area lights, camera.

Scenes are triangle soups with per-triangle material ids and emission.  A
small line-based text format (see docs/FORMATS.md) covers cameras, materials,
triangles, quads, lights and per-frame motion; `cornell_box` builds the
standard test scene procedurally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class SceneError(ValueError):
    """Raised for invalid scene definitions or files."""


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float  # vertical, radians
    width: int
    height: int

    def basis(self):
        """Right-handed orthonormal (right, up, forward) for ray generation."""
        fwd = self.look_at - self.position
        norm = np.linalg.norm(fwd)
        if norm == 0.0:
            raise SceneError("camera position and look_at coincide")
        fwd = fwd / norm
        right = np.cross(fwd, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise SceneError("camera up is parallel to the view direction")
        right = right / rn
        up = np.cross(right, fwd)
        return right, up, fwd


@dataclass
class Material:
    name: str
    albedo: np.ndarray  # diffuse RGB in [0, 1]
    glossy_weight: float = 0.0  # probability mass of the glossy lobe
    glossy_exponent: float = 0.0

    @property
    def diffuse_weight(self) -> float:
        return 1.0 - self.glossy_weight


@dataclass
class Motion:
    """Per-frame linear transforms applied by Scene.at_frame."""

    camera_velocity: np.ndarray | None = None
    light_velocity: np.ndarray | None = None
    emission_scale: float | None = None  # per-frame multiplicative factor


@dataclass
class Scene:
    camera: Camera
    materials: list[Material]
    # triangle arrays, shape (M, 3) unless noted
    v0: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    e1: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    e2: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    area: np.ndarray = field(default_factory=lambda: np.zeros(0))
    material_id: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    emission: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frames: int = 1
    motion: Motion = field(default_factory=Motion)

    @property
    def light_indices(self) -> np.ndarray:
        return np.nonzero(self.emission.max(axis=1) > 0.0)[0]

    def validate(self) -> "Scene":
        if not (0.0 < self.camera.fov < math.pi):
            raise SceneError("camera fov must be in (0, pi)")
        if self.camera.width < 1 or self.camera.height < 1:
            raise SceneError("image dimensions must be positive")
        if len(self.v0) == 0:
            raise SceneError("scene has no geometry")
        if np.any(self.area <= 1e-14):
            raise SceneError("degenerate (zero-area) triangle in scene")
        for m in self.materials:
            if np.any(m.albedo < 0.0) or np.any(m.albedo > 1.0):
                raise SceneError(f"material {m.name!r}: albedo outside [0, 1]")
            if not 0.0 <= m.glossy_weight <= 1.0:
                raise SceneError(f"material {m.name!r}: glossy weight outside [0, 1]")
        if len(self.light_indices) == 0:
            raise SceneError("scene has no light source")
        if np.any(self.emission < 0.0):
            raise SceneError("negative emission")
        self.camera.basis()
        return self

    def at_frame(self, frame: int) -> "Scene":
        """Scene state at a frame index, applying the motion block."""
        if frame == 0 or (
            self.motion.camera_velocity is None
            and self.motion.light_velocity is None
            and self.motion.emission_scale is None
        ):
            return self
        s = replace(self)
        if self.motion.camera_velocity is not None:
            d = self.motion.camera_velocity * frame
            s.camera = replace(self.camera, position=self.camera.position + d,
                               look_at=self.camera.look_at + d)
        if self.motion.light_velocity is not None:
            lit = self.emission.max(axis=1) > 0.0
            d = self.motion.light_velocity * frame
            v0 = self.v0.copy()
            v0[lit] += d
            s.v0 = v0
        if self.motion.emission_scale is not None:
            s.emission = self.emission * (self.motion.emission_scale ** frame)
        return s

    @property
    def max_emission(self) -> float:
        return float(self.emission.max()) if len(self.emission) else 0.0


class SceneBuilder:
    """Accumulates triangles and materials, then freezes into a Scene."""

    def __init__(self):
        self.camera: Camera | None = None
        self.materials: list[Material] = []
        self._mat_index: dict[str, int] = {}
        self._tris: list[tuple[np.ndarray, np.ndarray, np.ndarray, int, np.ndarray]] = []
        self.background = np.zeros(3)
        self.frames = 1
        self.motion = Motion()

    def add_material(self, m: Material) -> int:
        if m.name in self._mat_index:
            raise SceneError(f"duplicate material {m.name!r}")
        self._mat_index[m.name] = len(self.materials)
        self.materials.append(m)
        return self._mat_index[m.name]

    def material_id(self, name: str) -> int:
        if name not in self._mat_index:
            raise SceneError(f"unknown material {name!r}")
        return self._mat_index[name]

    def add_triangle(self, a, b, c, material: str, emission=(0.0, 0.0, 0.0)):
        mid = self.material_id(material)
        self._tris.append((np.asarray(a, float), np.asarray(b, float),
                           np.asarray(c, float), mid, np.asarray(emission, float)))

    def add_quad(self, a, b, c, d, material: str, emission=(0.0, 0.0, 0.0)):
        """Quad with vertices in winding order; split into two triangles."""
        self.add_triangle(a, b, c, material, emission)
        self.add_triangle(a, c, d, material, emission)

    def build(self) -> Scene:
        if self.camera is None:
            raise SceneError("scene has no camera")
        n = len(self._tris)
        v0 = np.zeros((n, 3))
        e1 = np.zeros((n, 3))
        e2 = np.zeros((n, 3))
        emission = np.zeros((n, 3))
        material_id = np.zeros(n, np.int32)
        for i, (a, b, c, mid, em) in enumerate(self._tris):
            v0[i] = a
            e1[i] = b - a
            e2[i] = c - a
            material_id[i] = mid
            emission[i] = em
        cross = np.cross(e1, e2)
        norm = np.linalg.norm(cross, axis=1)
        area = 0.5 * norm
        with np.errstate(invalid="ignore", divide="ignore"):
            normal = np.where(norm[:, None] > 0, cross / np.maximum(norm, 1e-300)[:, None], 0.0)
        scene = Scene(camera=self.camera, materials=list(self.materials),
                      v0=v0, e1=e1, e2=e2, normal=normal, area=area,
                      material_id=material_id, emission=emission,
                      background=self.background, frames=self.frames,
                      motion=self.motion)
        return scene.validate()


def cornell_box(width: int = 64, height: int = 64, glossy_back: bool = False) -> Scene:
    """The classic five-wall box with a ceiling light, in meters.

    Box spans [0, 5.5]^3 with the camera outside the open front face.  With
    glossy_back=True the back wall carries a mild glossy layer for tests that
    need a second material layer.
    """
    b = SceneBuilder()
    s = 5.5
    b.camera = Camera(position=np.array([s / 2, s / 2, -8.0]),
                      look_at=np.array([s / 2, s / 2, 0.0]),
                      up=np.array([0.0, 1.0, 0.0]),
                      fov=2.0 * math.atan((s / 2) / 8.0),
                      width=width, height=height)
    b.add_material(Material("white", np.array([0.73, 0.73, 0.73])))
    b.add_material(Material("red", np.array([0.65, 0.05, 0.05])))
    b.add_material(Material("green", np.array([0.12, 0.45, 0.15])))
    b.add_material(Material("lamp", np.zeros(3)))
    if glossy_back:
        b.add_material(Material("glossyback", np.array([0.6, 0.6, 0.7]),
                                glossy_weight=0.3, glossy_exponent=40.0))
    back = "glossyback" if glossy_back else "white"

    # floor (y=0, normal +y), ceiling (y=s, normal -y), back (z=s, normal -z),
    # left (x=0, normal +x, red), right (x=s, normal -x, green)
    b.add_quad((0, 0, 0), (0, 0, s), (s, 0, s), (s, 0, 0), "white")
    b.add_quad((0, s, 0), (s, s, 0), (s, s, s), (0, s, s), "white")
    b.add_quad((0, 0, s), (0, s, s), (s, s, s), (s, 0, s), back)
    b.add_quad((0, 0, 0), (0, s, 0), (0, s, s), (0, 0, s), "red")
    b.add_quad((s, 0, 0), (s, 0, s), (s, s, s), (s, s, 0), "green")
    # light: downward-facing quad slightly below the ceiling
    lx0, lx1 = 0.35 * s, 0.65 * s
    lz0, lz1 = 0.35 * s, 0.65 * s
    ly = s - 0.01
    b.add_quad((lx0, ly, lz0), (lx1, ly, lz0), (lx1, ly, lz1), (lx0, ly, lz1),
               "lamp", emission=(17.0, 13.0, 6.0))
    return b.build()


def occluded_box(width: int = 8, height: int = 8) -> Scene:
    """Closed box split by a full divider; the camera chamber has no light.

    Every camera path is fully occluded from the single light, so the exact
    image is black.
    """
    b = SceneBuilder()
    s = 4.0
    b.camera = Camera(position=np.array([s / 2, s / 2, 0.5]),
                      look_at=np.array([s / 2, s / 2, s]),
                      up=np.array([0.0, 1.0, 0.0]),
                      fov=1.0, width=width, height=height)
    b.add_material(Material("grey", np.array([0.5, 0.5, 0.5])))
    b.add_material(Material("lamp", np.zeros(3)))
    # outer box (normals inward)
    b.add_quad((0, 0, 0), (0, 0, s), (s, 0, s), (s, 0, 0), "grey")
    b.add_quad((0, s, 0), (s, s, 0), (s, s, s), (0, s, s), "grey")
    b.add_quad((0, 0, s), (0, s, s), (s, s, s), (s, 0, s), "grey")
    b.add_quad((0, 0, 0), (s, 0, 0), (s, s, 0), (0, s, 0), "grey")
    b.add_quad((0, 0, 0), (0, s, 0), (0, s, s), (0, 0, s), "grey")
    b.add_quad((s, 0, 0), (s, 0, s), (s, s, s), (s, s, 0), "grey")
    # full divider at z = s/2 + 1.2 (two-sided material, camera side dark)
    zd = s / 2 + 1.2
    b.add_quad((0, 0, zd), (0, s, zd), (s, s, zd), (s, 0, zd), "grey")
    # light behind the divider, facing the far chamber
    b.add_quad((1, s - 0.01, zd + 0.5), (3, s - 0.01, zd + 0.5),
               (3, s - 0.01, zd + 1.5), (1, s - 0.01, zd + 1.5),
               "lamp", emission=(10.0, 10.0, 10.0))
    return b.build()


def corridor(width: int = 32, height: int = 32, length: float = 80.0,
             frames: int = 200, pan_speed: float = 0.35) -> Scene:
    """Long floor/wall strip with a camera-attached light, panning along +x.

    Used for eviction tests: the camera sweep keeps retiring voxels behind it.
    """
    b = SceneBuilder()
    b.camera = Camera(position=np.array([2.0, 1.5, -3.5]),
                      look_at=np.array([2.0, 1.0, 0.0]),
                      up=np.array([0.0, 1.0, 0.0]),
                      fov=1.1, width=width, height=height)
    b.add_material(Material("floor", np.array([0.6, 0.6, 0.55])))
    b.add_material(Material("wall", np.array([0.55, 0.5, 0.45])))
    b.add_material(Material("lamp", np.zeros(3)))
    b.add_quad((-5, 0, -6), (-5, 0, 3), (length, 0, 3), (length, 0, -6), "floor")
    b.add_quad((-5, 0, 3), (-5, 4, 3), (length, 4, 3), (length, 0, 3), "wall")
    # headlamp above and behind the camera, moving with it
    b.add_quad((1.0, 3.2, -4.4), (3.0, 3.2, -4.4), (3.0, 3.2, -2.4),
               (1.0, 3.2, -2.4), "lamp", emission=(40.0, 40.0, 40.0))
    b.frames = frames
    v = np.array([pan_speed, 0.0, 0.0])
    b.motion = Motion(camera_velocity=v, light_velocity=v)
    return b.build()


def shadow_sweep(width: int = 40, height: int = 40, frames: int = 6,
                 light_velocity: float = 0.9) -> Scene:
    """Open-top room with a blocker; the light strafes so its shadow sweeps.

    Drives the temporal-mode comparisons: the moving shadow boundary reveals
    stale history, the static floor rewards integration.
    """
    b = SceneBuilder()
    s = 5.5
    b.camera = Camera(position=np.array([s / 2, 4.6, -7.0]),
                      look_at=np.array([s / 2, 0.8, s / 2]),
                      up=np.array([0.0, 1.0, 0.0]),
                      fov=0.72, width=width, height=height)
    b.add_material(Material("white", np.array([0.73, 0.73, 0.73])))
    b.add_material(Material("block", np.array([0.25, 0.25, 0.3])))
    b.add_material(Material("lamp", np.zeros(3)))
    b.add_quad((0, 0, 0), (0, 0, s), (s, 0, s), (s, 0, 0), "white")
    b.add_quad((0, 0, s), (0, s, s), (s, s, s), (s, 0, s), "white")
    # standing blocker slab in the middle of the room
    bx0, bx1, bz = 2.2, 3.3, 2.6
    b.add_quad((bx0, 0, bz), (bx0, 2.2, bz), (bx1, 2.2, bz), (bx1, 0, bz), "block")
    b.add_quad((bx0, 0, bz + 0.15), (bx1, 0, bz + 0.15), (bx1, 2.2, bz + 0.15),
               (bx0, 2.2, bz + 0.15), "block")
    # small bright light that strafes in +x
    b.add_quad((0.4, 4.9, 2.0), (1.2, 4.9, 2.0), (1.2, 4.9, 2.8), (0.4, 4.9, 2.8),
               "lamp", emission=(90.0, 90.0, 90.0))
    b.frames = frames
    b.motion = Motion(light_velocity=np.array([light_velocity, 0.0, 0.0]))
    return b.build()


_BUILTINS = {
    "cornell": cornell_box,
    "cornell-glossy": lambda **kw: cornell_box(glossy_back=True, **kw),
    "occluded": occluded_box,
    "corridor": corridor,
    "shadow-sweep": shadow_sweep,
}


def load_scene(source: str, width: int | None = None, height: int | None = None) -> Scene:
    """Load a builtin scene by name or parse a scene file from disk."""
    if source in _BUILTINS:
        kw = {}
        if width is not None:
            kw["width"] = width
        if height is not None:
            kw["height"] = height
        return _BUILTINS[source](**kw)
    with open(source, "r", encoding="utf-8") as fh:
        scene = parse_scene(fh.read())
    if width is not None or height is not None:
        cam = scene.camera
        scene.camera = replace(cam, width=width or cam.width, height=height or cam.height)
    return scene


def _floats(tokens, n, what):
    if len(tokens) != n:
        raise SceneError(f"{what}: expected {n} numbers, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneError(f"{what}: {exc}") from None


def parse_scene(text: str) -> Scene:
    """Parse the line-based scene text format (docs/FORMATS.md)."""
    b = SceneBuilder()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, args = tok[0], tok[1:]
        try:
            if kind == "camera":
                vals = _floats(args[:-2], 10, "camera")
                b.camera = Camera(position=np.array(vals[0:3]),
                                  look_at=np.array(vals[3:6]),
                                  up=np.array(vals[6:9]), fov=vals[9],
                                  width=int(args[-2]), height=int(args[-1]))
            elif kind == "material":
                name = args[0]
                vals = _floats(args[1:4], 3, "material albedo")
                gw, ge = 0.0, 0.0
                rest = args[4:]
                if rest:
                    if rest[0] != "glossy" or len(rest) != 3:
                        raise SceneError("material: trailing tokens must be 'glossy W E'")
                    gw, ge = float(rest[1]), float(rest[2])
                b.add_material(Material(name, np.array(vals), gw, ge))
            elif kind in ("tri", "quad"):
                npts = 3 if kind == "tri" else 4
                vals = _floats(args[: 3 * npts], 3 * npts, kind)
                rest = args[3 * npts:]
                if not rest:
                    raise SceneError(f"{kind}: missing material name")
                mat = rest[0]
                emission = (0.0, 0.0, 0.0)
                if len(rest) > 1:
                    if rest[1] != "emit" or len(rest) != 5:
                        raise SceneError(f"{kind}: trailing tokens must be 'emit R G B'")
                    emission = tuple(float(x) for x in rest[2:5])
                pts = [vals[3 * i: 3 * i + 3] for i in range(npts)]
                if kind == "tri":
                    b.add_triangle(*pts, material=mat, emission=emission)
                else:
                    b.add_quad(*pts, material=mat, emission=emission)
            elif kind == "background":
                b.background = np.array(_floats(args, 3, "background"))
            elif kind == "frames":
                b.frames = int(args[0])
            elif kind == "move":
                target = args[0]
                vals = np.array(_floats(args[1:], 3, "move"))
                if target == "camera":
                    b.motion.camera_velocity = vals
                elif target == "lights":
                    b.motion.light_velocity = vals
                else:
                    raise SceneError(f"move: unknown target {target!r}")
            elif kind == "emission_scale":
                b.motion.emission_scale = float(args[0])
            else:
                raise SceneError(f"unknown directive {kind!r}")
        except (IndexError, ValueError) as exc:
            raise SceneError(f"line {lineno}: {exc}") from None
    return b.build()
