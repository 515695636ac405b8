"""Deterministic synthetic driving scenes with exact ground truth.

A scene is a ground plane, an optional back wall facing the camera, and
axis-aligned boxes translating at constant velocity. A pinhole camera moves
along a straight line looking down world +x (world z is up). All geometry is
ray-cast in closed form, so depth, flow, occlusion and voxel labels are exact.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from flowocc import EMPTY
from flowocc.errors import InputError
from flowocc.voxel_lift import CameraModel, VoxelSpec

CLASS_NAMES = ["road", "building", "car", "truck", "person"]
ROAD, BUILDING, CAR, TRUCK, PERSON = 1, 2, 3, 4, 5

# camera axes (x right, y down, z forward) expressed in world coordinates
_CAM_TO_WORLD_ROT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    class_id: int
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.lo, self.hi, self.velocity = (tuple(float(v) for v in a) for a in (self.lo, self.hi, self.velocity))
        self.class_id = int(self.class_id)

    def bounds(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        shift = np.asarray(self.velocity, dtype=np.float64) * t
        return np.asarray(self.lo, dtype=np.float64) + shift, np.asarray(self.hi, dtype=np.float64) + shift


@dataclass
class SceneConfig:
    seed: int = 0
    width: int = 64
    height: int = 64
    focal: float = 32.0
    frame_count: int = 5
    camera_start: tuple[float, float, float] = (0.0, 0.0, 1.6)
    camera_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ground_height: float | None = 0.0
    ground_class: int = ROAD
    wall_distance: float | None = 50.0
    wall_class: int = BUILDING
    boxes: list[Box] = field(default_factory=list)
    lidar_row_step: int = 4
    lidar_row_offset: int = 0
    lidar_col_step: int = 2
    stereo_sigma: float = 0.5
    feature_channels: int = 8
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        if self.frame_count < 3:
            raise InputError("a scene needs at least three frames")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise InputError("bad image geometry")
        if min(self.lidar_row_step, self.lidar_col_step) < 1 or not 0 <= self.lidar_row_offset < self.lidar_row_step:
            raise InputError("bad lidar scan pattern")
        if self.stereo_sigma < 0:
            raise InputError("stereo_sigma must be >= 0")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def intrinsics(self) -> np.ndarray:
        return np.array([
            [self.focal, 0.0, (self.width - 1) / 2.0],
            [0.0, self.focal, (self.height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ])

    def camera(self, t: int) -> CameraModel:
        pose = np.eye(4)
        pose[:3, :3] = _CAM_TO_WORLD_ROT
        pose[:3, 3] = np.asarray(self.camera_start) + np.asarray(self.camera_velocity) * t
        return CameraModel(self.intrinsics(), pose, self.width, self.height)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneConfig":
        d = dict(d)
        d["boxes"] = [Box(**b) for b in d.get("boxes", [])]
        for key in ("camera_start", "camera_velocity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def random_scene(seed: int, **overrides) -> SceneConfig:
    """A seeded street scene: moving vehicles and pedestrians in front of a wall.

    Objects stand on the ground 8-30 m ahead and move mostly sideways at
    1.2-3 m per frame; the camera creeps forward.
    """
    rng = np.random.default_rng([seed, 7919])
    sizes = {CAR: (4.0, 1.8, 1.5), TRUCK: (7.0, 2.5, 3.0), PERSON: (0.8, 0.8, 1.8)}
    boxes = []
    for _ in range(int(rng.integers(2, 5))):
        cls = int(rng.choice([CAR, CAR, TRUCK, PERSON]))
        sx, sy, sz = sizes[cls]
        x0 = float(rng.uniform(8.0, 30.0))
        y0 = float(rng.uniform(-8.0, 8.0))
        speed = float(rng.uniform(1.2, 3.0)) * float(rng.choice([-1.0, 1.0]))
        vel = (float(rng.uniform(-0.5, 0.5)), speed, 0.0)
        boxes.append(Box((x0, y0 - sy / 2, 0.0), (x0 + sx, y0 + sy / 2, sz), cls, vel))
    params = dict(
        seed=seed,
        camera_velocity=(float(rng.uniform(0.0, 0.4)), 0.0, 0.0),
        boxes=boxes,
    )
    params.update(overrides)
    return SceneConfig(**params)


class Hit(NamedTuple):
    depth: np.ndarray  # camera z-depth, inf where nothing is hit
    prim: np.ndarray  # -1 none, 0 ground, 1 wall, 2 + i box i
    points: np.ndarray  # world hit points


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test; ray parameter of the entry point, inf on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    parallel = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def cast_rays(config: SceneConfig, t: int, u: np.ndarray, v: np.ndarray) -> Hit:
    """Intersect rays through continuous pixel coordinates with the frame-``t`` scene."""
    cam = config.camera(t)
    dirs = cam.ray_dirs_cam(u, v) @ cam.rotation.T  # camera z component is 1, so s == z-depth
    origin = cam.position
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    prim = np.full(shape, -1, dtype=np.int64)

    def consider(s, pid):
        nonlocal best, prim
        closer = s < best
        best = np.where(closer, s, best)
        prim = np.where(closer, pid, prim)

    with np.errstate(divide="ignore", invalid="ignore"):
        if config.ground_height is not None:
            s = (config.ground_height - origin[2]) / dirs[..., 2]
            consider(np.where((dirs[..., 2] < 0) & (s > 0), s, np.inf), 0)
        if config.wall_distance is not None:
            s = (config.wall_distance - origin[0]) / dirs[..., 0]
            consider(np.where((dirs[..., 0] > 0) & (s > 0), s, np.inf), 1)
    for i, box in enumerate(config.boxes):
        lo, hi = box.bounds(t)
        consider(_ray_box(origin, dirs, lo, hi), 2 + i)

    points = origin + dirs * np.where(np.isfinite(best), best, 0.0)[..., None]
    return Hit(best, prim, points)


def prim_class(config: SceneConfig, prim: np.ndarray) -> np.ndarray:
    table = np.array([config.ground_class, config.wall_class] + [b.class_id for b in config.boxes] + [EMPTY])
    return table[np.where(prim < 0, len(table) - 1, prim)]


def prim_velocity(config: SceneConfig, prim: np.ndarray) -> np.ndarray:
    table = np.array([(0.0, 0.0, 0.0)] * 2 + [b.velocity for b in config.boxes] + [(0.0, 0.0, 0.0)], dtype=np.float64)
    return table[np.where(prim < 0, len(table) - 1, prim)]


class Frame(NamedTuple):
    depth: np.ndarray
    lidar: np.ndarray
    stereo: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def _check_frame(config: SceneConfig, t: int) -> None:
    if not 0 <= t < config.frame_count:
        raise InputError(f"frame {t} outside [0, {config.frame_count})")


def lidar_mask(config: SceneConfig) -> np.ndarray:
    rows = np.arange(config.height) % config.lidar_row_step == config.lidar_row_offset
    cols = np.arange(config.width) % config.lidar_col_step == 0
    return rows[:, None] & cols[None, :]


def _texture_params(config: SceneConfig):
    rng = np.random.default_rng([config.seed, 104729])
    c = config.feature_channels
    emb = rng.normal(0.0, 1.0, (config.num_classes + 1, c))
    freqs = rng.normal(0.0, 0.8, (c, 3))
    phases = rng.uniform(0.0, 2 * np.pi, c)
    return emb, freqs, phases


def render(config: SceneConfig, t: int) -> Frame:
    """Exact depth, sparse LiDAR, noisy stereo, per-class textured features and labels for frame ``t``."""
    _check_frame(config, t)
    ys, xs = np.mgrid[0:config.height, 0:config.width].astype(np.float64)
    hit = cast_rays(config, t, xs, ys)
    depth = np.where(np.isfinite(hit.depth), hit.depth, 0.0)
    labels = prim_class(config, hit.prim)

    lidar = np.where(lidar_mask(config) & (depth > 0), depth, 0.0)

    noise_rng = np.random.default_rng([config.seed, t, 1])
    noise = noise_rng.normal(0.0, 1.0, depth.shape) * config.stereo_sigma
    stereo = np.where(depth > 0, np.maximum(depth + noise, 0.1), 0.0) if config.stereo_sigma > 0 else depth.copy()

    # texture lives in each object's own frame so it moves with the object
    emb, freqs, phases = _texture_params(config)
    local = hit.points - prim_velocity(config, hit.prim) * t
    features = emb[labels] + 0.5 * np.sin(local @ freqs.T + phases)
    return Frame(depth, lidar, stereo, features, labels)


def _one_way_flow(config: SceneConfig, t: int, t2: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    hit = cast_rays(config, t, xs, ys)
    moved = hit.points + prim_velocity(config, hit.prim) * (t2 - t)
    u2, v2, z2 = config.camera(t2).project(moved)
    in_front = (z2 > 1e-9) & np.isfinite(hit.depth)
    u2 = np.where(in_front, u2, xs)
    v2 = np.where(in_front, v2, ys)
    flow = np.stack([u2 - xs, v2 - ys], axis=-1)

    eps = 1e-6  # absorbs projection round-off at the image border
    in_view = in_front & (u2 >= -eps) & (u2 <= w - 1 + eps) & (v2 >= -eps) & (v2 <= h - 1 + eps)
    seen = cast_rays(config, t2, u2, v2).depth
    tol = 1e-6 * np.maximum(z2, 1.0)
    visible = in_view & (seen >= z2 - tol)
    return flow, ~visible


def gt_flow(config: SceneConfig, t: int, t2: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact flows between frames ``t`` and ``t2`` and the frame-``t`` occlusion mask.

    Returns ``(fwd, bwd, occluded)``: ``fwd`` displaces frame-``t`` pixels to
    their surface point's position in ``t2``, ``bwd`` the reverse; ``occluded``
    is True for frame-``t`` pixels whose surface point is hidden in ``t2`` or
    projects outside ``[0, W-1] x [0, H-1]``.
    """
    _check_frame(config, t)
    _check_frame(config, t2)
    fwd, occ = _one_way_flow(config, t, t2)
    bwd, _ = _one_way_flow(config, t2, t)
    return fwd, bwd, occ


def gt_voxels(config: SceneConfig, t: int, spec: VoxelSpec) -> np.ndarray:
    """Label grid of the frame-``t`` world.

    The ground and wall planes label the cells they pass through (the wall
    only above ground level); boxes label every cell whose center lies inside
    them. Later objects overwrite earlier ones: ground, wall, then boxes in
    list order.
    """
    _check_frame(config, t)
    labels = np.full(spec.dims, EMPTY, dtype=np.int64)
    edges = [spec.origin[a] + np.arange(spec.dims[a] + 1) * spec.cell_size for a in range(3)]
    if config.ground_height is not None:
        g = config.ground_height
        rows = (edges[2][:-1] <= g) & (g < edges[2][1:])
        labels[:, :, rows] = config.ground_class
    if config.wall_distance is not None:
        wd = config.wall_distance
        cols = (edges[0][:-1] <= wd) & (wd < edges[0][1:])
        above = np.ones(spec.dims[2], dtype=bool) if config.ground_height is None else edges[2][1:] > config.ground_height
        labels[np.ix_(cols, np.ones(spec.dims[1], dtype=bool), above)] = config.wall_class
    centers = spec.centers()
    for box in config.boxes:
        lo, hi = box.bounds(t)
        inside = np.all((centers >= lo) & (centers < hi), axis=-1)
        labels[inside] = box.class_id
    return labels


def write_scene(config: SceneConfig, out_dir: str | Path, spec: VoxelSpec | None = None, current: int | None = None) -> Path:
    """Write every frame plus flows from the current frame to each earlier frame.

    Layout: ``manifest.json``, ``frame_XX/{depth,lidar,stereo,features,labels}.f32``,
    ``flow_CC_TT/{fwd,bwd,occlusion}.f32`` and ``voxels_CC.f32`` (+ sidecar).
    """
    from flowocc.tensorio import save_mask, save_tensor, save_voxels

    spec = spec or VoxelSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cur = config.frame_count - 1 if current is None else current
    _check_frame(config, cur)
    manifest: dict[str, Any] = {
        "scene": config.to_dict(),
        "voxel_spec": spec.to_dict(),
        "current": cur,
        "cameras": {str(t): config.camera(t).to_dict() for t in range(config.frame_count)},
        "frames": {},
        "flows": {},
    }
    for t in range(config.frame_count):
        fr = render(config, t)
        files = {}
        for name in Frame._fields:
            files[name] = f"frame_{t:02d}/{name}.f32"
            save_tensor(out / files[name], getattr(fr, name))
        manifest["frames"][str(t)] = files
    for t2 in range(cur - 1, -1, -1):
        fwd, bwd, occ = gt_flow(config, cur, t2)
        base = f"flow_{cur:02d}_{t2:02d}"
        save_tensor(out / base / "fwd.f32", fwd)
        save_tensor(out / base / "bwd.f32", bwd)
        save_mask(out / base / "occlusion.f32", occ)
        manifest["flows"][str(t2)] = {k: f"{base}/{k}.f32" for k in ("fwd", "bwd", "occlusion")}
    vox = f"voxels_{cur:02d}.f32"
    save_voxels(out / vox, gt_voxels(config, cur, spec), spec, config.class_names)
    manifest["voxels"] = vox
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"
