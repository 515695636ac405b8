"""Image-to-voxel lifting and voxel refinement.

Cameras follow the OpenCV convention (x right, y down, z forward); depth
values are camera z-depth. Voxel grids are ``(X, Y, Z, C)`` arrays on a
:class:`VoxelSpec`, with continuous voxel coordinates that are integral at
cell centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from flowocc.errors import InputError, ShapeError
from flowocc.grid import bilinear_sample_points, check_feature_map, trilinear_sample_points
from flowocc.nn import conv2d, conv3d, relu, softmax


@dataclass
class CameraModel:
    intrinsics: np.ndarray
    cam_to_world: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.intrinsics.shape != (3, 3) or self.cam_to_world.shape != (4, 4):
            raise InputError("intrinsics must be 3x3 and extrinsics 4x4")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise InputError("intrinsics are singular")
        rot = self.cam_to_world[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InputError("extrinsic rotation is not a proper rotation")
        if not np.allclose(self.cam_to_world[3], [0, 0, 0, 1]):
            raise InputError("extrinsics last row must be [0, 0, 0, 1]")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    def ray_dirs_cam(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame directions with unit z component through pixel coords ``(u, v)``."""
        u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        return pix @ np.linalg.inv(self.intrinsics).T

    def unproject(self, u, v, depth) -> np.ndarray:
        pts_cam = self.ray_dirs_cam(u, v) * np.asarray(depth, dtype=np.float64)[..., None]
        return pts_cam @ self.rotation.T + self.position

    def to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return (np.asarray(pts_world, dtype=np.float64) - self.position) @ self.rotation

    def project(self, pts_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel ``(u, v)`` and depth ``z`` of world points; ``u, v`` are NaN where ``z <= 0``."""
        pc = self.to_camera(pts_world)
        z = pc[..., 2]
        pix = pc @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(z > 0, pix[..., 0] / z, np.nan)
            v = np.where(z > 0, pix[..., 1] / z, np.nan)
        return u, v, z

    def to_dict(self) -> dict[str, Any]:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "cam_to_world": self.cam_to_world.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CameraModel":
        return cls(np.array(d["intrinsics"]), np.array(d["cam_to_world"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class VoxelSpec:
    dims: tuple[int, int, int] = (32, 32, 8)
    origin: tuple[float, float, float] = (0.0, -25.6, -1.0)
    cell_size: float = 1.6

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InputError(f"voxel dims must be three positive counts, got {self.dims}")
        if not self.cell_size > 0:
            raise InputError("cell size must be positive")

    def continuous_index(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / self.cell_size - 0.5

    def index_of(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer cell index of each point and whether it lies inside the grid."""
        idx = np.floor((np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / self.cell_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def centers(self) -> np.ndarray:
        """World coordinates of all cell centers, shape ``(X, Y, Z, 3)``."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.cell_size for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict[str, Any]:
        return {"dims": list(self.dims), "origin": list(self.origin), "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VoxelSpec":
        return cls(tuple(d["dims"]), tuple(d["origin"]), float(d["cell_size"]))


def lss_lift(
    d_v: np.ndarray,
    feat: np.ndarray,
    cam: CameraModel,
    spec: VoxelSpec,
    bin_centers: np.ndarray,
) -> tuple[np.ndarray, int]:
    """Splat ``d_v[b, p] * feat[p]`` into the voxel holding pixel ``p`` lifted to depth bin ``b``.

    Returns the ``(X, Y, Z, C)`` grid and the number of (pixel, bin) points
    that fell outside it. Each point lands wholly in its containing cell.
    """
    d_v = np.asarray(d_v, dtype=np.float64)
    feat = check_feature_map(feat, "feat")
    bin_centers = np.asarray(bin_centers, dtype=np.float64)
    n_bins, h, w = d_v.shape
    if feat.shape[:2] != (h, w):
        raise ShapeError(f"depth volume {d_v.shape} vs features {feat.shape}")
    if bin_centers.shape != (n_bins,):
        raise ShapeError(f"{bin_centers.shape[0]} bin centers for {n_bins} bins")

    ys, xs = np.mgrid[0:h, 0:w]
    pts = cam.unproject(xs[None], ys[None], bin_centers[:, None, None] * np.ones((1, h, w)))
    idx, inside = spec.index_of(pts)
    nx, ny, nz = spec.dims
    flat = (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]

    flat_in = flat[inside]
    order = np.argsort(flat_in, kind="stable")
    flat_in = flat_in[order]
    weights = (d_v[..., None] * feat[None])[inside][order]
    c = feat.shape[2]
    grid = np.empty((nx * ny * nz, c), dtype=np.float64)
    for ch in range(c):
        grid[:, ch] = np.bincount(flat_in, weights=weights[:, ch], minlength=nx * ny * nz)
    return grid.reshape(nx, ny, nz, c), int((~inside).sum())


def propose(v_coarse: np.ndarray, threshold: float, max_count: int = 1024) -> np.ndarray:
    """Voxels whose feature norm exceeds ``threshold``, strongest first.

    Ties in norm are broken by ascending flat index. Returns ``(N, 3)`` indices.
    """
    v_coarse = np.asarray(v_coarse, dtype=np.float64)
    norms = np.linalg.norm(v_coarse, axis=-1).ravel()
    cand = np.flatnonzero(norms > threshold)
    order = np.lexsort((cand, -norms[cand]))
    chosen = cand[order][:max_count]
    return np.stack(np.unravel_index(chosen, v_coarse.shape[:3]), axis=-1).astype(np.int64)


@dataclass
class DeformAttnParams:
    """Offset, attention-weight and value projections for one deformable attention layer.

    ``offset_w`` is ``(k * ndim, Cq)``, ``attn_w`` is ``(k, Cq)``, ``value_w``
    is ``(Cout, Cin)``.
    """

    n_points: int
    ndim: int
    offset_w: np.ndarray
    offset_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_points < 1:
            raise InputError("n_points must be >= 1")
        k, nd = self.n_points, self.ndim
        self.offset_w = np.asarray(self.offset_w, dtype=np.float64)
        self.offset_b = np.asarray(self.offset_b, dtype=np.float64)
        self.attn_w = np.asarray(self.attn_w, dtype=np.float64)
        self.attn_b = np.asarray(self.attn_b, dtype=np.float64)
        self.value_w = np.asarray(self.value_w, dtype=np.float64)
        if self.value_b is None:
            self.value_b = np.zeros(self.value_w.shape[0])
        self.value_b = np.asarray(self.value_b, dtype=np.float64)
        cq = self.attn_w.shape[1]
        if self.offset_w.shape != (k * nd, cq) or self.offset_b.shape != (k * nd,):
            raise ShapeError("offset predictor shape mismatch")
        if self.attn_w.shape != (k, cq) or self.attn_b.shape != (k,):
            raise ShapeError("attention predictor shape mismatch")
        if self.value_b.shape != (self.value_w.shape[0],):
            raise ShapeError("value bias shape mismatch")

    @classmethod
    def zero_init(cls, n_points: int, ndim: int, c_query: int, c_in: int | None = None, c_out: int | None = None):
        """Zero offsets, uniform attention, identity value projection."""
        c_in = c_query if c_in is None else c_in
        c_out = c_in if c_out is None else c_out
        return cls(
            n_points, ndim,
            np.zeros((n_points * ndim, c_query)), np.zeros(n_points * ndim),
            np.zeros((n_points, c_query)), np.zeros(n_points),
            np.eye(c_out, c_in),
        )

    @classmethod
    def random(cls, n_points: int, ndim: int, c_query: int, rng: np.random.Generator, c_in: int | None = None, c_out: int | None = None):
        # offset predictor starts at zero (standard deformable init)
        p = cls.zero_init(n_points, ndim, c_query, c_in, c_out)
        p.attn_w = rng.normal(0, 1 / np.sqrt(c_query), p.attn_w.shape)
        p.value_w = rng.normal(0, 1 / np.sqrt(p.value_w.shape[1]), p.value_w.shape)
        return p

    def predict(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Offsets ``(..., k, ndim)`` and normalized weights ``(..., k)`` for query features."""
        offs = (queries @ self.offset_w.T + self.offset_b).reshape(queries.shape[:-1] + (self.n_points, self.ndim))
        weights = softmax(queries @ self.attn_w.T + self.attn_b, axis=-1)
        return offs, weights


def dca(
    proposals: np.ndarray,
    v_coarse: np.ndarray,
    feat: np.ndarray,
    cam: CameraModel,
    spec: VoxelSpec,
    params: DeformAttnParams,
    return_weights: bool = False,
):
    """Deformable cross-attention from proposal voxels into image features.

    Each proposal voxel's center is projected into the image; its feature
    predicts ``k`` pixel offsets and weights, ``feat`` is sampled bilinearly
    at those points, and the value-projected weighted sum replaces the voxel.
    Voxels not proposed, or proposed but behind the camera, are unchanged.
    """
    v_coarse = np.asarray(v_coarse, dtype=np.float64)
    feat = check_feature_map(feat, "feat")
    proposals = np.asarray(proposals, dtype=np.int64).reshape(-1, 3)
    if np.any(proposals < 0) or np.any(proposals >= np.asarray(v_coarse.shape[:3])):
        raise InputError("proposal index outside grid")
    if params.ndim != 2:
        raise InputError("cross-attention needs 2D offsets")

    out = v_coarse.copy()
    centers = spec.centers()[proposals[:, 0], proposals[:, 1], proposals[:, 2]]
    u, v, z = cam.project(centers)
    front = z > 1e-6
    sel = proposals[front]
    queries = v_coarse[sel[:, 0], sel[:, 1], sel[:, 2]]
    offs, weights = params.predict(queries)
    sampled = bilinear_sample_points(feat, u[front][:, None] + offs[..., 0], v[front][:, None] + offs[..., 1])
    agg = np.einsum("nk,nkc->nc", weights, sampled)
    out[sel[:, 0], sel[:, 1], sel[:, 2]] = agg @ params.value_w.T + params.value_b
    if return_weights:
        return out, weights
    return out


def merge_raw(q_s: np.ndarray, v_raw: np.ndarray) -> np.ndarray:
    q_s = np.asarray(q_s, dtype=np.float64)
    v_raw = np.asarray(v_raw, dtype=np.float64)
    if q_s.shape != v_raw.shape:
        raise ShapeError(f"cannot merge {q_s.shape} with {v_raw.shape}")
    return q_s + v_raw


def dsa(grid: np.ndarray, params: DeformAttnParams, return_weights: bool = False):
    """Deformable self-attention in voxel space with a residual connection.

    Offsets are in voxel units relative to each voxel's own center; samples
    are trilinear and read zero outside the grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4:
        raise ShapeError(f"voxel grid must be (X, Y, Z, C), got {grid.shape}")
    if params.ndim != 3:
        raise InputError("self-attention needs 3D offsets")
    offs, weights = params.predict(grid)
    base = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid.shape[:3]], indexing="ij"), axis=-1)
    sampled = trilinear_sample_points(grid, base[..., None, :] + offs)
    agg = np.einsum("xyzk,xyzkc->xyzc", weights, sampled)
    out = grid + agg @ params.value_w.T + params.value_b
    if return_weights:
        return out, weights
    return out


@dataclass
class LocalEncoderWeights:
    """Residual block: ``x + conv2(relu(conv1(x)))`` with 3x3x3 kernels."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def identity(cls, c: int) -> "LocalEncoderWeights":
        z = np.zeros((c, c, 3, 3, 3))
        return cls(z, np.zeros(c), z.copy(), np.zeros(c))

    @classmethod
    def random(cls, c: int, rng: np.random.Generator) -> "LocalEncoderWeights":
        s = 1 / np.sqrt(27 * c)
        return cls(rng.normal(0, s, (c, c, 3, 3, 3)), np.zeros(c), rng.normal(0, s, (c, c, 3, 3, 3)), np.zeros(c))


@dataclass
class TpvWeights:
    """One 3x3 conv ``(C, C, 3, 3)`` per plane, keyed ``xy``, ``xz``, ``yz``."""

    w: dict[str, np.ndarray]
    b: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, c: int) -> "TpvWeights":
        return cls({p: np.zeros((c, c, 3, 3)) for p in PLANES}, {p: np.zeros(c) for p in PLANES})

    @classmethod
    def random(cls, c: int, rng: np.random.Generator) -> "TpvWeights":
        s = 1 / np.sqrt(9 * c)
        return cls({p: rng.normal(0, s, (c, c, 3, 3)) for p in PLANES}, {p: np.zeros(c) for p in PLANES})


PLANES = ("xy", "xz", "yz")
_COLLAPSED_AXIS = {"xy": 2, "xz": 1, "yz": 0}


def tpv_planes(grid: np.ndarray, tpv: TpvWeights) -> dict[str, np.ndarray]:
    """Mean-pool the grid onto its three axis planes and convolve each."""
    return {p: conv2d(grid.mean(axis=_COLLAPSED_AXIS[p]), tpv.w[p], tpv.b[p]) for p in PLANES}


def occ_encode(
    grid: np.ndarray,
    local_weights: LocalEncoderWeights,
    tpv_weights: TpvWeights,
    fusion_weight: float,
    return_planes: bool = False,
):
    """Blend a local residual 3D conv branch with a three-plane global branch.

    ``out = fusion_weight * local + (1 - fusion_weight) * global`` where the
    global branch broadcast-sums the transformed planes back into 3D.
    """
    if not 0.0 <= fusion_weight <= 1.0:
        raise InputError(f"fusion weight must lie in [0, 1], got {fusion_weight}")
    grid = np.asarray(grid, dtype=np.float64)
    lw = local_weights
    local = grid + conv3d(relu(conv3d(grid, lw.w1, lw.b1)), lw.w2, lw.b2)
    planes = tpv_planes(grid, tpv_weights)
    glob = planes["xy"][:, :, None] + planes["xz"][:, None, :] + planes["yz"][None, :, :]
    out = fusion_weight * local + (1.0 - fusion_weight) * glob
    if return_planes:
        return out, planes
    return out


def classify(grid: np.ndarray, head_w: np.ndarray, head_b: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Linear per-voxel head. Returns ``(labels, logits)``; ties go to the lowest class id."""
    grid = np.asarray(grid, dtype=np.float64)
    head_w = np.asarray(head_w, dtype=np.float64)
    logits = grid @ head_w.T
    if head_b is not None:
        logits = logits + head_b
    return np.argmax(logits, axis=-1).astype(np.int64), logits
