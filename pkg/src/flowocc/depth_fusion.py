"""Curriculum depth fusion and depth-volume construction.

Depth maps are ``(H, W)`` arrays in meters with values <= 0 (or non-finite)
marking missing pixels. Depth volumes are ``(D, H, W)`` arrays, one value per
depth bin and pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from flowocc.errors import InputError, ShapeError
from flowocc.grid import check_feature_map
from flowocc.nn import avg_pool3d, conv2d, conv3d, relu, sigmoid, softmax, upsample3d


@dataclass(frozen=True)
class CurriculumSchedule:
    """Weight on completed-LiDAR depth as a function of training step.

    Holds 1 through the warmup, then decays to 0 at ``total_steps``.
    """

    total_steps: int
    warmup_fraction: float = 0.2
    shape: str = "linear"

    def __post_init__(self):
        if self.total_steps < 1:
            raise InputError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise InputError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.shape not in ("linear", "cosine"):
            raise InputError(f"unknown schedule shape {self.shape!r}")


def lambda_at(schedule: CurriculumSchedule, step: float) -> float:
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise InputError(f"step {step} outside [0, {total}]")
    if step >= total:
        return 0.0
    warm = schedule.warmup_fraction * total
    if step < warm:
        return 1.0
    frac = (step - warm) / (total - warm)
    if schedule.shape == "linear":
        return float(1.0 - frac)
    return float(0.5 * (1.0 + math.cos(math.pi * frac)))


def valid_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    return np.isfinite(depth) & (depth > 0)


def complete_depth(sparse: np.ndarray, k: int = 8, power: float = 2.0) -> np.ndarray:
    """Fill missing pixels by inverse-distance weighting of the k nearest valid pixels.

    Valid pixels are copied through untouched.
    """
    sparse = np.asarray(sparse, dtype=np.float64)
    if sparse.ndim != 2:
        raise ShapeError(f"depth map must be (H, W), got {sparse.shape}")
    valid = valid_depth(sparse)
    if not valid.any():
        raise InputError("complete_depth needs at least one valid pixel")
    out = np.where(valid, sparse, 0.0)
    if valid.all():
        return out

    src_yx = np.argwhere(valid)
    dst_yx = np.argwhere(~valid)
    kk = min(k, len(src_yx))
    dist, idx = cKDTree(src_yx).query(dst_yx, k=kk)
    if kk == 1:
        dist, idx = dist[:, None], idx[:, None]
    w = 1.0 / dist**power
    vals = sparse[src_yx[idx, 0], src_yx[idx, 1]]
    out[dst_yx[:, 0], dst_yx[:, 1]] = np.sum(w * vals, axis=1) / np.sum(w, axis=1)
    return out


def fuse_depth(dense: np.ndarray, stereo: np.ndarray, lam: float) -> np.ndarray:
    """``lam * dense + (1 - lam) * stereo``."""
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    dense = np.asarray(dense, dtype=np.float64)
    stereo = np.asarray(stereo, dtype=np.float64)
    if dense.shape != stereo.shape:
        raise ShapeError(f"dense {dense.shape} vs stereo {stereo.shape}")
    return lam * dense + (1.0 - lam) * stereo


@dataclass(frozen=True)
class DepthBins:
    count: int = 64
    min_depth: float = 2.0
    max_depth: float = 58.0

    def __post_init__(self):
        if self.count < 1 or not 0 < self.min_depth < self.max_depth:
            raise InputError(f"bad depth bins {self}")

    @property
    def width(self) -> float:
        return (self.max_depth - self.min_depth) / self.count

    @property
    def centers(self) -> np.ndarray:
        return self.min_depth + (np.arange(self.count) + 0.5) * self.width


class DepthVolumes(NamedTuple):
    mono: np.ndarray
    stereo: np.ndarray
    features: np.ndarray
    clamped: int


@dataclass
class DepthNetWeights:
    """Encoder conv ``(C_e, C + 1, 3, 3)`` and per-pixel bin projection ``(D, C_e)``."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    bin_w: np.ndarray
    bin_b: np.ndarray

    @classmethod
    def random(cls, channels: int, out_channels: int, bins: int, rng: np.random.Generator) -> "DepthNetWeights":
        fan = (channels + 1) * 9
        return cls(
            rng.normal(0, 1 / np.sqrt(fan), (out_channels, channels + 1, 3, 3)),
            np.zeros(out_channels),
            rng.normal(0, 1 / np.sqrt(out_channels), (bins, out_channels)),
            np.zeros(bins),
        )


def soft_bin(depth: np.ndarray, bins: DepthBins, sigma_bins: float = 0.3) -> tuple[np.ndarray, int]:
    """Gaussian soft one-hot over bin centers; returns ``(volume, n_clamped)``.

    Depths outside ``[min_depth, max_depth]`` are clamped to the outer bin
    centers and counted.
    """
    depth = np.asarray(depth, dtype=np.float64)
    outside = (depth < bins.min_depth) | (depth > bins.max_depth)
    centers = bins.centers
    d = np.clip(depth, centers[0], centers[-1])
    z = (d[None] - centers[:, None, None]) / (sigma_bins * bins.width)
    return softmax(-0.5 * z**2, axis=0), int(outside.sum())


def build_depth_volumes(
    fused: np.ndarray,
    f_fuse: np.ndarray,
    net: DepthNetWeights,
    bins: DepthBins,
    sigma_bins: float = 0.3,
) -> DepthVolumes:
    """Encode features with the depth channel and derive both depth volumes.

    ``features`` is a ReLU 3x3 conv of ``[f_fuse, depth / max_depth]``; the
    mono volume is a per-pixel softmax of a linear map of those features; the
    stereo volume soft-bins the fused depth.
    """
    f_fuse = check_feature_map(f_fuse, "f_fuse")
    fused = np.asarray(fused, dtype=np.float64)
    if fused.shape != f_fuse.shape[:2]:
        raise ShapeError(f"depth {fused.shape} vs features {f_fuse.shape[:2]}")
    if net.bin_w.shape[0] != bins.count:
        raise ShapeError(f"bin projection has {net.bin_w.shape[0]} rows, bins={bins.count}")

    x = np.concatenate([f_fuse, (fused / bins.max_depth)[..., None]], axis=-1)
    feat = relu(conv2d(x, net.enc_w, net.enc_b))
    mono = softmax(feat @ net.bin_w.T + net.bin_b, axis=-1).transpose(2, 0, 1)
    stereo, clamped = soft_bin(fused, bins, sigma_bins)
    return DepthVolumes(mono, stereo, feat, clamped)


@dataclass
class CgAttentionParams:
    """1x1x1 projections of single-channel depth volumes.

    Query/key lift each bin value to ``d`` channels (``w * x + b``); value and
    confidence are scalar affine maps.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: float = 1.0
    bv: float = 0.0
    wc: float = 1.0
    bc: float = 0.0

    def __post_init__(self):
        self.wq, self.bq, self.wk, self.bk = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (self.wq, self.bq, self.wk, self.bk))
        if not self.wq.shape == self.bq.shape == self.wk.shape == self.bk.shape:
            raise ShapeError("q/k projections must share width")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def identity(cls) -> "CgAttentionParams":
        return cls(np.ones(1), np.zeros(1), np.ones(1), np.zeros(1))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "CgAttentionParams":
        return cls(
            rng.normal(0, 1, d), rng.normal(0, 0.1, d), rng.normal(0, 1, d), rng.normal(0, 0.1, d),
            float(rng.normal(1.0, 0.1)), 0.0, float(rng.normal(1.0, 0.1)), 0.0,
        )


def cg_attention_3d(
    query_vol: np.ndarray,
    kv_vol: np.ndarray,
    params: CgAttentionParams,
    return_attention: bool = False,
):
    """Confidence-gated attention of ``query_vol`` onto ``kv_vol`` along the bin axis.

    At each pixel the D query bins attend over the D key bins. The attended
    values are reweighted by a softmax over bins of the query stream's
    confidence projection. Attention has shape ``(H, W, D, D)``.
    """
    query_vol = np.asarray(query_vol, dtype=np.float64)
    kv_vol = np.asarray(kv_vol, dtype=np.float64)
    if query_vol.ndim != 3 or query_vol.shape != kv_vol.shape:
        raise ShapeError(f"volumes must share (D, H, W): {query_vol.shape} vs {kv_vol.shape}")

    qv = query_vol.transpose(1, 2, 0)[..., None]  # (H, W, D, 1)
    kv = kv_vol.transpose(1, 2, 0)[..., None]
    q = qv * params.wq + params.bq
    k = kv * params.wk + params.bk
    v = kv[..., 0] * params.wv + params.bv
    attn = softmax(np.einsum("hwid,hwjd->hwij", q, k) / np.sqrt(params.d), axis=-1)
    attended = np.einsum("hwij,hwj->hwi", attn, v)
    conf = softmax(qv[..., 0] * params.wc + params.bc, axis=-1)
    out = (conf * attended).transpose(2, 0, 1)
    if return_attention:
        return out, attn
    return out


@dataclass
class VolumeFusionWeights:
    """Stem conv, two-level 3D U-Net, squeeze-excitation gate, and bin head.

    Conv kernels are ``(Cout, Cin, 3, 3, 3)``; ``ca_w1`` is ``(r, c)`` and
    ``ca_w2`` is ``(c, r)``.
    """

    stem_w: np.ndarray
    stem_b: np.ndarray
    enc1_w: np.ndarray
    enc1_b: np.ndarray
    enc2_w: np.ndarray
    enc2_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    ca_w1: np.ndarray
    ca_b1: np.ndarray
    ca_w2: np.ndarray
    ca_b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def random(cls, c: int, rng: np.random.Generator, reduction: int = 2) -> "VolumeFusionWeights":
        def k(o, i):
            return rng.normal(0, 1 / np.sqrt(27 * i), (o, i, 3, 3, 3))

        r = max(1, c // reduction)
        return cls(
            k(c, 2), np.zeros(c),
            k(c, c), np.zeros(c),
            k(2 * c, c), np.zeros(2 * c),
            k(c, 3 * c), np.zeros(c),
            rng.normal(0, 1 / np.sqrt(c), (r, c)), np.zeros(r),
            rng.normal(0, 1 / np.sqrt(r), (c, r)), np.zeros(c),
            k(1, c), np.zeros(1),
        )


def channel_attention(x: np.ndarray, w1, b1, w2, b2) -> tuple[np.ndarray, np.ndarray]:
    """Squeeze-excitation over the last axis of a ``(..., C)`` volume; returns (scaled, gates)."""
    pooled = x.reshape(-1, x.shape[-1]).mean(axis=0)
    gates = sigmoid(relu(pooled @ np.asarray(w1).T + b1) @ np.asarray(w2).T + b2)
    return x * gates, gates


def fuse_volumes(v_mo_w: np.ndarray, v_st_w: np.ndarray, weights: VolumeFusionWeights) -> np.ndarray:
    """Fuse the two reweighted volumes into the final depth distribution ``(D, H, W)``."""
    v_mo_w = np.asarray(v_mo_w, dtype=np.float64)
    v_st_w = np.asarray(v_st_w, dtype=np.float64)
    if v_mo_w.ndim != 3 or v_mo_w.shape != v_st_w.shape:
        raise ShapeError(f"volumes must share (D, H, W): {v_mo_w.shape} vs {v_st_w.shape}")

    x = np.stack([v_mo_w, v_st_w], axis=-1)
    x = relu(conv3d(x, weights.stem_w, weights.stem_b))
    skip = relu(conv3d(x, weights.enc1_w, weights.enc1_b))
    deep = relu(conv3d(avg_pool3d(skip), weights.enc2_w, weights.enc2_b))
    up = upsample3d(deep, skip.shape[:3])
    x = relu(conv3d(np.concatenate([skip, up], axis=-1), weights.dec_w, weights.dec_b))
    x, _ = channel_attention(x, weights.ca_w1, weights.ca_b1, weights.ca_w2, weights.ca_b2)
    logits = conv3d(x, weights.head_w, weights.head_b)[..., 0]
    return softmax(logits, axis=0)
