"""Temporal alignment of history features via optical flow.

Pipeline per history frame: backward-warp its features into the current
frame, flag inconsistent flow with a forward-backward check, zero the flagged
pixels, then let the current frame attend to the gated history within a local
window.

Linear maps are stored ``(out, in)`` and applied as ``x @ W.T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowocc.errors import InputError, ShapeError
from flowocc.grid import check_feature_map, check_flow, warp
from flowocc.nn import softmax


@dataclass(frozen=True)
class ConsistencyParams:
    alpha: float = 0.01
    beta: float = 0.5

    def __post_init__(self):
        if not self.alpha >= 0:
            raise InputError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise InputError(f"beta must be > 0, got {self.beta}")


def fwd_bwd_check(
    flow_fwd: np.ndarray,
    flow_bwd: np.ndarray,
    params: ConsistencyParams = ConsistencyParams(),
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward consistency masks.

    ``flow_fwd`` maps frame A pixels into frame B and ``flow_bwd`` maps B into
    A. Returns ``(mask_fwd, mask_bwd)``: ``mask_fwd`` lives on A's grid and is
    True where the round trip A -> B -> A fails to close within
    ``alpha * (|fwd| + |bwd|) + beta`` pixels; ``mask_bwd`` is the same test
    on B's grid. True means occluded or unreliable.
    """
    flow_fwd = check_flow(flow_fwd, name="flow_fwd")
    flow_bwd = check_flow(flow_bwd, flow_fwd.shape[:2], name="flow_bwd")

    mag = np.linalg.norm(flow_fwd, axis=-1) + np.linalg.norm(flow_bwd, axis=-1)
    bwd_at_fwd = warp(flow_bwd, flow_fwd)
    fwd_at_bwd = warp(flow_fwd, flow_bwd)
    thresh = params.alpha * mag + params.beta
    mask_fwd = np.linalg.norm(flow_fwd + bwd_at_fwd, axis=-1) > thresh
    mask_bwd = np.linalg.norm(flow_bwd + fwd_at_bwd, axis=-1) > thresh
    return mask_fwd, mask_bwd


def mask_gate(warped: np.ndarray, occlusion: np.ndarray) -> np.ndarray:
    """Zero features wherever ``occlusion`` is True."""
    warped = check_feature_map(warped, "warped")
    occlusion = np.asarray(occlusion, dtype=bool)
    if occlusion.shape != warped.shape[:2]:
        raise ShapeError(f"mask {occlusion.shape} does not match features {warped.shape[:2]}")
    return np.where(occlusion[..., None], 0.0, warped)


@dataclass
class NcaParams:
    """Single-head neighborhood attention weights.

    ``wq``, ``wk``, ``wv`` are ``(dim, C)``; ``wo`` is ``(C, dim)``.
    """

    window: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise InputError(f"window must be odd and >= 1, got {self.window}")
        self.wq, self.wk, self.wv, self.wo = (np.asarray(m, dtype=np.float64) for m in (self.wq, self.wk, self.wv, self.wo))
        d, c = self.wq.shape
        if self.wk.shape != (d, c) or self.wv.shape != (d, c) or self.wo.shape != (c, d):
            raise ShapeError("inconsistent NCA projection shapes")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def channels(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def identity(cls, channels: int, window: int = 3) -> "NcaParams":
        eye = np.eye(channels)
        return cls(window, eye, eye, eye, eye)

    @classmethod
    def random(cls, channels: int, dim: int, window: int, rng: np.random.Generator) -> "NcaParams":
        def lin(o, i):
            return rng.normal(0.0, 1.0 / np.sqrt(i), size=(o, i))

        return cls(window, lin(dim, channels), lin(dim, channels), lin(dim, channels), lin(channels, dim))


def _window_offsets(window: int) -> list[tuple[int, int]]:
    r = window // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def nca_fuse(
    current: np.ndarray,
    gated_history: list[np.ndarray],
    params: NcaParams,
    return_attention: bool = False,
):
    """Neighborhood cross-attention from the current frame onto gated history.

    Keys for pixel ``p`` are every history pixel inside the ``window x window``
    box around ``p``, pooled over all history frames (frame-major, then
    row-major offset order). Window cells outside the image are dropped, so
    border pixels see fewer keys. Output is ``current + wo @ attended``.

    With ``return_attention`` the attention tensor of shape
    ``(H, W, n_frames * window**2)`` is returned as well; slots of dropped
    keys hold 0.
    """
    current = check_feature_map(current, "current")
    if len(gated_history) == 0:
        raise InputError("nca_fuse needs at least one history frame")
    history = [check_feature_map(hf, f"history[{i}]") for i, hf in enumerate(gated_history)]
    for i, hf in enumerate(history):
        if hf.shape != current.shape:
            raise ShapeError(f"history[{i}] is {hf.shape}, current is {current.shape}")
    if current.shape[2] != params.channels:
        raise ShapeError(f"params expect {params.channels} channels, features have {current.shape[2]}")

    h, w, _ = current.shape
    r = params.window // 2
    offsets = _window_offsets(params.window)

    q = current @ params.wq.T
    keys, vals, valid = [], [], []
    ys, xs = np.mgrid[0:h, 0:w]
    for hf in history:
        k_f = np.pad(hf @ params.wk.T, ((r, r), (r, r), (0, 0)))
        v_f = np.pad(hf @ params.wv.T, ((r, r), (r, r), (0, 0)))
        for dy, dx in offsets:
            keys.append(k_f[r + dy:r + dy + h, r + dx:r + dx + w])
            vals.append(v_f[r + dy:r + dy + h, r + dx:r + dx + w])
            valid.append((ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w))
    keys = np.stack(keys, axis=2)  # (H, W, N, d)
    vals = np.stack(vals, axis=2)
    valid = np.stack(valid, axis=2)

    logits = np.einsum("hwd,hwnd->hwn", q, keys) / np.sqrt(params.dim)
    logits = np.where(valid, logits, -np.inf)
    attn = softmax(logits, axis=-1)
    attended = np.einsum("hwn,hwnd->hwd", attn, vals)
    out = current + attended @ params.wo.T
    if return_attention:
        return out, attn
    return out


def build_raw(current: np.ndarray, warped_unfiltered: list[np.ndarray], fusion_weights: np.ndarray) -> np.ndarray:
    """Channel-concatenate ``[current, *warped]`` and project back to C channels.

    ``fusion_weights`` is ``(C, C * (1 + n))``.
    """
    current = check_feature_map(current, "current")
    parts = [current]
    for i, wf in enumerate(warped_unfiltered):
        wf = check_feature_map(wf, f"warped[{i}]")
        if wf.shape != current.shape:
            raise ShapeError(f"warped[{i}] is {wf.shape}, current is {current.shape}")
        parts.append(wf)
    stacked = np.concatenate(parts, axis=-1)
    fusion_weights = np.asarray(fusion_weights, dtype=np.float64)
    if fusion_weights.shape != (current.shape[2], stacked.shape[2]):
        raise ShapeError(f"fusion weights {fusion_weights.shape}, expected {(current.shape[2], stacked.shape[2])}")
    return stacked @ fusion_weights.T
