"""Small numpy building blocks: activations, convolutions, pooling."""
from __future__ import annotations

import numpy as np


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-size 2D convolution (cross-correlation), zero padded.

    x: ``(H, W, Cin)``; weight: ``(Cout, Cin, kh, kw)`` with odd kernel sides.
    """
    h, w, _ = x.shape
    cout, cin, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((h, w, cout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += xp[i:i + h, j:j + w] @ weight[:, :, i, j].T
    if bias is not None:
        out += bias
    return out


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-size 3D convolution, zero padded. x: ``(A, B, C, Cin)``; weight ``(Cout, Cin, ka, kb, kc)``."""
    a, b, c, _ = x.shape
    cout, cin, ka, kb, kc = weight.shape
    pa, pb, pc = ka // 2, kb // 2, kc // 2
    xp = np.pad(x, ((pa, pa), (pb, pb), (pc, pc), (0, 0)))
    out = np.zeros((a, b, c, cout), dtype=np.float64)
    for i in range(ka):
        for j in range(kb):
            for k in range(kc):
                out += xp[i:i + a, j:j + b, k:k + c] @ weight[:, :, i, j, k].T
    if bias is not None:
        out += bias
    return out


def avg_pool3d(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Mean pooling of a ``(A, B, C, Ch)`` volume; trailing remainders are edge-padded."""
    pads = [(0, (-s) % factor) for s in x.shape[:3]] + [(0, 0)]
    xp = np.pad(x, pads, mode="edge")
    a, b, c, ch = xp.shape
    return xp.reshape(a // factor, factor, b // factor, factor, c // factor, factor, ch).mean(axis=(1, 3, 5))


def upsample3d(x: np.ndarray, size: tuple[int, int, int], factor: int = 2) -> np.ndarray:
    """Nearest upsampling by ``factor`` then crop to ``size``."""
    up = x.repeat(factor, axis=0).repeat(factor, axis=1).repeat(factor, axis=2)
    return up[: size[0], : size[1], : size[2]]


def identity_kernel3d(channels: int, k: int = 3) -> np.ndarray:
    w = np.zeros((channels, channels, k, k, k))
    w[:, :, k // 2, k // 2, k // 2] = np.eye(channels)
    return w


def identity_kernel2d(channels: int, k: int = 3) -> np.ndarray:
    w = np.zeros((channels, channels, k, k))
    w[:, :, k // 2, k // 2] = np.eye(channels)
    return w
