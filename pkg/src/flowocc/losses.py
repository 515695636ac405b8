"""Training objectives: voxel scale losses, distillation losses, plane loss, total.

Voxel logits are ``(X, Y, Z, K + 1)`` with class 0 = empty; label grids use
:data:`flowocc.EMPTY` and :data:`flowocc.IGNORE`. Ignore-labelled voxels are
removed before any reduction, so their predictions never reach a loss value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from flowocc import EMPTY, IGNORE
from flowocc.errors import InputError, ShapeError
from flowocc.nn import log_softmax, softmax

_LOG_FLOOR = -100.0  # same clamp torch applies inside binary cross-entropy


def _neg_log(x: float) -> float:
    return -max(float(np.log(x)) if x > 0 else _LOG_FLOOR, _LOG_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class ClassWeightPolicy:
    """Per-class weights with a linear boost for distant cells: ``w_c * (1 + gamma * r / max_range)``."""

    class_weights: np.ndarray
    gamma: float = 1.0
    max_range: float = 51.2

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if np.any(self.class_weights <= 0):
            raise InputError("class weights must be positive")
        if self.gamma < 0 or self.max_range <= 0:
            raise InputError("gamma must be >= 0 and max_range > 0")

    @classmethod
    def uniform(cls, n_classes: int, gamma: float = 1.0, max_range: float = 51.2) -> "ClassWeightPolicy":
        return cls(np.ones(n_classes), gamma, max_range)

    def weights(self, labels: np.ndarray, distances: np.ndarray | None = None) -> np.ndarray:
        w = self.class_weights[labels]
        if distances is not None:
            w = w * (1.0 + self.gamma * np.asarray(distances) / self.max_range)
        return w


def _check_logits(pred_logits: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred_logits.shape[:-1] != gt.shape:
        raise ShapeError(f"logits {pred_logits.shape} vs labels {gt.shape}")
    n_cls = pred_logits.shape[-1]
    bad = (gt != IGNORE) & ((gt < 0) | (gt >= n_cls))
    if bad.any():
        raise InputError(f"label ids outside [0, {n_cls}) found")
    return pred_logits, gt


def pool_labels(gt: np.ndarray, factor: int, n_classes: int) -> np.ndarray:
    """Downsample a label grid by ``factor`` along each axis.

    A coarse cell takes the most frequent non-empty label among its
    non-ignore children (lowest id on ties), EMPTY if all are empty, and
    IGNORE if every child is ignored.
    """
    if factor == 1:
        return np.asarray(gt, dtype=np.int64)
    blocks = _blocks(np.asarray(gt, dtype=np.int64), factor)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    return _majority(counts)


def _majority(counts: np.ndarray) -> np.ndarray:
    occupied = counts[..., 1:].sum(axis=-1) > 0
    labels = np.where(occupied, np.argmax(counts[..., 1:], axis=-1) + 1, EMPTY)
    return np.where(counts.sum(axis=-1) == 0, IGNORE, labels).astype(np.int64)


def _blocks(x: np.ndarray, factor: int) -> np.ndarray:
    """``(X, Y, Z, ...)`` -> ``(X/f, Y/f, Z/f, ..., f**3)``."""
    nx, ny, nz = x.shape[:3]
    if nx % factor or ny % factor or nz % factor:
        raise InputError(f"scale {factor} does not divide grid dims {(nx, ny, nz)}")
    rest = x.shape[3:]
    b = x.reshape(nx // factor, factor, ny // factor, factor, nz // factor, factor, *rest)
    b = np.moveaxis(b, (1, 3, 5), (-3, -2, -1))
    return b.reshape(b.shape[:-3] + (factor**3,))


def pool_probs(probs: np.ndarray, gt: np.ndarray, factor: int) -> np.ndarray:
    """Mean of ``(X, Y, Z, K)`` probabilities over non-ignore children of each coarse cell."""
    if factor == 1:
        return probs
    valid = (np.asarray(gt) != IGNORE).astype(np.float64)
    num = _blocks(probs * valid[..., None], factor).sum(axis=-1)
    den = _blocks(valid, factor).sum(axis=-1)[..., None]
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _check_scales(scales) -> list[int]:
    scales = [int(s) for s in scales]
    if not scales or any(s < 1 or s & (s - 1) for s in scales):
        raise InputError(f"scales must be powers of two, got {scales}")
    return scales


def scal_geo(pred_logits: np.ndarray, gt: np.ndarray, scales=(1,)) -> float:
    """Occupancy precision / recall / specificity loss, averaged over scales.

    Each present term contributes ``-log(term)``; terms whose denominator
    vanishes are skipped.
    """
    pred_logits, gt = _check_logits(pred_logits, gt)
    if not np.any(gt != IGNORE):
        raise InputError("no labelled voxels")
    n_cls = pred_logits.shape[-1]
    probs = softmax(pred_logits, axis=-1)
    occ = (1.0 - probs[..., EMPTY])[..., None]
    total = 0.0
    for s in _check_scales(scales):
        g = pool_labels(gt, s, n_cls)
        p = pool_probs(occ, gt, s)[..., 0]
        valid = g != IGNORE
        t = (g[valid] != EMPTY).astype(np.float64)
        p = p[valid]
        inter = np.sum(p * t)
        loss = 0.0
        if p.sum() > 0:
            loss += _neg_log(inter / p.sum())
        if t.sum() > 0:
            loss += _neg_log(inter / t.sum())
        if (1 - t).sum() > 0:
            loss += _neg_log(np.sum((1 - p) * (1 - t)) / np.sum(1 - t))
        total += loss
    return total / len(scales)


def scal_sem(pred_logits: np.ndarray, gt: np.ndarray, scales=(1,)) -> float:
    """Per-class precision / recall / specificity loss over classes present in the ground truth."""
    pred_logits, gt = _check_logits(pred_logits, gt)
    if not np.any(gt != IGNORE):
        raise InputError("no labelled voxels")
    n_cls = pred_logits.shape[-1]
    probs_full = softmax(pred_logits, axis=-1)
    total = 0.0
    for s in _check_scales(scales):
        g = pool_labels(gt, s, n_cls)
        probs = pool_probs(probs_full, gt, s)
        valid = g != IGNORE
        g = g[valid]
        probs = probs[valid]
        loss, count = 0.0, 0
        for c in range(n_cls):
            t = (g == c).astype(np.float64)
            if t.sum() == 0:
                continue
            p = probs[:, c]
            nom = np.sum(p * t)
            term = 0.0
            if p.sum() > 0:
                term += _neg_log(nom / p.sum())
            term += _neg_log(nom / t.sum())
            if (1 - t).sum() > 0:
                term += _neg_log(np.sum((1 - p) * (1 - t)) / np.sum(1 - t))
            loss += term
            count += 1
        total += loss / count
    return total / len(scales)


def voxel_ce(
    pred_logits: np.ndarray,
    gt: np.ndarray,
    policy: ClassWeightPolicy,
    distances: np.ndarray | None = None,
) -> float:
    """Weighted-mean cross-entropy over non-ignore voxels: ``sum(w * nll) / sum(w)``."""
    pred_logits, gt = _check_logits(pred_logits, gt)
    valid = gt != IGNORE
    if not valid.any():
        raise InputError("no labelled voxels")
    labels = gt[valid]
    logp = log_softmax(pred_logits[valid], axis=-1)
    nll = -np.take_along_axis(logp, labels[:, None], axis=-1)[:, 0]
    w = policy.weights(labels, None if distances is None else np.asarray(distances)[valid])
    return float(np.sum(w * nll) / np.sum(w))


def voxel_ce_grad(
    pred_logits: np.ndarray,
    gt: np.ndarray,
    policy: ClassWeightPolicy,
    distances: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of :func:`voxel_ce` with respect to the logits."""
    pred_logits, gt = _check_logits(pred_logits, gt)
    valid = gt != IGNORE
    labels = gt[valid]
    w = policy.weights(labels, None if distances is None else np.asarray(distances)[valid])
    probs = softmax(pred_logits[valid], axis=-1)
    probs[np.arange(len(labels)), labels] -= 1.0
    grad = np.zeros_like(pred_logits)
    grad[valid] = probs * (w / w.sum())[:, None]
    return grad


def dice_loss(pred_probs: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> float:
    """``1 - mean_c (2 sum(p t) + eps) / (sum p + sum t + eps)``; class axis last."""
    p, t = _pair(pred_probs, target)
    axes = tuple(range(p.ndim - 1))
    num = 2.0 * np.sum(p * t, axis=axes) + eps
    den = np.sum(p, axis=axes) + np.sum(t, axis=axes) + eps
    return float(1.0 - np.mean(num / den))


def dice_grad(pred_probs: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    p, t = _pair(pred_probs, target)
    axes = tuple(range(p.ndim - 1))
    num = 2.0 * np.sum(p * t, axis=axes) + eps
    den = np.sum(p, axis=axes) + np.sum(t, axis=axes) + eps
    n_cls = p.shape[-1]
    return -(2.0 * t * den - num) / (den**2) / n_cls


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction {a.shape} vs target {b.shape}")
    return a, b


def binary_cross_entropy(p: np.ndarray, t: np.ndarray) -> float:
    p, t = _pair(p, t)
    with np.errstate(divide="ignore"):
        lp = np.maximum(np.log(p), _LOG_FLOOR)
        lq = np.maximum(np.log(1.0 - p), _LOG_FLOOR)
    return float(np.mean(-(t * lp + (1.0 - t) * lq)))


def directional_gradients(m: np.ndarray) -> np.ndarray:
    """Absolute forward differences of ``(H, W, K)`` maps as ``(H, W, 2K)``: x components then y.

    Last row/col differences are 0. Keeping the directions apart means a
    horizontal edge that moves to a vertical one still registers.
    """
    m = np.asarray(m, dtype=np.float64)
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    gx[:, :-1] = m[:, 1:] - m[:, :-1]
    gy[:-1] = m[1:] - m[:-1]
    return np.concatenate([np.abs(gx), np.abs(gy)], axis=-1)


def edge_maps(pred_probs: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Soft predicted edges and binary target edges ``> threshold``, both from directional gradients."""
    p, t = _pair(pred_probs, target)
    if p.ndim != 3:
        raise ShapeError(f"edge maps need (H, W, K) inputs, got {p.shape}")
    return np.clip(directional_gradients(p), 0.0, 1.0), (directional_gradients(t) > threshold).astype(np.float64)


def boundary_loss(pred_probs: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Dice plus binary cross-entropy between edge maps; 0 when both are edge-free."""
    ep, et = edge_maps(pred_probs, target, threshold)
    if not ep.any() and not et.any():
        return 0.0
    return dice_loss(ep, et) + binary_cross_entropy(ep, et)


def distill_ce(pred_logits: np.ndarray, soft_target: np.ndarray) -> float:
    """Soft-label cross-entropy minus target entropy, mean over pixels.

    Same gradient as plain soft cross-entropy but zero at the perfect
    prediction even when the pseudo-labels are soft.
    """
    logits, t = _pair(pred_logits, soft_target)
    logq = log_softmax(logits, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logt = np.where(t > 0, np.log(t), 0.0)
    kl = np.sum(t * (logt - logq), axis=-1)
    return float(np.mean(kl))


PLANE_AXES = {"xy": 2, "xz": 1, "yz": 0}


def project_labels(gt: np.ndarray, plane: str, n_classes: int) -> np.ndarray:
    """Collapse a label grid onto a plane: most frequent non-empty label, else IGNORE."""
    gt = np.asarray(gt, dtype=np.int64)
    axis = PLANE_AXES[plane]
    counts = np.stack([(gt == c).sum(axis=axis) for c in range(n_classes)], axis=-1)
    counts[..., EMPTY] = 0
    return _majority(counts)


def plane_distances(spec, plane: str, sensor_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """In-plane distance from the sensor to each plane cell center."""
    keep = [a for a in range(3) if a != PLANE_AXES[plane]]
    axes = [spec.origin[a] + (np.arange(spec.dims[a]) + 0.5) * spec.cell_size - sensor_origin[a] for a in keep]
    g0, g1 = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(g0**2 + g1**2)


def tpv_loss(
    pred_plane_logits: Mapping[str, np.ndarray],
    gt_voxels: np.ndarray,
    policy: ClassWeightPolicy,
    spec,
    sensor_origin=(0.0, 0.0, 0.0),
) -> float:
    """Class- and distance-weighted cross-entropy on the three projected label planes, averaged."""
    gt_voxels = np.asarray(gt_voxels, dtype=np.int64)
    losses = []
    for plane in ("xy", "xz", "yz"):
        logits = np.asarray(pred_plane_logits[plane], dtype=np.float64)
        n_cls = logits.shape[-1]
        labels = project_labels(gt_voxels, plane, n_cls)
        if logits.shape[:-1] != labels.shape:
            raise ShapeError(f"{plane} logits {logits.shape} vs projected labels {labels.shape}")
        if np.all(labels == IGNORE):
            raise InputError(f"{plane} plane has no labelled cells")
        losses.append(voxel_ce(logits, labels, policy, plane_distances(spec, plane, sensor_origin)))
    return float(np.mean(losses))


def total_loss(l_voxel: float, l_distill: float, l_tpv: float, weights: LossWeights = LossWeights()) -> float:
    return weights.lambda1 * l_voxel + weights.lambda2 * l_distill + weights.lambda3 * l_tpv


def loss_report(parts: Mapping[str, float], weights: LossWeights = LossWeights()) -> dict[str, float]:
    """JSON-ready report from the individual loss terms.

    ``parts`` needs ``scal_geo``, ``scal_sem``, ``ce``, ``distill_ce``,
    ``dice``, ``boundary`` and ``tpv``.
    """
    l_voxel = parts["scal_geo"] + parts["scal_sem"] + parts["ce"]
    l_distill = parts["distill_ce"] + parts["dice"] + parts["boundary"]
    report = {k: float(parts[k]) for k in ("scal_geo", "scal_sem", "ce", "distill_ce", "dice", "boundary", "tpv")}
    report["voxel"] = float(l_voxel)
    report["distill"] = float(l_distill)
    report["total"] = float(total_loss(l_voxel, l_distill, parts["tpv"], weights))
    return report
