import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowocc import EMPTY, IGNORE
from flowocc.errors import InputError, ShapeError
from flowocc.losses import (
    ClassWeightPolicy,
    LossWeights,
    binary_cross_entropy,
    boundary_loss,
    dice_grad,
    dice_loss,
    distill_ce,
    loss_report,
    pool_labels,
    project_labels,
    scal_geo,
    scal_sem,
    total_loss,
    tpv_loss,
    voxel_ce,
    voxel_ce_grad,
)
from flowocc.voxel_lift import VoxelSpec


def perfect_logits(gt, n_cls, margin=60.0):
    return np.eye(n_cls)[np.where(gt == IGNORE, 0, gt)] * margin


def logit(p):
    return math.log(p / (1 - p))


def test_scal_geo_perfect_and_inverted():
    gt = np.array([1, 0, 1, 0]).reshape(2, 2, 1)
    assert scal_geo(perfect_logits(gt, 2), gt) <= 1e-6
    inverted = scal_geo(perfect_logits(1 - gt, 2), gt)
    partial = np.zeros((2, 2, 1, 2))
    assert inverted > scal_geo(partial, gt) > 0


def test_scal_geo_hand_value():
    gt = np.array([1, 0, 1, 0]).reshape(2, 2, 1)
    p = [0.8, 0.3, 0.6, 0.1]
    logits = np.array([[0.0, logit(x)] for x in p]).reshape(2, 2, 1, 2)
    precision = (0.8 + 0.6) / sum(p)
    recall = (0.8 + 0.6) / 2
    specificity = (0.7 + 0.9) / 2
    expect = -math.log(precision) - math.log(recall) - math.log(specificity)
    assert scal_geo(logits, gt) == pytest.approx(expect, abs=1e-6)


def test_scal_multi_scale_is_mean_of_scales(rng):
    gt = rng.integers(0, 3, size=(4, 4, 2))
    logits = rng.normal(size=(4, 4, 2, 3))
    for fn in (scal_geo, scal_sem):
        both = fn(logits, gt, (1, 2))
        assert both == pytest.approx((fn(logits, gt, (1,)) + fn(logits, gt, (2,))) / 2)


def test_scal_errors():
    gt = np.full((2, 2, 1), IGNORE)
    with pytest.raises(InputError):
        scal_geo(np.zeros((2, 2, 1, 2)), gt)
    with pytest.raises(InputError):
        scal_sem(np.zeros((2, 2, 1, 2)), gt)
    with pytest.raises(InputError):
        scal_geo(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2), int), (3,))


def test_scal_sem_two_class_hand_value():
    a, b = 0.7, 0.2  # class-0 probabilities at the two voxels
    gt = np.array([0, 1]).reshape(2, 1, 1)
    logits = np.array([[logit(a), 0.0], [logit(b), 0.0]]).reshape(2, 1, 1, 2)
    c0 = -math.log(a / (a + b)) - math.log(a) - math.log(1 - b)
    c1 = -math.log((1 - b) / (2 - a - b)) - math.log(1 - b) - math.log(a)
    assert scal_sem(logits, gt) == pytest.approx((c0 + c1) / 2, abs=1e-6)
    # a third class missing from the ground truth and never predicted is left out
    extra = np.concatenate([logits, np.full((2, 1, 1, 1), -np.inf)], axis=-1)
    assert scal_sem(extra, gt) == pytest.approx((c0 + c1) / 2, abs=1e-6)


def test_scal_sem_perfect():
    gt = np.array([0, 1, 2, 2, 1, 0, 0, 2]).reshape(2, 2, 2)
    assert scal_sem(perfect_logits(gt, 3), gt) <= 1e-6


def test_pool_labels_majority_and_ignore():
    gt = np.zeros((2, 2, 2), int)
    gt[0, 0, 0] = 3
    gt[1, 1, 1] = 2
    gt[0, 1, 1] = 2
    assert pool_labels(gt, 2, 4)[0, 0, 0] == 2
    assert pool_labels(np.full((2, 2, 2), IGNORE), 2, 4)[0, 0, 0] == IGNORE
    assert pool_labels(np.zeros((2, 2, 2), int), 2, 4)[0, 0, 0] == EMPTY


def test_voxel_ce_examples():
    gt = np.array([1, 2, 0]).reshape(3, 1, 1)
    pol = ClassWeightPolicy.uniform(4)
    assert voxel_ce(perfect_logits(gt, 4, 1e3), gt, pol) < 1e-12
    assert voxel_ce(np.zeros((3, 1, 1, 4)), gt, pol) == pytest.approx(math.log(4))


def test_voxel_ce_weighted_hand_value():
    gt = np.array([0, 1]).reshape(2, 1, 1)
    logits = np.array([[2.0, 0.0], [0.5, 1.0]]).reshape(2, 1, 1, 2)
    pol = ClassWeightPolicy(np.array([1.0, 3.0]))
    nll0 = -math.log(math.exp(2) / (math.exp(2) + 1))
    nll1 = -math.log(math.exp(1) / (math.exp(0.5) + math.exp(1)))
    assert voxel_ce(logits, gt, pol) == pytest.approx((nll0 + 3 * nll1) / 4, abs=1e-6)
    dist = np.array([0.0, 51.2]).reshape(2, 1, 1)
    # far voxel doubles its weight with gamma = 1
    assert voxel_ce(logits, gt, pol, dist) == pytest.approx((nll0 + 6 * nll1) / 7, abs=1e-6)


def test_voxel_ce_errors():
    pol = ClassWeightPolicy.uniform(2)
    with pytest.raises(InputError):
        voxel_ce(np.zeros((1, 1, 1, 2)), np.full((1, 1, 1), IGNORE), pol)
    with pytest.raises(ShapeError):
        voxel_ce(np.zeros((2, 1, 1, 2)), np.zeros((1, 1, 1), int), pol)
    with pytest.raises(InputError):
        ClassWeightPolicy(np.array([1.0, 0.0]))


def test_dice_examples():
    a = np.array([[1, 1, 0, 0]], float).T
    b = np.array([[0, 1, 1, 0]], float).T
    assert dice_loss(a, a) == pytest.approx(0.0, abs=1e-5)
    assert dice_loss(a, 1 - a) == pytest.approx(1.0, abs=1e-5)
    assert dice_loss(a, b) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ShapeError):
        dice_loss(a, b[:3])


def edges_by_hand(m, soft):
    h, w, k = m.shape
    out = np.zeros((h, w, 2 * k))
    for y in range(h):
        for x in range(w):
            for c in range(k):
                gx = abs(m[y, x + 1, c] - m[y, x, c]) if x + 1 < w else 0.0
                gy = abs(m[y + 1, x, c] - m[y, x, c]) if y + 1 < h else 0.0
                for j, g in ((c, gx), (k + c, gy)):
                    out[y, x, j] = min(g, 1.0) if soft else float(g > 0.5)
    return out


def test_boundary_sees_edge_turning_a_corner():
    t = np.zeros((4, 4), int)
    t[1:, 1:] = 1
    moved = t.copy()
    moved[1, 0] = 1
    assert boundary_loss(np.eye(2)[moved], np.eye(2)[t]) > boundary_loss(np.eye(2)[t], np.eye(2)[t])


def test_boundary_examples():
    sq = np.zeros((8, 8, 1))
    sq[2:5, 2:5] = 1.0
    assert boundary_loss(sq, sq) == pytest.approx(0.0, abs=1e-4)
    assert boundary_loss(np.full((8, 8, 1), 0.3), np.full((8, 8, 1), 0.3)) == 0.0
    shifted = np.zeros((8, 8, 1))
    shifted[3:6, 3:6] = 1.0
    ep = edges_by_hand(sq, soft=True)
    et = edges_by_hand(shifted, soft=False)
    inter = (ep * et).sum()
    dice = 1 - (2 * inter + 1e-6) / (ep.sum() + et.sum() + 1e-6)
    eps_log = lambda v: max(math.log(v), -100.0) if v > 0 else -100.0
    bce = np.mean([-(t * eps_log(p) + (1 - t) * eps_log(1 - p)) for p, t in zip(ep.ravel(), et.ravel())])
    assert boundary_loss(sq, shifted) == pytest.approx(dice + bce, abs=1e-4)


def test_bce_and_distill_perfect():
    t = np.array([0.0, 1.0, 1.0])
    assert binary_cross_entropy(t, t) == 0.0
    soft = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    assert distill_ce(np.log(soft), soft) == pytest.approx(0.0, abs=1e-12)
    assert distill_ce(np.zeros_like(soft), soft) > 0


def test_project_labels_single_voxel_and_majority():
    gt = np.zeros((3, 3, 3), int)
    gt[1, 2, 0] = 4
    for plane, cell in (("xy", (1, 2)), ("xz", (1, 0)), ("yz", (2, 0))):
        proj = project_labels(gt, plane, 5)
        assert (proj != IGNORE).sum() == 1 and proj[cell] == 4
    g = np.zeros((2, 2, 2), int)
    g[0, 0] = [3, 3]
    g[1, 0] = [2, 3]
    g[0, 1] = [2, 1]
    xy = project_labels(g, "xy", 4)
    assert xy[0, 0] == 3
    assert xy[1, 0] == 2  # tie goes to the lower id
    assert xy[0, 1] == 1
    assert xy[1, 1] == IGNORE


def test_tpv_loss_perfect_and_errors():
    spec = VoxelSpec((3, 3, 2), (0, 0, 0), 1.0)
    gt = np.zeros((3, 3, 2), int)
    gt[0, 1, 1] = 2
    gt[2, 2, 0] = 1
    pol = ClassWeightPolicy.uniform(3)
    planes = {p: perfect_logits(project_labels(gt, p, 3), 3, 1e3) for p in ("xy", "xz", "yz")}
    assert tpv_loss(planes, gt, pol, spec) < 1e-9
    with pytest.raises(InputError):
        tpv_loss(planes, np.zeros((3, 3, 2), int), pol, spec)


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 3.0, LossWeights(1, 0, 0)) == 1.0
    assert total_loss(0.0, 0.0, 0.0) == 0.0
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.5, 0.25, 0.25)) == pytest.approx(1.75)
    with pytest.raises(InputError):
        LossWeights(-1.0)


def test_loss_report_layout():
    parts = dict(scal_geo=1, scal_sem=2, ce=3, distill_ce=4, dice=5, boundary=6, tpv=7)
    r = loss_report(parts, LossWeights(1, 1, 2))
    assert r["voxel"] == 6 and r["distill"] == 15 and r["total"] == 35
    assert set(r) >= {"scal_geo", "scal_sem", "ce", "dice", "boundary", "tpv", "total"}


@given(st.integers(0, 10**6))
def test_ignore_voxels_never_matter(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, size=(4, 4, 2))
    gt[rng.random(gt.shape) < 0.3] = IGNORE
    gt[0, 0, 0] = 1
    logits = rng.normal(size=(4, 4, 2, 3))
    other = logits.copy()
    other[gt == IGNORE] = rng.normal(size=((gt == IGNORE).sum(), 3)) * 10
    pol = ClassWeightPolicy.uniform(3)
    assert scal_geo(logits, gt, (1, 2)) == scal_geo(other, gt, (1, 2))
    assert scal_sem(logits, gt, (1, 2)) == scal_sem(other, gt, (1, 2))
    assert voxel_ce(logits, gt, pol) == voxel_ce(other, gt, pol)


@given(st.integers(0, 10**6))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, size=(2, 2, 2))
    logits = rng.normal(size=(2, 2, 2, 3)) * 3
    probs = rng.dirichlet(np.ones(3), size=(4, 4))
    target = rng.dirichlet(np.ones(3), size=(4, 4))
    vals = [
        scal_geo(logits, gt), scal_sem(logits, gt), voxel_ce(logits, gt, ClassWeightPolicy.uniform(3)),
        dice_loss(probs, target), boundary_loss(probs, target), distill_ce(np.log(probs), target),
    ]
    assert all(np.isfinite(v) and v >= -1e-12 for v in vals)


def central_difference(f, x, i, h=1e-6):
    xp, xm = x.copy(), x.copy()
    xp.flat[i] += h
    xm.flat[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


def test_gradients_match_finite_differences(rng):
    gt = rng.integers(0, 4, size=(3, 2, 2))
    logits = rng.normal(size=(3, 2, 2, 4))
    pol = ClassWeightPolicy(rng.uniform(0.5, 2, 4))
    dist = rng.uniform(0, 50, gt.shape)
    g = voxel_ce_grad(logits, gt, pol, dist)
    for i in rng.choice(logits.size, 10, replace=False):
        fd = central_difference(lambda x: voxel_ce(x, gt, pol, dist), logits, i)
        assert abs(g.flat[i] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-9
    p = rng.uniform(0.05, 0.95, (5, 5, 3))
    t = rng.uniform(0, 1, (5, 5, 3))
    gd = dice_grad(p, t)
    for i in rng.choice(p.size, 10, replace=False):
        fd = central_difference(lambda x: dice_loss(x, t), p, i)
        assert abs(gd.flat[i] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-9
