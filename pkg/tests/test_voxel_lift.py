import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowocc.errors import InputError, ShapeError
from flowocc.grid import bilinear_sample
from flowocc.synth import SceneConfig
from flowocc.voxel_lift import (
    CameraModel,
    DeformAttnParams,
    LocalEncoderWeights,
    TpvWeights,
    VoxelSpec,
    classify,
    dca,
    dsa,
    lss_lift,
    merge_raw,
    occ_encode,
    propose,
    tpv_planes,
)
from oracles import topk_loop, unproject_loop


def simple_camera(w=1, h=1, f=1.0):
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1.0]])
    return CameraModel(K, np.eye(4), w, h)


def test_camera_validation():
    with pytest.raises(InputError):
        CameraModel(np.zeros((3, 3)), np.eye(4), 2, 2)
    flip = np.eye(4)
    flip[0, 0] = -1.0
    with pytest.raises(InputError):
        CameraModel(np.eye(3), flip, 2, 2)
    skew = np.eye(4)
    skew[0, 1] = 0.3
    with pytest.raises(InputError):
        CameraModel(np.eye(3), skew, 2, 2)


def test_project_inverts_unproject(rng):
    cam = SceneConfig().camera(0)
    u, v = rng.uniform(0, 63, (2, 20))
    z = rng.uniform(1, 50, 20)
    pu, pv, pz = cam.project(cam.unproject(u, v, z))
    assert np.allclose(pu, u) and np.allclose(pv, v) and np.allclose(pz, z)


def test_single_point_splat():
    cam = simple_camera()
    spec = VoxelSpec((4, 4, 4), (-2.0, -2.0, 0.0), 1.0)
    centers = np.array([0.5, 1.5, 2.5, 3.5])
    d_v = np.zeros((4, 1, 1))
    d_v[2, 0, 0] = 1.0
    grid, dropped = lss_lift(d_v, np.ones((1, 1, 1)), cam, spec, centers)
    assert dropped == 0
    assert grid[2, 2, 2, 0] == 1.0
    assert grid.sum() == 1.0


def test_uniform_depth_mass_is_in_bound_fraction():
    cam = simple_camera()
    spec = VoxelSpec((2, 2, 2), (-1.0, -1.0, 0.0), 1.0)
    centers = np.array([0.5, 1.5, 2.5, 3.5])  # last two fall beyond z = 2
    d_v = np.full((4, 1, 1), 0.25)
    grid, dropped = lss_lift(d_v, np.ones((1, 1, 1)), cam, spec, centers)
    assert dropped == 2
    assert grid.sum() == pytest.approx(0.5)


def test_two_by_two_indices_match_hand_unprojection():
    K = np.array([[2.0, 0, 0.5], [0, 2.0, 0.5], [0, 0, 1.0]])
    pose = np.eye(4)
    pose[:3, :3] = [[0, 0, 1], [-1, 0, 0], [0, -1, 0]]
    pose[:3, 3] = [0.0, 0.0, 1.0]
    cam = CameraModel(K, pose, 2, 2)
    spec = VoxelSpec((8, 8, 8), (0.0, -4.0, -3.0), 1.0)
    centers = np.array([1.5, 4.5])
    feat = np.arange(1.0, 5.0).reshape(2, 2, 1)
    d_v = np.zeros((2, 2, 2))
    d_v[1] = 1.0
    grid, _ = lss_lift(d_v, feat, cam, spec, centers)
    expect = np.zeros_like(grid)
    for v in range(2):
        for u in range(2):
            p = unproject_loop(K, pose, u, v, 4.5)
            idx = tuple(int(np.floor((p[a] - spec.origin[a]) / spec.cell_size)) for a in range(3))
            expect[idx] += feat[v, u]
    assert np.array_equal(grid, expect)


def test_lss_linear_in_features(rng):
    cam = SceneConfig(width=8, height=6, focal=4).camera(0)
    spec = VoxelSpec((8, 8, 4), (0.0, -6.4, -1.0), 1.6)
    centers = np.linspace(2, 12, 5)
    d_v = rng.dirichlet(np.ones(5), size=(6, 8)).transpose(2, 0, 1)
    f1, f2 = rng.normal(size=(2, 6, 8, 3))
    g = lambda f: lss_lift(d_v, f, cam, spec, centers)[0]
    assert np.allclose(g(2.0 * f1 - f2), 2.0 * g(f1) - g(f2), atol=1e-10)


def test_lss_shape_errors(rng):
    cam = simple_camera(2, 2)
    with pytest.raises(ShapeError):
        lss_lift(np.ones((3, 2, 2)), np.ones((2, 3, 1)), cam, VoxelSpec(), np.ones(3))
    with pytest.raises(ShapeError):
        lss_lift(np.ones((3, 2, 2)), np.ones((2, 2, 1)), cam, VoxelSpec(), np.ones(2))


def test_propose_examples(rng):
    assert propose(np.zeros((3, 3, 3, 2)), 0.1).shape == (0, 3)
    g = np.zeros((3, 3, 3, 2))
    g[1, 2, 0] = [0.3, 0.4]
    assert propose(g, 0.1).tolist() == [[1, 2, 0]]


@given(st.integers(0, 10**6), st.integers(1, 30), st.floats(0.0, 2.0))
def test_propose_matches_full_sort(seed, k, thr):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 4, 2, 2))
    g[0, 0, 0] = g[1, 1, 1]  # force a tie
    assert [tuple(p) for p in propose(g, thr, k)] == topk_loop(g, thr, k)


def _visible_setup(rng):
    scene = SceneConfig(width=16, height=16, focal=8.0)
    cam = scene.camera(0)
    spec = VoxelSpec((8, 8, 4), (2.0, -6.4, -1.0), 1.6)
    u, v, z = cam.project(spec.centers())
    inside = (z > 0) & (u >= 0) & (u <= 15) & (v >= 0) & (v <= 15)
    props = np.argwhere(inside)[:10]
    return cam, spec, props


def test_dca_constant_field(rng):
    cam, spec, props = _visible_setup(rng)
    c = 3
    v = rng.normal(size=spec.dims + (c,))
    feat = np.full((16, 16, c), 2.5)
    out = dca(props, v, feat, cam, spec, DeformAttnParams.zero_init(4, 2, c))
    mask = np.zeros(spec.dims, bool)
    mask[tuple(props.T)] = True
    assert np.allclose(out[mask], 2.5)
    assert np.array_equal(out[~mask], v[~mask])


def test_dca_single_point_is_bilinear_sample(rng):
    cam, spec, props = _visible_setup(rng)
    v = rng.normal(size=spec.dims + (2,))
    feat = rng.normal(size=(16, 16, 2))
    out, weights = dca(props, v, feat, cam, spec, DeformAttnParams.zero_init(1, 2, 2), return_weights=True)
    assert np.allclose(weights, 1.0)
    for p in props:
        u, vv, _ = cam.project(spec.centers()[tuple(p)])
        assert np.allclose(out[tuple(p)], bilinear_sample(feat, u, vv), atol=1e-12)


def test_dca_skips_voxels_behind_camera(rng):
    cam = simple_camera(4, 4)
    spec = VoxelSpec((2, 2, 2), (-1.0, -1.0, -3.0), 1.0)  # every center has z < 0
    v = rng.normal(size=(2, 2, 2, 2))
    out = dca(np.array([[0, 0, 0], [1, 1, 1]]), v, np.ones((4, 4, 2)), cam, spec, DeformAttnParams.zero_init(2, 2, 2))
    assert np.array_equal(out, v)


def test_dca_weights_normalised(rng):
    cam, spec, props = _visible_setup(rng)
    v = rng.normal(size=spec.dims + (3,))
    p = DeformAttnParams.random(5, 2, 3, rng)
    p.offset_w = rng.normal(size=p.offset_w.shape)
    _, w = dca(props, v, rng.normal(size=(16, 16, 3)), cam, spec, p, return_weights=True)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)


def test_merge_raw(rng):
    a, b = rng.normal(size=(2, 3, 3, 2, 2))
    assert np.array_equal(merge_raw(a, np.zeros_like(a)), a)
    assert np.array_equal(merge_raw(np.zeros_like(a), b), b)
    assert np.array_equal(merge_raw(a, b), a + b)
    assert np.array_equal(merge_raw(a, b), merge_raw(b, a))
    with pytest.raises(ShapeError):
        merge_raw(a, b[:2])


def test_dsa_zero_offsets_doubles(rng):
    g = rng.normal(size=(3, 4, 2, 3))
    out, w = dsa(g, DeformAttnParams.zero_init(3, 3, 3), return_weights=True)
    assert np.allclose(out, 2 * g)
    assert np.allclose(w.sum(-1), 1.0)


def test_dsa_constant_grid_interior(rng):
    g = np.full((6, 6, 6, 2), 1.5)
    p = DeformAttnParams.random(4, 3, 2, rng, c_out=2)
    p.value_w = np.eye(2)
    p.offset_b = rng.uniform(-0.9, 0.9, p.offset_b.shape)
    out = dsa(g, p)
    assert np.allclose(out[1:-1, 1:-1, 1:-1], 3.0)


def test_occ_encode_endpoints(rng):
    g = rng.normal(size=(4, 4, 3, 2))
    local = LocalEncoderWeights.random(2, rng)
    tpv = TpvWeights.random(2, rng)
    local_only = occ_encode(g, local, tpv, 1.0)
    glob_only = occ_encode(g, local, tpv, 0.0)
    planes = tpv_planes(g, tpv)
    glob = planes["xy"][:, :, None] + planes["xz"][:, None, :] + planes["yz"][None, :, :]
    assert np.allclose(glob_only, glob)
    assert np.allclose(occ_encode(g, local, tpv, 0.3), 0.3 * local_only + 0.7 * glob_only)
    assert np.allclose(occ_encode(g, LocalEncoderWeights.identity(2), TpvWeights.zeros(2), 0.5), 0.5 * g)
    with pytest.raises(InputError):
        occ_encode(g, local, tpv, 1.2)


def test_classify(rng):
    onehot = np.eye(4)[rng.integers(0, 4, size=(3, 3, 2))]
    labels, _ = classify(onehot, np.eye(4))
    assert np.array_equal(labels, onehot.argmax(-1))
    tied, logits = classify(rng.normal(size=(2, 2, 2, 3)), np.zeros((5, 3)))
    assert np.all(tied == 0) and np.all(logits == 0)
    g = rng.normal(size=(3, 2, 2, 4))
    w, b = rng.normal(size=(6, 4)), rng.normal(size=6)
    labels, logits = classify(g, w, b)
    dense = g.reshape(-1, 4) @ w.T + b
    assert np.allclose(logits.reshape(-1, 6), dense)
    assert np.array_equal(labels.ravel(), dense.argmax(-1))
