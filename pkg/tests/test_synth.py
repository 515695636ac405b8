import json
import math

import numpy as np
import pytest

from flowocc import EMPTY
from flowocc.errors import InputError
from flowocc.flow_align import fwd_bwd_check
from flowocc.synth import Box, SceneConfig, gt_flow, gt_voxels, lidar_mask, random_scene, render, write_scene
from flowocc.tensorio import load_tensor
from flowocc.voxel_lift import VoxelSpec


def plane_scene(**kw):
    # thin fronto-parallel slab 10 m ahead that fills the view
    slab = Box((10.0, -100.0, -100.0), (10.1, 100.0, 100.0), 2)
    base = dict(width=16, height=12, focal=8.0, ground_height=None, wall_distance=None, boxes=[slab], stereo_sigma=0.0)
    base.update(kw)
    return SceneConfig(**base)


def test_plane_depth_is_constant():
    fr = render(plane_scene(), 0)
    assert np.allclose(fr.depth, 10.0, atol=1e-12)
    assert np.all(fr.labels == 2)


def test_zero_sigma_stereo_is_exact():
    fr = render(random_scene(3, stereo_sigma=0.0), 1)
    assert np.array_equal(fr.stereo, fr.depth)


def test_stereo_noise_is_seeded():
    cfg = random_scene(3)
    a, b = render(cfg, 2), render(cfg, 2)
    assert np.array_equal(a.stereo, b.stereo) and np.array_equal(a.features, b.features)
    assert not np.array_equal(a.stereo, a.depth)


@pytest.mark.parametrize("rs,off,cs", [(4, 0, 2), (3, 1, 1), (5, 4, 3)])
def test_lidar_count_matches_pattern(rs, off, cs):
    cfg = plane_scene(lidar_row_step=rs, lidar_row_offset=off, lidar_col_step=cs)
    rows = math.ceil((cfg.height - off) / rs)
    cols = math.ceil(cfg.width / cs)
    lidar = render(cfg, 0).lidar
    assert int((lidar > 0).sum()) == rows * cols == int(lidar_mask(cfg).sum())


def test_frame_out_of_range():
    with pytest.raises(InputError):
        render(plane_scene(), 5)
    with pytest.raises(InputError):
        SceneConfig(frame_count=2)


def test_static_scene_has_zero_flow():
    cfg = random_scene(1, camera_velocity=(0.0, 0.0, 0.0))
    cfg.boxes = [Box(b.lo, b.hi, b.class_id) for b in cfg.boxes]
    fwd, bwd, occ = gt_flow(cfg, 2, 1)
    assert np.allclose(fwd, 0.0, atol=1e-9) and np.allclose(bwd, 0.0, atol=1e-9)
    assert not occ.any()


def test_lateral_camera_parallax():
    # camera slides 0.5 m along its own x axis (world -y) per frame
    cfg = plane_scene(camera_velocity=(0.0, -0.5, 0.0))
    fwd, _, _ = gt_flow(cfg, 0, 1)
    assert np.allclose(fwd[..., 0], -cfg.focal * 0.5 / 10.0, atol=1e-9)
    assert np.allclose(fwd[..., 1], 0.0, atol=1e-9)


def test_moving_box_occlusion_band():
    box = Box((10.0, -1.25, 1.6 - 1.25), (10.1, 1.25, 1.6 + 1.25), 3, velocity=(0.0, 1.25, 0.0))
    cfg = SceneConfig(width=64, height=64, focal=32.0, ground_height=None, boxes=[box])
    _, _, occ = gt_flow(cfg, 0, 1)
    # box spans rows 28..35 and shifts 4 px left, covering background columns 24..27
    expect = np.zeros((64, 64), bool)
    expect[28:36, 24:28] = True
    assert np.array_equal(occ, expect)


def test_covisible_scene_passes_consistency_check():
    cfg = SceneConfig(width=32, height=32, focal=16.0, ground_height=None, camera_velocity=(0.5, 0.0, 0.0))
    fwd, bwd, occ = gt_flow(cfg, 1, 0)  # receding view: every point stays in frame
    mf, _ = fwd_bwd_check(fwd, bwd)
    assert not occ.any() and not mf.any()


def test_depth_equals_ray_distance_along_optical_axis():
    cfg = random_scene(5)
    fr = render(cfg, 0)
    cam = cfg.camera(0)
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width]
    pts = cam.unproject(xs, ys, fr.depth)
    # ground points sit on z = 0, wall points on x = 50
    road = fr.labels == 1
    wall = fr.labels == 2
    assert np.allclose(pts[road][:, 2], 0.0, atol=1e-5)
    assert np.allclose(pts[wall][:, 0], 50.0, atol=1e-5)


def test_single_cell_box_labels_one_voxel():
    spec = VoxelSpec((4, 4, 4), (0.0, 0.0, 0.0), 1.0)
    cfg = SceneConfig(ground_height=None, wall_distance=None, boxes=[Box((1.0, 2.0, 3.0), (2.0, 3.0, 4.0), 4)])
    g = gt_voxels(cfg, 0, spec)
    assert (g != EMPTY).sum() == 1 and g[1, 2, 3] == 4


def test_ground_fills_bottom_row():
    spec = VoxelSpec()
    g = gt_voxels(SceneConfig(wall_distance=None), 0, spec)
    assert np.all(g[:, :, 0] == 1) and np.all(g[:, :, 1:] == EMPTY)


def test_overlap_goes_to_later_box():
    spec = VoxelSpec((4, 1, 1), (0.0, 0.0, 0.0), 1.0)
    a = Box((0.0, 0.0, 0.0), (3.0, 1.0, 1.0), 3)
    b = Box((2.0, 0.0, 0.0), (4.0, 1.0, 1.0), 5)
    g = gt_voxels(SceneConfig(ground_height=None, wall_distance=None, boxes=[a, b]), 0, spec)
    assert g[:, 0, 0].tolist() == [3, 3, 5, 5]


def test_boxes_move_in_voxels():
    spec = VoxelSpec((8, 1, 1), (0.0, 0.0, 0.0), 1.0)
    cfg = SceneConfig(ground_height=None, wall_distance=None, boxes=[Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 3, (2.0, 0.0, 0.0))])
    assert np.flatnonzero(gt_voxels(cfg, 2, spec)[:, 0, 0]).tolist() == [4]


def test_config_roundtrip_and_determinism():
    cfg = random_scene(11)
    again = SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert random_scene(11) == cfg and random_scene(12) != cfg


def test_write_scene_layout(tmp_path):
    cfg = random_scene(2, width=16, height=16, focal=8.0, frame_count=3)
    manifest = json.loads(write_scene(cfg, tmp_path).read_text())
    assert manifest["current"] == 2
    assert set(manifest["flows"]) == {"0", "1"}
    fwd = load_tensor(tmp_path / manifest["flows"]["1"]["fwd"])
    ref, _, _ = gt_flow(cfg, 2, 1)
    assert np.allclose(fwd, ref, atol=1e-4)
    depth = load_tensor(tmp_path / manifest["frames"]["0"]["depth"])
    assert depth.shape == (16, 16)
    assert (tmp_path / manifest["voxels"]).with_suffix(".json").exists()
