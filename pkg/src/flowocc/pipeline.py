"""End-to-end forward pass: flow alignment, depth fusion, voxel lifting, losses and metrics."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from flowocc import IGNORE
from flowocc.depth_fusion import (
    CgAttentionParams,
    CurriculumSchedule,
    DepthBins,
    DepthNetWeights,
    VolumeFusionWeights,
    build_depth_volumes,
    cg_attention_3d,
    complete_depth,
    fuse_depth,
    lambda_at,
    valid_depth,
)
from flowocc.errors import InputError, PipelineError
from flowocc.flow_align import ConsistencyParams, NcaParams, build_raw, fwd_bwd_check, mask_gate, nca_fuse
from flowocc.grid import warp
from flowocc.losses import (
    ClassWeightPolicy,
    LossWeights,
    boundary_loss,
    dice_loss,
    distill_ce,
    loss_report,
    scal_geo,
    scal_sem,
    tpv_loss,
    voxel_ce,
)
from flowocc.metrics import ConfusionMatrix, DEFAULT_RANGES, accumulate, metrics_report, miou, range_miou
from flowocc.nn import softmax
from flowocc.synth import SceneConfig, gt_flow, gt_voxels, random_scene, render
from flowocc.tensorio import load_labels, load_mask, load_tensor, save_mask, save_tensor, save_voxels
from flowocc.voxel_lift import (
    PLANES,
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
)

SWITCHES = ("mask_gate", "nca", "cdf", "cga3d", "distill")


@dataclass
class PipelineConfig:
    """Everything a run needs. ``scene`` / ``input_dir`` pick the input source.

    With neither set, the seeded default synthetic scene is used. ``lam``
    overrides the curriculum weight; otherwise it is read off the schedule at
    ``step`` (default: halfway through).
    """

    scene: dict[str, Any] | None = None
    input_dir: str | None = None
    weights_dir: str | None = None
    out_dir: str | None = None
    seed: int = 0
    history: int = 2
    total_steps: int = 1000
    step: int | None = None
    lam: float | None = None
    lambda_shape: str = "linear"
    warmup_frac: float = 0.2
    depth_bins: int = 32
    depth_range: tuple[float, float] = (2.0, 58.0)
    sigma_bins: float = 0.3
    voxel_spec: dict[str, Any] = field(default_factory=lambda: VoxelSpec().to_dict())
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    switches: dict[str, bool] = field(default_factory=lambda: {s: True for s in SWITCHES})
    use_lidar: bool = True
    alpha: float = 0.01
    beta: float = 0.5
    nca_window: int = 3
    nca_dim: int = 8
    cga_dim: int = 4
    fusion_channels: int = 4
    proposal_threshold: float = 1e-6
    max_proposals: int = 1024
    dca_points: int = 4
    dsa_points: int = 4
    occ_fusion_weight: float = 0.5
    dump_intermediates: bool = False

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        unknown = set(self.switches) - set(SWITCHES)
        if unknown:
            raise InputError(f"unknown ablation switches {sorted(unknown)}")
        self.switches = {s: bool(self.switches.get(s, True)) for s in SWITCHES}
        if self.history < 1:
            raise InputError("history must be >= 1")
        if self.scene is not None and self.input_dir is not None:
            raise InputError("give either scene or input_dir, not both")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise InputError(f"lam must lie in [0, 1], got {self.lam}")

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.total_steps, self.warmup_frac, self.lambda_shape)

    def curriculum_weight(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        step = self.total_steps // 2 if self.step is None else self.step
        return lambda_at(self.schedule(), step)

    def bins(self) -> DepthBins:
        return DepthBins(self.depth_bins, *self.depth_range)

    def spec(self) -> VoxelSpec:
        return VoxelSpec.from_dict(self.voxel_spec)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["depth_range"] = list(self.depth_range)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


class HistoryFrame(NamedTuple):
    features: np.ndarray
    flow_to_past: np.ndarray  # current grid -> past frame
    flow_to_current: np.ndarray  # past grid -> current frame


class SceneInputs(NamedTuple):
    features: np.ndarray
    lidar: np.ndarray | None
    stereo: np.ndarray
    labels: np.ndarray
    history: list[HistoryFrame]
    camera: CameraModel
    gt_voxels: np.ndarray
    class_names: list[str]


def synth_inputs(scene: SceneConfig, history: int, spec: VoxelSpec) -> SceneInputs:
    cur = scene.frame_count - 1
    if history > cur:
        raise InputError(f"history {history} needs at least {history + 1} frames, scene has {scene.frame_count}")
    now = render(scene, cur)
    hist = []
    for t2 in range(cur - 1, cur - 1 - history, -1):
        fwd, bwd, _ = gt_flow(scene, cur, t2)
        hist.append(HistoryFrame(render(scene, t2).features, fwd, bwd))
    return SceneInputs(
        now.features, now.lidar, now.stereo, now.labels, hist,
        scene.camera(cur), gt_voxels(scene, cur, spec), list(scene.class_names),
    )


def load_inputs(input_dir: str | Path, history: int) -> tuple[SceneInputs, VoxelSpec]:
    """Read a directory written by :func:`flowocc.synth.write_scene`."""
    root = Path(input_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"missing manifest: {manifest_path}")
    m = json.loads(manifest_path.read_text())
    cur = int(m["current"])
    if history > cur:
        raise InputError(f"history {history} needs frames back to {cur - history}, manifest starts at 0")

    def path(rel: str) -> Path:
        p = root / rel
        if not p.exists():
            raise InputError(f"missing input file: {p}")
        return p

    frame = m["frames"][str(cur)]
    hist = []
    for t2 in range(cur - 1, cur - 1 - history, -1):
        fl = m["flows"][str(t2)]
        hist.append(HistoryFrame(
            load_tensor(path(m["frames"][str(t2)]["features"])),
            load_tensor(path(fl["fwd"])),
            load_tensor(path(fl["bwd"])),
        ))
    gt, meta = load_labels(path(m["voxels"]))
    spec = VoxelSpec.from_dict(meta.get("voxel_spec", m["voxel_spec"]))
    lidar = load_tensor(path(frame["lidar"])) if "lidar" in frame else None
    inputs = SceneInputs(
        load_tensor(path(frame["features"])),
        lidar,
        load_tensor(path(frame["stereo"])),
        np.rint(load_tensor(path(frame["labels"]))).astype(np.int64),
        hist,
        CameraModel.from_dict(m["cameras"][str(cur)]),
        gt,
        meta.get("class_names", m["scene"].get("class_names")),
    )
    return inputs, spec


@dataclass
class PipelineWeights:
    """All learned parameters of the forward pass."""

    raw_fusion: np.ndarray
    nca: NcaParams
    depth_net: DepthNetWeights
    cga_mo: CgAttentionParams
    cga_st: CgAttentionParams
    volume_fusion: VolumeFusionWeights
    dca: DeformAttnParams
    dsa: DeformAttnParams
    local: LocalEncoderWeights
    tpv: TpvWeights
    head_w: np.ndarray
    head_b: np.ndarray
    tpv_head_w: np.ndarray
    tpv_head_b: np.ndarray
    seg_w: np.ndarray
    seg_b: np.ndarray

    @classmethod
    def random(cls, cfg: PipelineConfig, channels: int, n_classes: int, history: int) -> "PipelineWeights":
        rng = np.random.default_rng([cfg.seed, 31337])
        c, k = channels, n_classes + 1

        def lin(o, i):
            return rng.normal(0.0, 1.0 / np.sqrt(i), (o, i))

        return cls(
            raw_fusion=lin(c, c * (1 + history)),
            nca=NcaParams.random(c, cfg.nca_dim, cfg.nca_window, rng),
            depth_net=DepthNetWeights.random(c, c, cfg.depth_bins, rng),
            cga_mo=CgAttentionParams.random(cfg.cga_dim, rng),
            cga_st=CgAttentionParams.random(cfg.cga_dim, rng),
            volume_fusion=VolumeFusionWeights.random(cfg.fusion_channels, rng),
            dca=DeformAttnParams.random(cfg.dca_points, 2, c, rng),
            dsa=DeformAttnParams.random(cfg.dsa_points, 3, c, rng),
            local=LocalEncoderWeights.random(c, rng),
            tpv=TpvWeights.random(c, rng),
            head_w=lin(k, c), head_b=np.zeros(k),
            tpv_head_w=lin(k, c), tpv_head_b=np.zeros(k),
            seg_w=lin(k, c), seg_b=np.zeros(k),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view; nested parameters use dotted names."""
        out: dict[str, np.ndarray] = {}
        for f in dataclasses.fields(self):
            _flatten(f.name, getattr(self, f.name), out)
        return out

    def save(self, directory: str | Path) -> None:
        root = Path(directory)
        for name, arr in self.arrays().items():
            save_tensor(root / f"{name}.f32", np.atleast_1d(arr))

    def load_overrides(self, directory: str | Path) -> list[str]:
        """Replace every parameter that has a ``<name>.f32`` file in ``directory``."""
        root = Path(directory)
        if not root.is_dir():
            raise InputError(f"weights directory not found: {root}")
        loaded = []
        for name, current in self.arrays().items():
            p = root / f"{name}.f32"
            if not p.exists():
                continue
            arr = load_tensor(p).astype(np.float64)
            if arr.size != np.size(current):
                raise InputError(f"{p}: expected {np.shape(current)}, file holds {arr.shape}")
            _assign(self, name, arr.reshape(np.shape(current)) if np.ndim(current) else float(arr.ravel()[0]))
            loaded.append(name)
        return loaded


def _flatten(prefix: str, value: Any, out: dict[str, np.ndarray]) -> None:
    if dataclasses.is_dataclass(value):
        for f in dataclasses.fields(value):
            _flatten(f"{prefix}.{f.name}", getattr(value, f.name), out)
    elif isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}", value[k], out)
    elif isinstance(value, np.ndarray) or isinstance(value, float):
        out[prefix] = np.asarray(value, dtype=np.float64)


def _assign(root: Any, dotted: str, value: Any) -> None:
    *path, last = dotted.split(".")
    obj = root
    for part in path:
        obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
    if isinstance(obj, dict):
        obj[last] = value
    else:
        setattr(obj, last, value)


@dataclass
class PipelineResult:
    labels: np.ndarray
    logits: np.ndarray
    losses: dict[str, float]
    metrics: dict[str, Any]
    timing: dict[str, float]
    intermediates: dict[str, np.ndarray]
    lam: float
    spec: VoxelSpec
    class_names: list[str]


class _Stages:
    """Times stages and rejects non-finite outputs."""

    def __init__(self, keep: bool):
        self.timing: dict[str, float] = {}
        self.keep = keep
        self.saved: dict[str, np.ndarray] = {}
        self._name = ""
        self._t0 = 0.0

    def __call__(self, name: str):
        self._name = name
        return self

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timing[self._name] = self.timing.get(self._name, 0.0) + time.perf_counter() - self._t0
        return False

    def check(self, stage: str, **arrays: np.ndarray) -> None:
        for key, arr in arrays.items():
            a = np.asarray(arr)
            if a.dtype.kind == "f" and not np.all(np.isfinite(a)):
                raise PipelineError(stage, f"non-finite values in {key}")
            if self.keep:
                self.saved[key] = a


def soft_pseudo_labels(labels: np.ndarray, n_classes: int, smoothing: float = 0.1) -> np.ndarray:
    """Label-smoothed one-hot class distributions standing in for external pseudo-labels."""
    k = n_classes + 1
    onehot = np.eye(k)[np.clip(labels, 0, k - 1)]
    return (1.0 - smoothing) * onehot + smoothing / k


def _stereo_dense(stereo: np.ndarray) -> np.ndarray:
    return stereo if valid_depth(stereo).all() else complete_depth(stereo)


def run_pipeline(
    cfg: PipelineConfig,
    weights: PipelineWeights | None = None,
    inputs: tuple[SceneInputs, VoxelSpec] | None = None,
) -> PipelineResult:
    """Run the whole forward pass and score it against the scene's ground truth."""
    st = _Stages(cfg.dump_intermediates)
    sw = cfg.switches

    with st("inputs"):
        if inputs is not None:
            data, spec = inputs
        elif cfg.input_dir is not None:
            data, spec = load_inputs(cfg.input_dir, cfg.history)
        else:
            spec = cfg.spec()
            scene = SceneConfig.from_dict(cfg.scene) if cfg.scene is not None else random_scene(cfg.seed)
            data = synth_inputs(scene, cfg.history, spec)
    cur = np.asarray(data.features, dtype=np.float64)
    h, w, c = cur.shape
    n_classes = len(data.class_names)
    bins = cfg.bins()
    if weights is None:
        weights = PipelineWeights.random(cfg, c, n_classes, cfg.history)
        if cfg.weights_dir is not None:
            weights.load_overrides(cfg.weights_dir)

    # temporal alignment
    with st("warp"):
        warped = [warp(hf.features, hf.flow_to_past) for hf in data.history]
        st.check("warp", **{f"warped_{i + 1}": x for i, x in enumerate(warped)})
    with st("fwd_bwd_check"):
        params = ConsistencyParams(cfg.alpha, cfg.beta)
        masks = [fwd_bwd_check(hf.flow_to_past, hf.flow_to_current, params)[0] for hf in data.history]
        st.check("fwd_bwd_check", **{f"occlusion_{i + 1}": m for i, m in enumerate(masks)})
    with st("mask_gate"):
        gated = [mask_gate(x, m) for x, m in zip(warped, masks)] if sw["mask_gate"] else warped
        st.check("mask_gate", **{f"gated_{i + 1}": x for i, x in enumerate(gated)})
    with st("nca"):
        if sw["nca"]:
            f_fuse = nca_fuse(cur, gated, weights.nca)
        else:
            f_fuse = np.mean(np.stack([cur] + gated), axis=0)
        st.check("nca", f_fuse=f_fuse)
    with st("build_raw"):
        f_raw = build_raw(cur, warped, weights.raw_fusion)
        st.check("build_raw", f_raw=f_raw)

    # depth
    lam = cfg.curriculum_weight() if sw["cdf"] else 0.0
    with st("depth_fusion"):
        stereo = _stereo_dense(np.asarray(data.stereo, dtype=np.float64))
        if sw["cdf"] and cfg.use_lidar and data.lidar is not None:
            dense = complete_depth(data.lidar)
            fused = fuse_depth(dense, stereo, lam)
        else:
            fused = stereo
        st.check("depth_fusion", fused_depth=fused)
    with st("depth_volumes"):
        vols = build_depth_volumes(fused, f_fuse, weights.depth_net, bins, cfg.sigma_bins)
        st.check("depth_volumes", d_mo=vols.mono, d_st=vols.stereo, f_e=vols.features)
    with st("cga3d"):
        if sw["cga3d"]:
            v_mo_w = cg_attention_3d(vols.stereo, vols.mono, weights.cga_mo)
            v_st_w = cg_attention_3d(vols.mono, vols.stereo, weights.cga_st)
        else:
            v_mo_w, v_st_w = vols.mono, vols.stereo
        st.check("cga3d", v_mo_weighted=v_mo_w, v_st_weighted=v_st_w)
    with st("fuse_volumes"):
        from flowocc.depth_fusion import fuse_volumes

        d_v = fuse_volumes(v_mo_w, v_st_w, weights.volume_fusion)
        st.check("fuse_volumes", d_v=d_v)

    # voxels
    centers = bins.centers
    with st("lss"):
        v_coarse, dropped = lss_lift(d_v, vols.features, data.camera, spec, centers)
        v_raw, _ = lss_lift(d_v, f_raw, data.camera, spec, centers)
        st.check("lss", v_coarse=v_coarse, v_raw=v_raw)
    with st("propose"):
        proposals = propose(v_coarse, cfg.proposal_threshold, cfg.max_proposals)
        st.check("propose", proposals=proposals)
    with st("dca"):
        q_s = dca(proposals, v_coarse, vols.features, data.camera, spec, weights.dca)
        st.check("dca", q_s=q_s)
    with st("merge_raw"):
        merged = merge_raw(q_s, v_raw)
        st.check("merge_raw", merged=merged)
    with st("dsa"):
        v_s = dsa(merged, weights.dsa)
        st.check("dsa", v_s=v_s)
    with st("occ_encode"):
        enc, planes = occ_encode(v_s, weights.local, weights.tpv, cfg.occ_fusion_weight, return_planes=True)
        st.check("occ_encode", encoded=enc)
    with st("classify"):
        labels, logits = classify(enc, weights.head_w, weights.head_b)
        st.check("classify", logits=logits)

    # supervision
    gt = np.asarray(data.gt_voxels, dtype=np.int64)
    sensor = data.camera.position
    with st("losses"):
        policy = ClassWeightPolicy.uniform(n_classes + 1)
        dist = np.linalg.norm(spec.centers() - sensor, axis=-1)
        scales = [s for s in (1, 2) if all(d % s == 0 for d in spec.dims)]
        parts = {
            "scal_geo": scal_geo(logits, gt, scales),
            "scal_sem": scal_sem(logits, gt, scales),
            "ce": voxel_ce(logits, gt, policy, dist),
        }
        plane_logits = {p: planes[p] @ weights.tpv_head_w.T + weights.tpv_head_b for p in PLANES}
        parts["tpv"] = tpv_loss(plane_logits, gt, policy, spec, sensor)
        if sw["distill"]:
            seg_logits = f_fuse @ weights.seg_w.T + weights.seg_b
            seg_probs = softmax(seg_logits, axis=-1)
            target = soft_pseudo_labels(data.labels, n_classes)
            parts["distill_ce"] = distill_ce(seg_logits, target)
            parts["dice"] = dice_loss(seg_probs, target)
            parts["boundary"] = boundary_loss(seg_probs, target)
        else:
            parts.update(distill_ce=0.0, dice=0.0, boundary=0.0)
        losses = loss_report(parts, LossWeights(*cfg.loss_weights))
        if not all(np.isfinite(v) for v in losses.values()):
            raise PipelineError("losses", "non-finite loss value")
    with st("metrics"):
        cm = accumulate(labels, gt, ConfusionMatrix(n_classes))
        ranges = range_miou(labels, gt, spec, n_classes, DEFAULT_RANGES, sensor)
        block = {f"{r:g}m": v for r, v in zip(DEFAULT_RANGES, ranges)}
        metrics = metrics_report(cm, data.class_names, block)
        metrics["miou_raw"] = miou(cm)
        metrics["lss_dropped_points"] = dropped
        metrics["depth_clamped_pixels"] = vols.clamped
        metrics["proposals"] = int(len(proposals))

    return PipelineResult(labels, logits, losses, metrics, st.timing, st.saved, lam, spec, data.class_names)


def write_outputs(result: PipelineResult, cfg: PipelineConfig, out_dir: str | Path) -> Path:
    """Write labels, reports and (if kept) intermediates under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_voxels(out / "labels.f32", result.labels, result.spec, result.class_names)
    save_tensor(out / "logits.f32", result.logits)
    (out / "losses.json").write_text(json.dumps(result.losses, indent=2))
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2))
    (out / "timing.json").write_text(json.dumps(result.timing, indent=2))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    for name, arr in result.intermediates.items():
        if arr.dtype == bool:
            save_mask(out / "intermediates" / f"{name}.f32", arr)
        else:
            save_tensor(out / "intermediates" / f"{name}.f32", arr)
    return out


def eval_only(pred_path: str | Path, gt_path: str | Path, spec: VoxelSpec | None = None, class_names: list[str] | None = None) -> dict[str, Any]:
    """Metrics report for a saved prediction against a saved ground-truth grid."""
    for p in (pred_path, gt_path):
        if not Path(p).exists():
            raise InputError(f"missing file: {p}")
    pred, pmeta = load_labels(pred_path)
    gt, gmeta = load_labels(gt_path)
    names = class_names or gmeta.get("class_names") or pmeta.get("class_names")
    n_classes = len(names) if names else int(max(pred.max(), gt[gt != IGNORE].max(initial=0)))
    cm = accumulate(pred, gt, ConfusionMatrix(n_classes))
    block = None
    spec_dict = gmeta.get("voxel_spec") or pmeta.get("voxel_spec")
    if spec is None and spec_dict is not None:
        spec = VoxelSpec.from_dict(spec_dict)
    if spec is not None and tuple(spec.dims) == gt.shape:
        ranges = range_miou(pred, gt, spec, n_classes)
        block = {f"{r:g}m": v for r, v in zip(DEFAULT_RANGES, ranges)}
    report = metrics_report(cm, names, block)
    report["miou_raw"] = miou(cm)
    return report


def window_sweep(
    base: PipelineConfig,
    seeds=range(3),
    windows=(1, 2, 3, 4),
) -> dict[int, float]:
    """Mean mIoU per history length over seeded scenes (current frame = last frame)."""
    out = {}
    for win in windows:
        scores = []
        for s in seeds:
            cfg = dataclasses.replace(base, seed=int(s), history=win, scene=None, input_dir=None, dump_intermediates=False)
            cfg.scene = random_scene(int(s), frame_count=max(5, win + 1)).to_dict()
            scores.append(run_pipeline(cfg).metrics["miou_raw"])
        out[win] = float(np.nanmean(scores))
    return out
