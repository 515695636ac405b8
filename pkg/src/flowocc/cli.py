"""Command line entry point: ``flowocc run | synth gen | eval | sweep``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from flowocc.errors import InputError, PipelineError, ShapeError
from flowocc.pipeline import SWITCHES, PipelineConfig, eval_only, run_pipeline, window_sweep, write_outputs
from flowocc.synth import SceneConfig, random_scene, write_scene
from flowocc.voxel_lift import VoxelSpec


def _depth_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}") from None
    return lo, hi


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline JSON config; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-dir", help="scene directory written by 'synth gen'")
    p.add_argument("--weights-dir", help="directory of <param>.f32 weight files")
    p.add_argument("--history", type=int, help="number of past frames")
    p.add_argument("--lambda-shape", choices=["linear", "cosine"])
    p.add_argument("--warmup-frac", type=float)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--step", type=int, help="curriculum step used to read the depth blend weight")
    p.add_argument("--lam", type=float, help="force the depth blend weight")
    p.add_argument("--depth-bins", type=int)
    p.add_argument("--depth-range", type=_depth_range, metavar="MIN,MAX")
    p.add_argument("--no-lidar", action="store_true", help="run camera-only")
    p.add_argument("--disable", action="append", choices=SWITCHES, default=[], help="turn off one stage (repeatable)")


def _build_config(args) -> PipelineConfig:
    base = PipelineConfig.load(args.config).to_dict() if args.config else {}
    mapping = {
        "seed": "seed", "input_dir": "input_dir", "weights_dir": "weights_dir", "history": "history",
        "lambda_shape": "lambda_shape", "warmup_frac": "warmup_frac", "total_steps": "total_steps",
        "step": "step", "lam": "lam", "depth_bins": "depth_bins", "depth_range": "depth_range",
    }
    for arg, key in mapping.items():
        value = getattr(args, arg, None)
        if value is not None:
            base[key] = value
    if getattr(args, "no_lidar", False):
        base["use_lidar"] = False
    if getattr(args, "disable", None):
        switches = dict(base.get("switches") or {s: True for s in SWITCHES})
        for s in args.disable:
            switches[s] = False
        base["switches"] = switches
    if getattr(args, "dump_intermediates", False):
        base["dump_intermediates"] = True
    if getattr(args, "out", None):
        base["out_dir"] = args.out
    return PipelineConfig.from_dict(base)


def cmd_run(args) -> int:
    cfg = _build_config(args)
    result = run_pipeline(cfg)
    if cfg.out_dir:
        write_outputs(result, cfg, cfg.out_dir)
    summary = {
        "lambda": result.lam,
        "losses": result.losses,
        "metrics": result.metrics,
        "timing_s": {k: round(v, 4) for k, v in result.timing.items()},
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_synth_gen(args) -> int:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"scene config not found: {path}")
        scene = SceneConfig.from_dict(json.loads(path.read_text()))
    else:
        scene = random_scene(args.seed)
    spec = VoxelSpec.from_dict(json.loads(Path(args.voxel_spec).read_text())) if args.voxel_spec else VoxelSpec()
    manifest = write_scene(scene, args.out, spec)
    print(manifest)
    return 0


def cmd_eval(args) -> int:
    report = eval_only(args.pred, args.gt)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    seeds = range(args.scenes)
    result = window_sweep(cfg, seeds=seeds, windows=tuple(args.windows))
    for win, score in result.items():
        print(f"history={win} frames  mIoU={100 * score:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowocc", description="Camera-based semantic scene completion forward pass.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline and score it")
    _add_overrides(run)
    run.add_argument("--out", help="output directory")
    run.add_argument("--dump-intermediates", action="store_true")
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth", help="synthetic scene tools")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("gen", help="render a scene to tensor files")
    gen.add_argument("--config", help="scene JSON; default is the seeded random scene")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--voxel-spec", help="voxel spec JSON")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_synth_gen)

    ev = sub.add_parser("eval", help="score a saved label grid")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", help="write the report here too")
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="mIoU per history length")
    _add_overrides(sweep)
    sweep.add_argument("--windows", type=int, nargs="+", default=[1, 2, 3, 4])
    sweep.add_argument("--scenes", type=int, default=3)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error in stage '{e.stage}': {e}", file=sys.stderr)
        return 3
    except (InputError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
