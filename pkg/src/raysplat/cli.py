"""Command-line front end: synth, train, render, eval, noise-bench."""

import argparse
import os
import sys

import numpy as np

from .bench import BenchError, run_noise_bench
from .camera import GeometryError, relative_pose
from .diffcore import CheckpointError, DiffError, OptimError
from .gaussians import GaussianError, save_gaussians
from .imageio import ImageIOError, write_ppm
from .metrics import MetricsError, psnr, ssim
from .scenes import (DatasetIndex, SceneError, SyntheticSceneSpec,
                     generate_scene, load_scene)
from .training import (TrainConfig, TrainError, evaluate_psnr,
                       forward_pipeline, load_pipeline_checkpoint, train)

_RUNTIME_ERRORS = (TrainError, BenchError, SceneError, MetricsError,
                   GeometryError, GaussianError, ImageIOError, DiffError,
                   OptimError, CheckpointError, OSError, ValueError, KeyError)


def _cmd_synth(args) -> int:
    for i in range(args.scenes):
        spec = SyntheticSceneSpec(
            seed=args.seed + i, kind=args.kind, texture=args.texture,
            texture_freq=args.texture_freq, rig=args.rig,
            width=args.width, height=args.height, focal=args.focal,
            n_context=args.contexts, n_target=args.targets)
        out = os.path.join(args.out, f"scene{i:03d}")
        generate_scene(spec, out)
        print(out)
    return 0


def _cmd_train(args) -> int:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = TrainConfig()
    overrides = {"dataset": args.dataset, "out_dir": args.out,
                 "steps": args.steps, "seed": args.seed, "lr": args.lr,
                 "target_psnr": args.target_psnr}
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    if not cfg.dataset:
        raise TrainError("no dataset given (use --dataset or --config)")
    res = train(cfg, resume=args.resume)
    if res.aborted:
        print(f"aborted after {res.steps_run} steps: {res.abort_reason}",
              file=sys.stderr)
        if res.checkpoint:
            print(f"last good checkpoint: {res.checkpoint}", file=sys.stderr)
        return 1
    print(f"ran {res.steps_run} steps")
    if res.final_val_psnr is not None:
        print(f"validation psnr {res.final_val_psnr:.2f}")
    if res.checkpoint:
        print(f"checkpoint {res.checkpoint}")
    if res.best_checkpoint:
        print(f"best checkpoint {res.best_checkpoint} "
              f"({res.best_val_psnr:.2f} dB)")
    return 0


def _cmd_render(args) -> int:
    pipe, _, _, _ = load_pipeline_checkpoint(args.checkpoint)
    batch = load_scene(args.scene)
    result = forward_pipeline(pipe, batch)
    os.makedirs(args.out, exist_ok=True)
    save_gaussians(os.path.join(args.out, "gaussians.bin"),
                   result.gaussians.to_set())
    cam0 = batch.cameras[0]
    for i, rend in enumerate(result.renders):
        path = os.path.join(args.out, f"target{i:03d}.ppm")
        write_ppm(path, rend.data)
        line = path
        if i < batch.n_target:
            line += f"  psnr {psnr(rend.data, batch.target_images[i]):.2f}"
        print(line)
    for i in range(1, batch.n_context):
        r_t, t_t = result.poses[i]
        gt = relative_pose(cam0, batch.cameras[i])
        rot = np.degrees(np.arccos(np.clip(
            (np.trace(gt.R.T @ r_t.data) - 1) / 2, -1, 1)))
        print(f"view {i}: rotation error {rot:.2f} deg")
    return 0


def _cmd_eval(args) -> int:
    pipe, _, _, _ = load_pipeline_checkpoint(args.checkpoint)
    index = DatasetIndex.scan(args.dataset)
    scenes = [index.load(i) for i in range(len(index))]
    all_psnr, all_ssim = [], []
    for batch in scenes:
        result = forward_pipeline(pipe, batch)
        vals = [(psnr(r.data, gt), ssim(r.data, gt)) for r, gt in
                zip(result.renders, batch.target_images)]
        if not vals:
            continue
        p = np.mean([v[0] for v in vals])
        s = np.mean([v[1] for v in vals])
        all_psnr.append(p)
        all_ssim.append(s)
        print(f"{batch.scene_id}: psnr {p:.2f}  ssim {s:.4f}")
    if not all_psnr:
        raise TrainError("dataset has no target views to evaluate")
    print(f"mean: psnr {np.mean(all_psnr):.2f}  ssim {np.mean(all_ssim):.4f}")
    return 0


def _cmd_noise_bench(args) -> int:
    sigmas = tuple(float(s) for s in args.sigmas.split(","))
    report = run_noise_bench(args.checkpoint, args.out, sigmas=sigmas,
                             episodes=args.episodes, seed=args.seed)
    print(report.summary(), end="")
    print(f"wrote {os.path.join(args.out, 'bench.csv')}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="raysplat",
        description="pose-free feed-forward gaussian splatting tools")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write synthetic scenes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scenes", type=int, default=1)
    sp.add_argument("--kind", default="plane",
                    choices=["plane", "box", "spheres"])
    sp.add_argument("--texture", default="checker",
                    choices=["checker", "noise"])
    sp.add_argument("--texture-freq", type=float, default=6.0)
    sp.add_argument("--rig", default="forward", choices=["forward", "arc"])
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--focal", type=float, default=60.0)
    sp.add_argument("--contexts", type=int, default=2)
    sp.add_argument("--targets", type=int, default=1)
    sp.set_defaults(func=_cmd_synth)

    tp = sub.add_parser("train", help="run the optimization loop")
    tp.add_argument("--config", default=None)
    tp.add_argument("--dataset", default=None)
    tp.add_argument("--out", default=None)
    tp.add_argument("--steps", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--target-psnr", type=float, default=None)
    tp.add_argument("--resume", default=None)
    tp.set_defaults(func=_cmd_train)

    rp = sub.add_parser("render", help="render one scene from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--scene", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=_cmd_render)

    ep = sub.add_parser("eval", help="psnr/ssim over a dataset")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--dataset", required=True)
    ep.set_defaults(func=_cmd_eval)

    bp = sub.add_parser("noise-bench", help="pose-noise robustness study")
    bp.add_argument("--checkpoint", required=True)
    bp.add_argument("--out", required=True)
    bp.add_argument("--episodes", type=int, default=20)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--sigmas", default="0.0,0.01,0.05")
    bp.set_defaults(func=_cmd_noise_bench)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
