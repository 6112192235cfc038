"""End-to-end optimization: forward pipeline, combined loss, Adam loop.

The pipeline is pose-free: camera intrinsics are shared and known, but all
extrinsics come from the predicted ray bundles. The canonical frame is the
first context camera, pinned to the identity; target cameras are only ever
used for supervision and evaluation, expressed relative to that frame.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .camera import Camera, PlueckerRayMap, camera_to_rays, relative_pose, \
    rays_to_camera_t
from .costvol import CostAggregator, DepthHypothesisSet, correlate, \
    plane_sweep_warp
from .diffcore import Tensor, nn
from .features import FeatureRayNet, identity_ray_map
from .fusion import CanonicalFusion
from .gaussians import GaussianSet
from .heads import GaussianHead
from .metrics import psnr, ssim_t
from .raster import RenderTarget, render_tensors
from .scenes import DatasetIndex, SceneBatch

__all__ = [
    "TrainConfig", "TrainError", "Pipeline", "ForwardResult", "LossReport",
    "TrainResult", "forward_pipeline", "ray_targets", "alignment_scale",
    "compute_loss", "train", "evaluate_psnr", "save_pipeline_checkpoint",
    "load_pipeline_checkpoint",
]

STRIDE = 4  # backbone downsampling; cost volumes live on the H/4 grid


class TrainError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Everything a run needs; serializes to a flat JSON object."""

    dataset: str = ""
    out_dir: str = "runs/default"
    width: int = 64
    height: int = 64
    m_context: int = 2
    n_targets: int = 1
    depth_count: int = 8
    k: int = 3
    channels: int = 32
    heads: int = 4
    d_model: int = 64
    hidden: int = 64
    rho_factor: float = 2.0
    lambda_mse: float = 1.0
    lambda_perc: float = 0.05
    lambda_ray: float = 1.0
    lr: float = 2e-3
    seed: int = 0
    steps: int = 2000
    val_every: int = 100
    checkpoint_every: int = 250
    target_psnr: float = 0.0   # stop once validation reaches this; 0 disables

    def __post_init__(self):
        if self.width % STRIDE or self.height % STRIDE:
            raise TrainError("image sides must divide by the patch stride")
        if self.m_context < 2:
            raise TrainError("need at least 2 context views")
        if self.depth_count < 2:
            raise TrainError("need at least 2 depth hypotheses")
        if self.steps < 1:
            raise TrainError("step count must be positive")
        if min(self.lambda_mse, self.lambda_perc, self.lambda_ray) < 0:
            raise TrainError("loss weights must be non-negative")
        if self.target_psnr < 0:
            raise TrainError("target psnr must be non-negative")

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @staticmethod
    def load(path) -> "TrainConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {f_.name for f_ in TrainConfig.__dataclass_fields__.values()}
        extra = set(raw) - known
        if extra:
            raise TrainError(f"unknown config keys: {sorted(extra)}")
        return TrainConfig(**raw)


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

class Pipeline:
    """All learned components over one shared parameter store."""

    def __init__(self, cfg: TrainConfig, seed=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.store = nn.ParamStore()
        self.featnet = FeatureRayNet(self.store, rng, channels=cfg.channels,
                                     heads=cfg.heads)
        self.agg = CostAggregator(self.store, rng,
                                  depth_count=cfg.depth_count,
                                  feat_dim=cfg.channels,
                                  d_model=cfg.d_model, heads=cfg.heads)
        self.fusion = CanonicalFusion(self.store, rng, c_geo=cfg.depth_count,
                                      c_feat=cfg.channels)
        self.head = GaussianHead(self.store, rng, c_geo=cfg.depth_count,
                                 c_feat=cfg.channels,
                                 depth_count=cfg.depth_count, k=cfg.k,
                                 hidden=cfg.hidden,
                                 rho_factor=cfg.rho_factor)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    gaussians: object            # GaussianTensors, still on the tape
    anchors: object
    offsets: object
    rays: list                   # RayPrediction per context view
    poses: list                  # (R, T); [0] is the exact numpy identity
    v_g: Tensor
    v_f: Tensor
    weights: list
    hyps: DepthHypothesisSet
    renders: list = field(default_factory=list)       # color Tensors
    render_alphas: list = field(default_factory=list)
    render_depths: list = field(default_factory=list)
    target_cameras: list = field(default_factory=list)
    scale: float = 1.0


def _pose_arg(pose):
    """plane_sweep_warp pose override; None keeps the numeric identity."""
    r, t = pose
    if isinstance(r, np.ndarray):
        return None
    return (r, t)


def alignment_scale(poses, batch: SceneBatch) -> float:
    """Scene-scale factor mapping ground-truth translations to predicted.

    Median over non-canonical context views of |T_pred| / |T_gt|, clamped
    to [0.5, 2]. Predictions are scale-ambiguous; the clamp keeps target
    renders sane while the ray head is still near its zero init.
    """
    cam0 = batch.cameras[0]
    ratios = []
    for i in range(1, batch.n_context):
        t_pred = poses[i][1]
        t_pred = t_pred.data if isinstance(t_pred, Tensor) else t_pred
        rel = relative_pose(cam0, batch.cameras[i])
        ratios.append(np.linalg.norm(t_pred)
                      / max(np.linalg.norm(rel.t), 1e-9))
    return float(np.clip(np.median(ratios), 0.5, 2.0))


def forward_pipeline(pipe: Pipeline, batch: SceneBatch,
                     render_targets=True) -> ForwardResult:
    """Images -> rays -> poses -> cost volumes -> canonical volumes -> Gaussians."""
    cfg = pipe.cfg
    imgs = batch.context_images
    cam0 = batch.cameras[0]
    canon_cam = cam0.replace_pose(np.eye(3), np.zeros(3))
    hyps = DepthHypothesisSet(near=batch.near, far=batch.far,
                              count=cfg.depth_count)

    feats = pipe.featnet.extract_features(imgs)
    gh, gw, _ = feats[0].shape
    canon_map = identity_ray_map(canon_cam, gh, gw)
    rays = pipe.featnet.predict_rays(feats, canon_map)

    # pose recovery; the canonical view stays the identity by construction
    dhat = canon_map.d.reshape(-1, 3)
    poses = [(np.eye(3), np.zeros(3))]
    for pred in rays[1:]:
        d_flat = dc.reshape(pred.d, (gh * gw, 3))
        m_flat = dc.reshape(pred.m, (gh * gw, 3))
        poses.append(rays_to_camera_t(d_flat, m_flat, dhat))

    # one cost volume per reference view, correlating all others warped in
    vols = []
    for i in range(len(imgs)):
        warped, masks = [], []
        for j in range(len(imgs)):
            if j == i:
                continue
            wj, mj = plane_sweep_warp(feats[j], canon_cam, canon_cam, hyps,
                                      stride=STRIDE,
                                      src_pose=_pose_arg(poses[j]),
                                      ref_pose=_pose_arg(poses[i]))
            warped.append(wj)
            masks.append(mj)
        cost = correlate(feats[i], warped, masks)
        vols.append(pipe.agg(cost, (rays[i].d, rays[i].m), feats[i]))

    weights = pipe.fusion.estimate_weights(vols)
    v_g = pipe.fusion.fuse(vols, weights)
    up_feats = pipe.featnet.upsample_features(feats, cam0.height, cam0.width)
    up_w = pipe.fusion.upsample_weights(weights, cam0.height, cam0.width)
    v_f = pipe.fusion.fuse_features(up_feats, up_w)

    gaussians, anchors, offsets = pipe.head.decode(v_g, v_f, hyps, canon_cam)

    result = ForwardResult(gaussians=gaussians, anchors=anchors,
                           offsets=offsets, rays=rays, poses=poses,
                           v_g=v_g, v_f=v_f, weights=weights, hyps=hyps)
    if render_targets and batch.n_target:
        result.scale = alignment_scale(poses, batch)
        target = RenderTarget(width=cam0.width, height=cam0.height)
        for tc in batch.target_cameras:
            rel = relative_pose(cam0, tc)
            cam_rel = tc.replace_pose(rel.R, result.scale * rel.t)
            col, al, dep = render_tensors(
                gaussians.mu, gaussians.scale, gaussians.quat,
                gaussians.alpha, gaussians.color, cam_rel, target)
            result.renders.append(col)
            result.render_alphas.append(al)
            result.render_depths.append(dep)
            result.target_cameras.append(cam_rel)
    return result


def ray_targets(batch: SceneBatch, gh: int, gw: int) -> list:
    """Ground-truth patch rays per context view, relative to the canonical."""
    cam0 = batch.cameras[0]
    maps = []
    for cam in batch.context_cameras:
        rel = relative_pose(cam0, cam)
        maps.append(camera_to_rays(cam.replace_pose(rel.R, rel.t), gh, gw))
    return maps


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    total: float
    mse: float
    perc: float
    ray: float
    lam_mse: float
    lam_perc: float
    lam_ray: float

    @property
    def recomposed(self) -> float:
        return (self.lam_mse * self.mse + self.lam_perc * self.perc
                + self.lam_ray * self.ray)

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_t(terms):
    if not terms:
        return dc.constant(np.float64(0.0))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def compute_loss(renders, target_images, ray_pred, ray_gt,
                 lambdas=(1.0, 0.05, 1.0)):
    """Combined objective; returns (total Tensor, LossReport).

    Photometric MSE and the SSIM surrogate average over target views; the
    ray term is the mean squared (d, m) error over non-canonical views,
    invariant to patch ordering.
    """
    lam_mse, lam_perc, lam_ray = (float(v) for v in lambdas)
    mse_terms, perc_terms = [], []
    for rend, gt in zip(renders, target_images):
        gt_t = dc.constant(np.asarray(gt, dtype=np.float64))
        diff = rend - gt_t
        mse_terms.append(dc.tmean(diff * diff))
        perc_terms.append(1.0 - ssim_t(rend, gt_t))
    ray_terms = []
    for pred, gt_map in zip(ray_pred[1:], ray_gt[1:]):
        dd = pred.d - dc.constant(gt_map.d)
        dm = pred.m - dc.constant(gt_map.m)
        err = dc.concat([dd, dm], axis=-1)
        ray_terms.append(dc.tmean(err * err))
    mse = _mean_t(mse_terms)
    perc = _mean_t(perc_terms)
    ray = _mean_t(ray_terms)
    total = lam_mse * mse + lam_perc * perc + lam_ray * ray
    report = LossReport(total=float(total.data), mse=float(mse.data),
                        perc=float(perc.data), ray=float(ray.data),
                        lam_mse=lam_mse, lam_perc=lam_perc, lam_ray=lam_ray)
    return total, report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_pipeline_checkpoint(path, pipe: Pipeline, opt: dc.Adam, step: int,
                             rng: np.random.Generator, extras=None):
    arrays = {}
    for name in pipe.store.names():
        arrays[f"param/{name}"] = pipe.store[name].data
        arrays[f"adam_m/{name}"] = opt.m[name]
        arrays[f"adam_v/{name}"] = opt.v[name]
    extra = {
        "step": int(step),
        "adam_t": int(opt.t),
        "rng_state": rng.bit_generator.state,
        "config": asdict(pipe.cfg),
    }
    if extras:
        extra.update(extras)
    dc.save_checkpoint(path, arrays, extra)


def load_pipeline_checkpoint(path):
    """Restore (pipe, opt, rng, extra) exactly as saved."""
    arrays, extra = dc.load_checkpoint(path)
    cfg = TrainConfig(**extra["config"])
    pipe = Pipeline(cfg)
    opt = dc.Adam(pipe.store, lr=cfg.lr)
    for name in pipe.store.names():
        key = f"param/{name}"
        if key not in arrays:
            raise TrainError(f"{path}: checkpoint missing parameter {name!r}")
        pipe.store[name].data = arrays[key].copy()
        opt.m[name] = arrays[f"adam_m/{name}"].copy()
        opt.v[name] = arrays[f"adam_v/{name}"].copy()
    opt.t = int(extra["adam_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    return pipe, opt, rng, extra


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    steps_run: int
    aborted: bool
    abort_reason: str | None
    checkpoint: str | None
    log_path: str
    final_val_psnr: float | None
    best_checkpoint: str | None = None
    best_val_psnr: float | None = None


def _load_dataset(root) -> list:
    index = DatasetIndex.scan(root)
    return [index.load(i) for i in range(len(index))]


def evaluate_psnr(pipe: Pipeline, scenes, limit=None) -> float:
    """Mean target-view PSNR over the dataset, gradient-free."""
    vals = []
    for batch in (scenes[:limit] if limit else scenes):
        if not batch.n_target:
            continue
        result = forward_pipeline(pipe, batch)
        for rend, gt in zip(result.renders, batch.target_images):
            vals.append(psnr(rend.data, gt))
    if not vals:
        raise TrainError("no target views to evaluate")
    return float(np.mean(vals))


def train(cfg: TrainConfig, resume=None) -> TrainResult:
    scenes = _load_dataset(cfg.dataset)
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "log.jsonl")
    latest = os.path.join(cfg.out_dir, "ckpt_latest.bin")

    best_path = os.path.join(cfg.out_dir, "ckpt_best.bin")

    if resume is not None:
        pipe, opt, rng, extra = load_pipeline_checkpoint(resume)
        # schedule and location may change on resume; architecture must not
        skip = {"steps", "out_dir", "dataset", "val_every",
                "checkpoint_every", "target_psnr"}
        a, b = asdict(pipe.cfg), asdict(cfg)
        bad = [k for k in a if k not in skip and a[k] != b[k]]
        if bad:
            raise TrainError(f"resume config differs from checkpoint: {bad}")
        pipe.cfg = cfg
        start = int(extra["step"])
        last_good = resume
        best_val = extra.get("best_val_psnr")
        log_f = open(log_path, "a")
    else:
        pipe = Pipeline(cfg)
        opt = dc.Adam(pipe.store, lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        start = 0
        last_good = None
        best_val = None
        log_f = open(log_path, "w")

    lambdas = (cfg.lambda_mse, cfg.lambda_perc, cfg.lambda_ray)
    val_psnr = None

    def _result(steps_run, aborted, reason, ckpt):
        return TrainResult(steps_run, aborted, reason, ckpt, log_path,
                           val_psnr,
                           best_path if best_val is not None else None,
                           best_val)

    try:
        for step in range(start, cfg.steps):
            batch = scenes[int(rng.integers(len(scenes)))]
            t0 = time.perf_counter()
            tape = dc.Tape()
            try:
                with tape:
                    result = forward_pipeline(pipe, batch)
                    gh, gw = result.rays[0].d.shape[:2]
                    gt_rays = ray_targets(batch, gh, gw)
                    total, report = compute_loss(result.renders,
                                                 batch.target_images,
                                                 result.rays, gt_rays,
                                                 lambdas)
            except dc.DiffError as err:
                # the tape refuses non-finite intermediates outright
                log_f.write(json.dumps({"step": step, "event": "abort",
                                        "reason": f"non-finite: {err}"})
                            + "\n")
                return _result(step - start, True, f"non-finite: {err}",
                               last_good)
            if not np.isfinite(report.total):
                record = {"step": step, "event": "abort",
                          "reason": "non-finite loss", **report.to_dict()}
                log_f.write(json.dumps(record) + "\n")
                return _result(step - start, True, "non-finite loss",
                               last_good)
            grads = tape.backward(total, pipe.store)
            try:
                opt.step(grads)
            except dc.OptimError as err:
                log_f.write(json.dumps({"step": step, "event": "abort",
                                        "reason": str(err)}) + "\n")
                return _result(step - start, True, str(err), last_good)

            record = {"step": step, "scene": batch.scene_id,
                      "seconds": round(time.perf_counter() - t0, 4),
                      **report.to_dict()}
            done = step + 1
            fresh_val = done % cfg.val_every == 0 or done == cfg.steps
            if fresh_val:
                val_psnr = evaluate_psnr(pipe, scenes)
                record["val_psnr"] = val_psnr
                if best_val is None or val_psnr > best_val:
                    best_val = val_psnr
                    save_pipeline_checkpoint(
                        best_path, pipe, opt, done, rng,
                        extras={"val_psnr": val_psnr,
                                "best_val_psnr": best_val})
            log_f.write(json.dumps(record) + "\n")
            log_f.flush()
            reached = (fresh_val and cfg.target_psnr > 0
                       and val_psnr >= cfg.target_psnr)
            if reached or done % cfg.checkpoint_every == 0 \
                    or done == cfg.steps:
                save_pipeline_checkpoint(latest, pipe, opt, done, rng,
                                         extras={"val_psnr": val_psnr,
                                                 "best_val_psnr": best_val})
                last_good = latest
            if reached:
                log_f.write(json.dumps({"step": step,
                                        "event": "target_reached",
                                        "val_psnr": val_psnr}) + "\n")
                return _result(done - start, False, None, last_good)
    finally:
        log_f.close()
    return _result(cfg.steps - start, False, None, last_good)
