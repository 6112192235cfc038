import json
import os

import numpy as np
import pytest

from raysplat import diffcore as dc
from raysplat.camera import Camera, PlueckerRayMap, so3_exp
from raysplat.features import RayPrediction
from raysplat.scenes import SceneBatch, SyntheticSceneSpec, generate_scene
from raysplat.training import (LossReport, Pipeline, TrainConfig, TrainError,
                               alignment_scale, compute_loss,
                               evaluate_psnr, forward_pipeline,
                               load_pipeline_checkpoint, ray_targets,
                               save_pipeline_checkpoint, train)


def _toy_cfg(**kw):
    base = dict(dataset="", out_dir="unused", width=16, height=16,
                depth_count=4, k=1, channels=8, heads=2, d_model=16,
                hidden=16, steps=2, val_every=1000, checkpoint_every=1000)
    base.update(kw)
    return TrainConfig(**base)


def _toy_batch(seed=0, size=16, m=2, t=1):
    rng = np.random.default_rng(seed)
    cams, imgs = [], []
    for i in range(m + t):
        if i == 0:
            r, tv = np.eye(3), np.zeros(3)
        else:
            r = so3_exp(rng.normal(size=3) * 0.05)
            tv = rng.normal(size=3) * 0.1
        cams.append(Camera(fx=size * 0.9, fy=size * 0.9, cx=(size - 1) / 2,
                           cy=(size - 1) / 2, R=r, T=tv,
                           width=size, height=size))
        imgs.append(rng.uniform(size=(size, size, 3)))
    return SceneBatch(images=imgs, cameras=cams, n_context=m, n_target=t,
                      near=0.5, far=2.5, scene_id=f"toy{seed}")


def _disk_dataset(root, n=2, size=16):
    for i in range(n):
        spec = SyntheticSceneSpec(seed=31 + i, kind="box", texture="checker",
                                  width=size, height=size, focal=size * 0.9,
                                  n_context=2, n_target=1)
        generate_scene(spec, os.path.join(root, f"s{i}"))
    return str(root)


# -- config -----------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = _toy_cfg(dataset="somewhere", lr=5e-4, lambda_perc=0.1)
    path = tmp_path / "config.json"
    cfg.save(path)
    assert TrainConfig.load(path) == cfg


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"widht": 64}))
    with pytest.raises(TrainError):
        TrainConfig.load(path)


def test_config_validation():
    with pytest.raises(TrainError):
        _toy_cfg(m_context=1)
    with pytest.raises(TrainError):
        _toy_cfg(width=30)
    with pytest.raises(TrainError):
        _toy_cfg(lambda_ray=-1.0)
    with pytest.raises(TrainError):
        _toy_cfg(steps=0)


# -- forward pipeline -------------------------------------------------------

def test_forward_deterministic_bitwise():
    batch = _toy_batch()
    cfg = _toy_cfg()
    outs = []
    for _ in range(2):
        res = forward_pipeline(Pipeline(cfg), batch)
        outs.append((res.gaussians.mu.data, res.renders[0].data))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])


def test_canonical_pose_identity_exact():
    res = forward_pipeline(Pipeline(_toy_cfg()), _toy_batch())
    r0, t0 = res.poses[0]
    assert np.array_equal(r0, np.eye(3))
    assert np.array_equal(t0, np.zeros(3))


def test_gaussian_count_hwk():
    cfg = _toy_cfg(k=3)
    res = forward_pipeline(Pipeline(cfg), _toy_batch())
    assert res.gaussians.count == 16 * 16 * 3


def test_forward_renders_match_target_count():
    res = forward_pipeline(Pipeline(_toy_cfg()), _toy_batch(t=2))
    assert len(res.renders) == 2
    assert res.renders[0].data.shape == (16, 16, 3)


# -- loss -------------------------------------------------------------------

def test_perfect_inputs_zero_loss():
    batch = _toy_batch()
    gt = ray_targets(batch, 4, 4)
    renders = [dc.constant(img) for img in batch.target_images]
    preds = [RayPrediction(dc.constant(g.d), dc.constant(g.m)) for g in gt]
    total, report = compute_loss(renders, batch.target_images, preds, gt)
    assert report.total == 0.0
    assert float(total.data) == 0.0


def test_loss_decomposition_exact_on_random_forward():
    batch = _toy_batch(seed=3)
    res = forward_pipeline(Pipeline(_toy_cfg()), batch)
    gt = ray_targets(batch, 4, 4)
    _, report = compute_loss(res.renders, batch.target_images, res.rays, gt)
    assert report.total == report.recomposed
    assert report.mse > 0 and report.perc > 0 and report.ray > 0


def test_loss_weight_arithmetic():
    report = LossReport(total=1.0 * 0.04 + 0.05 * 0.2 + 1.0 * 0.1,
                        mse=0.04, perc=0.2, ray=0.1,
                        lam_mse=1.0, lam_perc=0.05, lam_ray=1.0)
    assert abs(report.total - 0.15) < 1e-15
    assert report.total == report.recomposed


def test_ray_loss_invariant_to_patch_permutation():
    batch = _toy_batch(seed=4)
    gt = ray_targets(batch, 4, 4)
    rng = np.random.default_rng(5)
    pred_d = gt[1].d + 0.01 * rng.normal(size=gt[1].d.shape)
    pred_m = gt[1].m + 0.01 * rng.normal(size=gt[1].m.shape)
    preds = [RayPrediction(dc.constant(gt[0].d), dc.constant(gt[0].m)),
             RayPrediction(dc.constant(pred_d), dc.constant(pred_m))]
    _, base = compute_loss([], [], preds, gt)

    perm = rng.permutation(16)
    def shuffle(a):
        return a.reshape(16, 3)[perm].reshape(4, 4, 3)
    gt_p = [gt[0], PlueckerRayMap(shuffle(gt[1].d), shuffle(gt[1].m))]
    preds_p = [preds[0], RayPrediction(dc.constant(shuffle(pred_d)),
                                       dc.constant(shuffle(pred_m)))]
    _, shuffled = compute_loss([], [], preds_p, gt_p)
    assert abs(base.ray - shuffled.ray) < 1e-12


# -- alignment scale --------------------------------------------------------

def test_alignment_scale_matches_ground_truth():
    batch = _toy_batch(seed=6)
    gt = ray_targets(batch, 4, 4)
    # feed the ground-truth relative poses back in
    from raysplat.camera import relative_pose
    poses = [(np.eye(3), np.zeros(3))]
    for cam in batch.context_cameras[1:]:
        rel = relative_pose(batch.cameras[0], cam)
        poses.append((dc.constant(rel.R), dc.constant(rel.t)))
    assert abs(alignment_scale(poses, batch) - 1.0) < 1e-9


def test_alignment_scale_clamps():
    batch = _toy_batch(seed=7)
    zero = [(np.eye(3), np.zeros(3)),
            (dc.constant(np.eye(3)), dc.constant(np.zeros(3)))]
    assert alignment_scale(zero, batch) == 0.5
    from raysplat.camera import relative_pose
    rel = relative_pose(batch.cameras[0], batch.cameras[1])
    big = [(np.eye(3), np.zeros(3)),
           (dc.constant(rel.R), dc.constant(rel.t * 30.0))]
    assert alignment_scale(big, batch) == 2.0


def test_ray_targets_canonical_is_identity():
    batch = _toy_batch(seed=8)
    gt = ray_targets(batch, 4, 4)
    assert np.abs(gt[0].m).max() < 1e-15
    from raysplat.features import identity_ray_map
    canon = batch.cameras[0].replace_pose(np.eye(3), np.zeros(3))
    ident = identity_ray_map(canon, 4, 4)
    assert np.abs(gt[0].d - ident.d).max() < 1e-15


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = _toy_cfg()
    pipe = Pipeline(cfg)
    opt = dc.Adam(pipe.store, lr=cfg.lr)
    rng = np.random.default_rng(9)
    rng.integers(100)  # advance the stream so the state is non-trivial
    opt.m[pipe.store.names()[0]][:] = 0.25
    opt.t = 3
    path = tmp_path / "ckpt.bin"
    save_pipeline_checkpoint(path, pipe, opt, step=7, rng=rng,
                             extras={"val_psnr": 12.5})
    pipe2, opt2, rng2, extra = load_pipeline_checkpoint(path)
    for name in pipe.store.names():
        assert np.array_equal(pipe.store[name].data, pipe2.store[name].data)
        assert np.array_equal(opt.m[name], opt2.m[name])
        assert np.array_equal(opt.v[name], opt2.v[name])
    assert opt2.t == 3
    assert extra["step"] == 7 and extra["val_psnr"] == 12.5
    assert rng2.integers(10 ** 9) == rng.integers(10 ** 9)


def test_checkpoint_missing_param(tmp_path):
    cfg = _toy_cfg()
    pipe = Pipeline(cfg)
    opt = dc.Adam(pipe.store)
    path = tmp_path / "ckpt.bin"
    save_pipeline_checkpoint(path, pipe, opt, 0, np.random.default_rng(0))
    arrays, extra = dc.load_checkpoint(path)
    name = pipe.store.names()[0]
    del arrays[f"param/{name}"]
    dc.save_checkpoint(path, arrays, extra)
    with pytest.raises(TrainError):
        load_pipeline_checkpoint(path)


# -- train loop -------------------------------------------------------------

def test_train_smoke_and_log(tmp_path):
    root = _disk_dataset(tmp_path / "data")
    cfg = _toy_cfg(dataset=root, out_dir=str(tmp_path / "run"), steps=3,
                   val_every=2, checkpoint_every=2)
    result = train(cfg)
    assert not result.aborted
    assert result.steps_run == 3
    assert os.path.exists(result.checkpoint)
    rows = [json.loads(l) for l in open(result.log_path)]
    assert [r["step"] for r in rows] == [0, 1, 2]
    for r in rows:
        want = (r["lam_mse"] * r["mse"] + r["lam_perc"] * r["perc"]
                + r["lam_ray"] * r["ray"])
        assert r["total"] == want
    assert any("val_psnr" in r for r in rows)


def test_two_fresh_runs_identical(tmp_path):
    root = _disk_dataset(tmp_path / "data")
    totals = []
    for tag in ("a", "b"):
        cfg = _toy_cfg(dataset=root, out_dir=str(tmp_path / tag), steps=4)
        result = train(cfg)
        rows = [json.loads(l) for l in open(result.log_path)]
        totals.append([r["total"] for r in rows])
    assert totals[0] == totals[1]


def test_resume_matches_uninterrupted(tmp_path):
    root = _disk_dataset(tmp_path / "data")
    cfg_full = _toy_cfg(dataset=root, out_dir=str(tmp_path / "full"),
                        steps=10, checkpoint_every=100)
    full = train(cfg_full)
    full_rows = [json.loads(l) for l in open(full.log_path)]

    cfg_half = _toy_cfg(dataset=root, out_dir=str(tmp_path / "half"),
                        steps=5, checkpoint_every=5)
    half = train(cfg_half)
    cfg_rest = _toy_cfg(dataset=root, out_dir=str(tmp_path / "rest"),
                        steps=10, checkpoint_every=100)
    rest = train(cfg_rest, resume=half.checkpoint)
    rest_rows = [json.loads(l) for l in open(rest.log_path)]

    want = [r["total"] for r in full_rows[5:]]
    got = [r["total"] for r in rest_rows]
    assert len(got) == 5
    for a, b in zip(want, got):
        assert abs(a - b) <= 1e-9


def test_resume_rejects_architecture_change(tmp_path):
    root = _disk_dataset(tmp_path / "data")
    cfg = _toy_cfg(dataset=root, out_dir=str(tmp_path / "run"), steps=2,
                   checkpoint_every=2)
    result = train(cfg)
    bigger = _toy_cfg(dataset=root, out_dir=str(tmp_path / "run2"), steps=4,
                      channels=16)
    with pytest.raises(TrainError):
        train(bigger, resume=result.checkpoint)


def test_nan_loss_aborts_keeping_last_good(tmp_path):
    root = _disk_dataset(tmp_path / "data")
    cfg = _toy_cfg(dataset=root, out_dir=str(tmp_path / "run"), steps=2,
                   checkpoint_every=1)
    result = train(cfg)
    good = result.checkpoint
    good_bytes = open(good, "rb").read()

    arrays, extra = dc.load_checkpoint(good)
    name = next(k for k in arrays if k.startswith("param/featnet.conv1"))
    arrays[name] = np.full_like(arrays[name], np.nan)
    poisoned = str(tmp_path / "poisoned.bin")
    dc.save_checkpoint(poisoned, arrays, extra)

    cfg2 = _toy_cfg(dataset=root, out_dir=str(tmp_path / "run"), steps=6)
    res = train(cfg2, resume=poisoned)
    assert res.aborted
    assert "non-finite" in res.abort_reason
    assert res.steps_run == 0
    # the pre-existing good checkpoint was not clobbered
    assert open(good, "rb").read() == good_bytes
    rows = [json.loads(l) for l in open(res.log_path)]
    assert rows[-1].get("event") == "abort"


def test_ray_loss_plateau_without_ray_weight(tmp_path):
    """Paired short runs: the ray term only falls when it is supervised."""
    root = _disk_dataset(tmp_path / "data", n=1)
    histories = {}
    for tag, lam in (("on", 1.0), ("off", 0.0)):
        cfg = _toy_cfg(dataset=root, out_dir=str(tmp_path / tag), steps=40,
                       lambda_ray=lam, lr=3e-3)
        result = train(cfg)
        rows = [json.loads(l) for l in open(result.log_path)]
        histories[tag] = [r["ray"] for r in rows]
    on, off = histories["on"], histories["off"]
    assert on[-1] < 0.5 * on[0]          # supervised: clear decrease
    assert min(off) > 0.5 * off[0]       # unsupervised: stays on its plateau


def test_evaluate_psnr_finite(tmp_path):
    root = _disk_dataset(tmp_path / "data", n=1)
    from raysplat.training import _load_dataset
    scenes = _load_dataset(root)
    cfg = _toy_cfg(dataset=root)
    val = evaluate_psnr(Pipeline(cfg), scenes)
    assert np.isfinite(val) and 0 < val < 99


# -- end-to-end gradient check ----------------------------------------------

def test_end_to_end_gradients_match_fd():
    """Total-loss gradients vs central differences on 20 sampled parameters."""
    cfg = _toy_cfg()
    batch = _toy_batch(seed=17)
    pipe = Pipeline(cfg)
    lambdas = (cfg.lambda_mse, cfg.lambda_perc, cfg.lambda_ray)

    def loss_value():
        res = forward_pipeline(pipe, batch)
        gt = ray_targets(batch, 4, 4)
        _, rep = compute_loss(res.renders, batch.target_images, res.rays,
                              gt, lambdas)
        return rep.total

    tape = dc.Tape()
    with tape:
        res = forward_pipeline(pipe, batch)
        gt = ray_targets(batch, 4, 4)
        total, _ = compute_loss(res.renders, batch.target_images, res.rays,
                                gt, lambdas)
    grads = tape.backward(total, pipe.store)

    rng = np.random.default_rng(99)
    names = sorted(pipe.store.names())
    live = [n for n in names if np.abs(grads.get(n, 0)).max() > 1e-9]
    picks = [(n, None) for n in rng.choice(live, size=10, replace=False)]
    picks += [(n, None) for n in rng.choice(names, size=10, replace=False)]

    eps = 1e-5
    for name, _ in picks:
        t = pipe.store[name]
        idx = tuple(rng.integers(s) for s in t.data.shape)
        keep = t.data[idx]
        t.data[idx] = keep + eps
        up = loss_value()
        t.data[idx] = keep - eps
        down = loss_value()
        t.data[idx] = keep
        fd = (up - down) / (2 * eps)
        an = grads[name][idx] if name in grads else 0.0
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 3e-6, \
            f"{name}{idx}: fd {fd} vs analytic {an}"


def test_target_psnr_stops_training_early(tmp_path):
    _disk_dataset(tmp_path, n=1)
    cfg = _toy_cfg(dataset=str(tmp_path), out_dir=str(tmp_path / "run"),
                   steps=10, val_every=2, checkpoint_every=1000,
                   target_psnr=1.0)  # any finite render clears 1 dB
    res = train(cfg)
    assert not res.aborted
    assert res.steps_run == 2
    assert res.final_val_psnr is not None and res.final_val_psnr >= 1.0
    assert os.path.exists(res.checkpoint)
    events = [json.loads(l) for l in open(res.log_path)]
    assert any(e.get("event") == "target_reached" for e in events)


def test_best_checkpoint_tracks_peak_validation(tmp_path):
    _disk_dataset(tmp_path, n=1)
    cfg = _toy_cfg(dataset=str(tmp_path), out_dir=str(tmp_path / "run"),
                   steps=5, val_every=2, checkpoint_every=1000)
    res = train(cfg)
    assert res.best_checkpoint is not None
    assert os.path.exists(res.best_checkpoint)
    vals = [json.loads(l)["val_psnr"] for l in open(res.log_path)
            if "val_psnr" in json.loads(l)]
    assert res.best_val_psnr == max(vals)
    _, _, _, extra = load_pipeline_checkpoint(res.best_checkpoint)
    assert extra["val_psnr"] == res.best_val_psnr
