"""Command-line interface: exit codes, artifacts, full small workflow."""

import os
import shutil
import subprocess

import numpy as np
import pytest

import raysplat.diffcore as dc
from raysplat.cli import main
from raysplat.scenes import load_scene
from raysplat.training import (Pipeline, TrainConfig,
                               save_pipeline_checkpoint)


def _toy_config(dataset, out_dir, **kw):
    base = dict(dataset=str(dataset), out_dir=str(out_dir), width=16,
                height=16, depth_count=4, k=1, channels=8, heads=2,
                d_model=16, hidden=16, steps=2, val_every=1,
                checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def _synth(out, n=1, size=16, seed=3):
    rc = main(["synth", "--out", str(out), "--seed", str(seed),
               "--scenes", str(n), "--width", str(size), "--height",
               str(size), "--focal", str(size - 1)])
    assert rc == 0
    return os.path.join(str(out), "scene000")


def test_synth_writes_loadable_scene(tmp_path):
    scene = _synth(tmp_path / "d", n=2)
    batch = load_scene(scene)
    assert batch.images[0].shape == (16, 16, 3)
    assert os.path.isdir(str(tmp_path / "d" / "scene001"))


def test_missing_required_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--seed", "1"])
    assert e.value.code == 2


def test_render_without_checkpoint_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["render", "--scene", str(tmp_path), "--out", str(tmp_path)])
    assert e.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["polish"])
    assert e.value.code == 2


def test_runtime_failure_exits_one(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "nope.bin"),
               "--dataset", str(tmp_path)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_train_needs_dataset(capsys):
    rc = main(["train", "--steps", "1"])
    assert rc == 1
    assert "dataset" in capsys.readouterr().err


def test_full_workflow_synth_train_eval_render(tmp_path, capsys):
    data = tmp_path / "data"
    scene = _synth(data, n=2)
    cfg = _toy_config(data, tmp_path / "run")
    cfg_path = str(tmp_path / "config.json")
    cfg.save(cfg_path)

    rc = main(["train", "--config", cfg_path])
    assert rc == 0
    out = capsys.readouterr().out
    assert "ran 2 steps" in out
    assert "validation psnr" in out
    ckpt = os.path.join(str(tmp_path / "run"), "ckpt_latest.bin")
    assert os.path.exists(ckpt)

    rc = main(["eval", "--checkpoint", ckpt, "--dataset", str(data)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mean: psnr" in out

    rdir = tmp_path / "render"
    rc = main(["render", "--checkpoint", ckpt, "--scene", scene,
               "--out", str(rdir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "rotation error" in out
    assert os.path.exists(str(rdir / "target000.ppm"))
    assert os.path.exists(str(rdir / "gaussians.bin"))


def test_train_flag_overrides_config(tmp_path, capsys):
    data = tmp_path / "data"
    _synth(data)
    cfg = _toy_config(data, tmp_path / "run", steps=50)
    cfg_path = str(tmp_path / "config.json")
    cfg.save(cfg_path)
    rc = main(["train", "--config", cfg_path, "--steps", "1"])
    assert rc == 0
    assert "ran 1 steps" in capsys.readouterr().out


def test_noise_bench_cli(tmp_path, capsys):
    cfg = _toy_config(tmp_path, tmp_path, width=32, height=32)
    pipe = Pipeline(cfg)
    opt = dc.Adam(pipe.store, lr=cfg.lr)
    ck = str(tmp_path / "ck.bin")
    save_pipeline_checkpoint(ck, pipe, opt, 0, np.random.default_rng(0))
    out = tmp_path / "bench"
    rc = main(["noise-bench", "--checkpoint", ck, "--out", str(out),
               "--episodes", "1", "--sigmas", "0.0,0.05", "--seed", "1"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "psnr drop transform" in text
    assert os.path.exists(str(out / "bench.csv"))


def test_console_script_installed():
    exe = shutil.which("raysplat")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for word in ("synth", "train", "render", "eval", "noise-bench"):
        assert word in proc.stdout
