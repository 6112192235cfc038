"""Splatting renderer tests: projection oracle, compositing, gradients, IO."""

import numpy as np
import pytest

from raysplat import diffcore as dc
from raysplat.camera import Camera, so3_exp
from raysplat.gaussians import GaussianSet, load_gaussians, save_gaussians
from raysplat.imageio import read_ppm, write_ppm
from raysplat.raster import (
    RenderTarget, project_gaussian, render, render_backward, render_tensors,
)
from conftest import assert_grads_close


def front_camera(width=32, height=32, f=40.0):
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0,
                  np.eye(3), np.zeros(3), width, height)


def target_for(cam, bg=(0.2, 0.2, 0.2), tile=16):
    return RenderTarget(cam.width, cam.height, np.array(bg), tile)


def single_gaussian(mu, s=0.05, alpha=0.8, color=(0.9, 0.5, 0.2)):
    return GaussianSet(np.array([mu]), np.full((1, 3), s),
                       np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([alpha]),
                       np.array([color]))


def random_set(rng, n=8):
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianSet(
        np.stack([rng.uniform(-0.35, 0.35, n), rng.uniform(-0.35, 0.35, n),
                  rng.uniform(1.2, 2.6, n)], axis=-1),
        rng.uniform(0.03, 0.12, (n, 3)), quat,
        rng.uniform(0.2, 0.9, n), rng.uniform(0.1, 0.9, (n, 3)))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_on_axis_isotropic_projection_matches_pinhole():
    cam = front_camera(f=60.0)
    for z in (1.0, 2.0, 4.0):
        gs = single_gaussian([0.0, 0.0, z], s=0.05)
        uv, conic, depth = project_gaussian(gs, 0, cam)
        cov = np.linalg.inv(conic)
        pred = (60.0 * 0.05 / z) ** 2
        assert np.allclose(uv, [cam.cx, cam.cy], atol=1e-12)
        assert depth == z
        assert np.allclose(cov, pred * np.eye(2) + 0.3 * np.eye(2), atol=1e-9)


def test_behind_camera_gaussian_is_culled():
    cam = front_camera()
    assert project_gaussian(single_gaussian([0.0, 0.0, -1.0]), 0, cam) is None
    assert project_gaussian(single_gaussian([0.0, 0.0, 0.0]), 0, cam) is None


def test_doubling_depth_halves_projected_sigma():
    cam = front_camera(f=60.0)
    sig = []
    for z in (1.0, 2.0):
        _, conic, _ = project_gaussian(single_gaussian([0.0, 0.0, z], s=0.08),
                                       0, cam)
        cov = np.linalg.inv(conic) - 0.3 * np.eye(2)
        sig.append(np.sqrt(cov[0, 0]))
    assert abs(sig[0] / sig[1] - 2.0) < 1e-9


# ---------------------------------------------------------------------------
# Forward rendering
# ---------------------------------------------------------------------------

def test_empty_set_renders_background():
    cam = front_camera()
    empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                        np.zeros(0), np.zeros((0, 3)))
    img = render(empty, cam, target_for(cam, bg=(0.1, 0.4, 0.7)))
    assert np.all(img.color == np.array([0.1, 0.4, 0.7]))
    assert np.all(img.alpha == 0.0)
    assert np.all(img.depth == 0.0)


def test_single_gaussian_matches_analytic_profile():
    cam = front_camera(f=40.0)
    gs = single_gaussian([0.04, -0.03, 2.0], s=0.06, alpha=0.8)
    tgt = target_for(cam, bg=(0.1, 0.2, 0.3))
    img = render(gs, cam, tgt)
    uv, conic, _ = project_gaussian(gs, 0, cam)
    ys, xs = np.mgrid[0:32, 0:32]
    dx = xs - uv[0]
    dy = ys - uv[1]
    q = conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
    ap = 0.8 * np.exp(-0.5 * q)
    expect = ap[..., None] * gs.color[0] + (1 - ap[..., None]) * tgt.background
    assert np.abs(img.color - expect).max() < 1e-3
    assert np.abs(img.alpha - ap).max() < 1e-3


def test_opaque_front_gaussian_occludes_back():
    # integer principal point so pixel (15, 15) sits exactly on the splat
    # center, where the effective alpha saturates at the cap
    cam = Camera(40.0, 40.0, 15.0, 15.0, np.eye(3), np.zeros(3), 32, 32)
    front = [0.0, 0.0, 1.5]
    back = [0.0, 0.0, 2.5]
    both = GaussianSet(np.array([front, back]), np.full((2, 3), 0.08),
                       np.tile([1.0, 0, 0, 0], (2, 1)),
                       np.array([1 - 1e-8, 0.8]),
                       np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1]]))
    alone = single_gaussian(front, s=0.08, alpha=1 - 1e-8, color=(0.9, 0.1, 0.1))
    img_both = render(both, cam, target_for(cam, bg=(0.0, 0.0, 0.0)))
    img_alone = render(alone, cam, target_for(cam, bg=(0.0, 0.0, 0.0)))
    center = (15, 15)
    assert np.abs(img_both.color[center] - img_alone.color[center]).max() < 1e-6


def test_color_stays_in_unit_interval(rng):
    cam = front_camera()
    img = render(random_set(rng, 30), cam, target_for(cam, bg=(0.0, 0.5, 1.0)))
    assert img.color.min() >= 0.0 and img.color.max() <= 1.0
    assert img.alpha.min() >= 0.0 and img.alpha.max() <= 1.0


def test_background_where_nothing_splats():
    cam = front_camera()
    gs = single_gaussian([0.0, 0.0, 1.0], s=0.002, alpha=0.9)
    tgt = target_for(cam, bg=(0.25, 0.5, 0.75))
    img = render(gs, cam, tgt)
    corner = img.color[0, 0]
    assert np.array_equal(corner, tgt.background)
    assert img.alpha[0, 0] == 0.0


def test_compositing_conservation():
    rng = np.random.default_rng(5)
    cam = front_camera()
    render(random_set(rng, 40), cam, target_for(cam))
    cache = render._last_cache
    assert np.abs(cache["wsum"] + cache["trans"] - 1.0).max() <= 1e-12


def test_tile_size_invariance(rng):
    cam = front_camera()
    gs = random_set(rng, 25)
    img8 = render(gs, cam, target_for(cam, tile=8))
    img16 = render(gs, cam, target_for(cam, tile=16))
    assert np.array_equal(img8.color, img16.color)
    assert np.array_equal(img8.alpha, img16.alpha)
    assert np.array_equal(img8.depth, img16.depth)


def test_equal_depth_ties_break_by_index():
    cam = front_camera()
    mus = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]])
    gs = GaussianSet(mus, np.full((2, 3), 0.1), np.tile([1.0, 0, 0, 0], (2, 1)),
                     np.array([0.5, 0.5]),
                     np.array([[1 - 1e-9, 1e-9, 1e-9], [1e-9, 1 - 1e-9, 1e-9]]))
    img = render(gs, cam, RenderTarget(32, 32, np.zeros(3)))
    center = img.color[15, 15]
    uv, conic, _ = project_gaussian(gs, 0, cam)
    g = np.exp(-0.5 * conic[0, 0] * 2 * 0.25)  # pixel (15,15) is 0.5 px off center
    ap = 0.5 * g
    # index 0 composited first: c = c0 ap + c1 ap (1 - ap), per channel
    c0, c1 = gs.color
    assert abs(center[0] - (ap * c0[0] + ap * (1 - ap) * c1[0])) < 1e-12
    assert abs(center[1] - (ap * c0[1] + ap * (1 - ap) * c1[1])) < 1e-12


def test_rendering_is_deterministic(rng):
    cam = front_camera()
    gs = random_set(rng, 12)
    a = render(gs, cam, target_for(cam))
    b = render(gs, cam, target_for(cam))
    assert np.array_equal(a.color, b.color)


def test_expected_depth_of_single_gaussian():
    cam = front_camera()
    gs = single_gaussian([0.0, 0.0, 1.7], s=0.1, alpha=0.9)
    img = render(gs, cam, target_for(cam))
    hit = img.alpha > 0.1
    assert hit.any()
    assert np.allclose(img.depth[hit], 1.7, atol=1e-9)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def test_zero_upstream_gradient_gives_zero_grads(rng):
    cam = front_camera()
    render(random_set(rng, 6), cam, target_for(cam))
    grads = render_backward(np.zeros((32, 32, 3)))
    for g in grads.values():
        assert np.all(g == 0.0)


def test_culled_gaussian_gets_exactly_zero_gradient(rng):
    cam = front_camera()
    gs = random_set(rng, 4)
    mu = gs.mu.copy()
    mu[2] = [0.0, 0.0, -3.0]  # behind the camera
    gs = GaussianSet(mu, gs.scale, gs.quat, gs.alpha, gs.color)
    render(gs, cam, target_for(cam))
    grads = render_backward(np.ones((32, 32, 3)))
    for name in ("mu", "scale", "quat", "color"):
        assert np.all(grads[name][2] == 0.0)
    assert grads["alpha"][2] == 0.0
    assert np.any(grads["color"][0] != 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cam = Camera(40.0, 40.0, 15.5, 15.5, so3_exp([0.02, -0.03, 0.01]),
                 np.array([0.01, -0.02, 0.0]), 32, 32)
    tgt = target_for(cam)
    gs = random_set(rng, 8)
    w = rng.normal(size=(32, 32, 3))
    arrs = {"mu": gs.mu, "scale": gs.scale, "quat": gs.quat,
            "alpha": gs.alpha, "color": gs.color}

    def loss(**kw):
        img = render(GaussianSet(kw["mu"], kw["scale"], kw["quat"],
                                 kw["alpha"], kw["color"]), cam, tgt)
        return float((img.color * w).sum())

    loss(**arrs)
    grads = render_backward(w)
    h = 1e-5
    for name, arr in arrs.items():
        fd = np.zeros_like(arr)
        for i in range(arr.size):
            up = {k: v.copy() for k, v in arrs.items()}
            up[name].flat[i] += h
            down = {k: v.copy() for k, v in arrs.items()}
            down[name].flat[i] -= h
            fd.flat[i] = (loss(**up) - loss(**down)) / (2 * h)
        assert_grads_close(grads[name], fd, tol=1e-3, label=f"{name} seed {seed}")


def test_tape_rendering_matches_direct_backward(rng):
    cam = front_camera()
    tgt = target_for(cam)
    gs = random_set(rng, 5)
    w = rng.normal(size=(32, 32, 3))
    with dc.Tape() as tape:
        mu = dc.param(gs.mu, "mu")
        scale = dc.param(gs.scale, "scale")
        quat = dc.param(gs.quat, "quat")
        alpha = dc.param(gs.alpha, "alpha")
        color = dc.param(gs.color, "color")
        img_t, alpha_map, depth_map = render_tensors(mu, scale, quat, alpha,
                                                     color, cam, tgt)
        grads_tape = tape.backward((img_t * w).sum())
    img = render(gs, cam, tgt)
    assert np.array_equal(img_t.data, img.color)
    assert np.array_equal(alpha_map, img.alpha)
    grads = render_backward(w)
    for name in ("mu", "scale", "quat", "alpha", "color"):
        assert np.array_equal(grads_tape[name], grads[name])


# ---------------------------------------------------------------------------
# GaussianSet container and image IO
# ---------------------------------------------------------------------------

def test_gaussian_set_validation(rng):
    gs = random_set(rng, 4)
    gs.validate()
    bad = GaussianSet(gs.mu, gs.scale, gs.quat * 2.0, gs.alpha, gs.color)
    with pytest.raises(Exception):
        bad.validate()
    with pytest.raises(Exception):
        GaussianSet(gs.mu, gs.scale, gs.quat, gs.alpha * 0.0, gs.color).validate()


def test_gaussian_set_covariances_are_psd(rng):
    gs = random_set(rng, 50)
    covs = gs.covariances()
    assert np.allclose(covs, np.swapaxes(covs, -1, -2), atol=1e-12)
    evals = np.linalg.eigvalsh(covs)
    assert evals.min() > 0.0


def test_gaussian_table_round_trip(tmp_path, rng):
    gs = random_set(rng, 7)
    path = tmp_path / "set.gsb"
    save_gaussians(path, gs)
    back = load_gaussians(path)
    assert len(back) == 7
    for name in ("mu", "scale", "quat", "alpha", "color"):
        a = getattr(gs, name).astype(np.float32)
        b = getattr(back, name).astype(np.float32)
        assert np.array_equal(a, b)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((9, 13, 3))
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == (9, 13, 3)
    assert np.array_equal(np.round(img * 255), np.round(back * 255))


def test_ppm_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(Exception):
        read_ppm(path)
