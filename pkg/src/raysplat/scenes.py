"""Synthetic desk-scale scene generation and dataset file IO.

A scene directory holds ``images/NNN.ppm``, ``depth/NNN.f32`` (z-depth in
the view's own camera frame), ``cameras.txt``, and ``meta.txt``. Context
images come first; image 0 is the canonical view.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, GeometryError
from .imageio import read_image, write_ppm

__all__ = [
    "SyntheticSceneSpec", "SceneBatch", "DatasetIndex", "SceneError",
    "generate_scene", "load_scene", "write_cameras", "read_cameras",
    "write_depth", "read_depth", "trace_scene",
]

_CONVENTION = "world-to-camera, right-handed, +z forward"


class SceneError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int
    kind: str = "plane"            # plane | box | spheres
    texture: str = "checker"       # checker | noise
    texture_freq: float = 6.0
    n_context: int = 2
    n_target: int = 1
    rig: str = "forward"           # forward | arc
    baseline: float = 0.08
    rig_distance: float = 0.65
    jitter: float = 0.01
    near: float = 0.3
    far: float = 3.0
    width: int = 64
    height: int = 64
    focal: float = 60.0

    def __post_init__(self):
        if self.baseline <= 0:
            raise SceneError("baseline must be positive")
        if not (0 < self.near < self.far):
            raise SceneError("need 0 < near < far")
        if self.kind not in ("plane", "box", "spheres"):
            raise SceneError(f"unknown geometry kind {self.kind!r}")
        if self.texture not in ("checker", "noise"):
            raise SceneError(f"unknown texture {self.texture!r}")
        if self.rig not in ("forward", "arc"):
            raise SceneError(f"unknown rig {self.rig!r}")
        if self.n_context < 2:
            raise SceneError("need at least 2 context views")


@dataclass(frozen=True)
class SceneBatch:
    """Loaded scene: context views for fusion, target views for supervision."""

    images: list            # float64 (H, W, 3) in [0, 1]
    cameras: list           # Camera per image
    n_context: int
    n_target: int
    near: float
    far: float
    scene_id: str
    depths: list = field(default_factory=list)  # optional GT z-depth maps

    def __post_init__(self):
        if self.n_context < 2:
            raise SceneError("scene batch needs M >= 2 context views")
        if len(self.images) != self.n_context + self.n_target:
            raise SceneError("image count does not match context+target split")
        if len(self.cameras) != len(self.images):
            raise SceneError("camera count does not match image count")
        shape = self.images[0].shape
        for i, img in enumerate(self.images):
            if img.shape != shape:
                raise SceneError(
                    f"image {i} has shape {img.shape}, expected {shape}")

    @property
    def context_images(self):
        return self.images[:self.n_context]

    @property
    def context_cameras(self):
        return self.cameras[:self.n_context]

    @property
    def target_images(self):
        return self.images[self.n_context:]

    @property
    def target_cameras(self):
        return self.cameras[self.n_context:]

    @property
    def canonical_camera(self) -> Camera:
        return self.cameras[0]


# ---------------------------------------------------------------------------
# Procedural geometry and textures
# ---------------------------------------------------------------------------

def _texture_fn(spec: SyntheticSceneSpec, rng: np.random.Generator):
    freq = spec.texture_freq
    if spec.texture == "checker":
        pal = rng.uniform(0.15, 0.95, size=(2, 3))

        def tex(p):
            parity = np.floor(p * freq).sum(axis=-1).astype(np.int64) & 1
            return pal[parity]

        return tex
    # smooth value noise from a fixed sin mixture
    amps = rng.uniform(0.3, 1.0, size=6)
    freqs = rng.uniform(0.4, 1.4, size=(6, 3)) * freq
    phases = rng.uniform(0.0, 2 * np.pi, size=6)
    pal = rng.uniform(0.1, 0.95, size=(2, 3))

    def tex(p):
        t = np.zeros(p.shape[:-1])
        for a, f, ph in zip(amps, freqs, phases):
            t += a * np.sin(2 * np.pi * (p @ f) + ph)
        t = 0.5 + 0.5 * np.tanh(t)
        return pal[0] * (1.0 - t[..., None]) + pal[1] * t[..., None]

    return tex


def _scene_geometry(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Returns intersect(origins, dirs) -> (t, points) with t = camera z-depth."""
    if spec.kind == "plane":
        z_star = rng.uniform(0.5, 0.8)

        def intersect(c, d):
            t = (z_star - c[2]) / d[..., 2]
            return t, c + t[..., None] * d

        return intersect

    half = np.array([1.1, 0.95, 1.3])

    def box_exit(c, d):
        # exit distance through the inside of the axis-aligned shell
        t_best = np.full(d.shape[:-1], np.inf)
        for axis in range(3):
            for sign in (-1.0, 1.0):
                da = d[..., axis]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (sign * half[axis] - c[axis]) / da
                p = c + t[..., None] * d
                others = [a for a in range(3) if a != axis]
                ok = (t > 1e-6) & np.isfinite(t)
                for o in others:
                    ok &= np.abs(p[..., o]) <= half[o] + 1e-9
                t_best = np.where(ok & (t < t_best), t, t_best)
        return t_best

    if spec.kind == "box":

        def intersect(c, d):
            t = box_exit(c, d)
            return t, c + t[..., None] * d

        return intersect

    # sphere cluster floating inside the same shell
    centers = rng.uniform(-0.25, 0.25, size=(6, 3))
    centers[:, 2] = rng.uniform(0.0, 0.4, size=6)
    radii = rng.uniform(0.08, 0.16, size=6)

    def intersect(c, d):
        t_best = box_exit(c, d)
        for sc, r in zip(centers, radii):
            oc = c - sc
            aa = np.sum(d * d, axis=-1)
            bb = 2.0 * (d @ oc)
            cc = oc @ oc - r * r
            disc = bb * bb - 4 * aa * cc
            ok = disc > 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = (-bb - sq) / (2 * aa)
            hit = ok & (t > 1e-6) & (t < t_best)
            t_best = np.where(hit, t, t_best)
        return t_best, c + t_best[..., None] * d

    return intersect


def _look_at(center, target, up_hint=np.array([0.0, 1.0, 0.0])):
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(up_hint, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return r, -r @ center


def _rig_cameras(spec: SyntheticSceneSpec, rng: np.random.Generator):
    n = spec.n_context + spec.n_target
    cams = []
    if spec.rig == "forward":
        # line of cameras facing +z from z = -rig_distance
        for i in range(n):
            x = (i - (n - 1) / 2.0) * spec.baseline
            c = np.array([x, 0.0, -spec.rig_distance * 0.95])
            target = np.array([0.0, 0.0, 0.6]) + spec.jitter * rng.standard_normal(3)
            r, t = _look_at(c, target)
            cams.append(Camera(spec.focal, spec.focal,
                               (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                               r, t, spec.width, spec.height))
    else:
        # inward-facing arc; equal chord length = baseline
        radius = spec.rig_distance
        step = 2.0 * np.arcsin(min(spec.baseline / (2.0 * radius), 0.99))
        start = -step * (n - 1) / 2.0
        for i in range(n):
            ang = start + i * step
            c = radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
            target = spec.jitter * rng.standard_normal(3)
            r, t = _look_at(c, target)
            cams.append(Camera(spec.focal, spec.focal,
                               (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                               r, t, spec.width, spec.height))
    return cams


def trace_scene(spec: SyntheticSceneSpec, cam: Camera, intersect, tex):
    """Analytic render: (H, W, 3) color in [0,1] and (H, W) z-depth."""
    xs = np.arange(cam.width, dtype=np.float64)
    ys = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(xs, ys)
    # unit-z camera directions: parameter t along them is camera z-depth
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                      np.ones_like(uu)], axis=-1)
    d_world = d_cam @ cam.R
    c = cam.center
    t, points = intersect(c, d_world)
    if not np.all(np.isfinite(t)):
        raise SceneError("a ray missed the scene geometry")
    if t.min() <= spec.near or t.max() >= spec.far:
        raise SceneError(
            f"scene depths [{t.min():.3f}, {t.max():.3f}] violate "
            f"near/far ({spec.near}, {spec.far})")
    color = np.clip(tex(points), 0.0, 1.0)
    return color, t


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _atomic_bytes(path, blob: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def write_depth(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype="<f4")
    header = f"f32_depth {depth.shape[1]} {depth.shape[0]}\n".encode()
    _atomic_bytes(path, header + depth.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.index(b"\n")
    fields = blob[:nl].split()
    if fields[0] != b"f32_depth":
        raise SceneError(f"{path}: not a depth file")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(blob, dtype="<f4", count=w * h, offset=nl + 1)
    return data.reshape(h, w).astype(np.float64)


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def write_cameras(path, names, cameras):
    lines = [f"cameras 1", f"convention {_CONVENTION}", f"count {len(cameras)}"]
    for name, cam in zip(names, cameras):
        lines.append(f"image {name}")
        lines.append("intrinsics " + " ".join(
            _fmt(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy)))
        lines.append(f"size {cam.width} {cam.height}")
        lines.append("rotation " + " ".join(_fmt(v) for v in cam.R.reshape(-1)))
        lines.append("translation " + " ".join(_fmt(v) for v in cam.T))
    _atomic_bytes(path, ("\n".join(lines) + "\n").encode())


def read_cameras(path):
    """Parse a cameras file; SceneError messages carry the line number."""
    def fail(lineno, msg):
        raise SceneError(f"{path}:{lineno}: {msg}")

    try:
        with open(path, "r") as f:
            raw = f.read().splitlines()
    except FileNotFoundError:
        raise SceneError(f"missing cameras file: {path}") from None
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if not lines or lines[0][1].split() != ["cameras", "1"]:
        fail(1, "expected header 'cameras 1'")
    idx = 1
    if not lines[idx][1].startswith("convention "):
        fail(lines[idx][0], "expected convention line")
    idx += 1
    head = lines[idx][1].split()
    if head[0] != "count":
        fail(lines[idx][0], "expected count line")
    count = int(head[1])
    idx += 1
    names, cams = [], []
    for _ in range(count):
        fields = {}
        if idx >= len(lines):
            fail(len(raw), "unexpected end of file")
        for key, n_tok in (("image", 1), ("intrinsics", 4), ("size", 2),
                           ("rotation", 9), ("translation", 3)):
            if idx >= len(lines):
                fail(len(raw), f"missing {key} line")
            lineno, ln = lines[idx]
            toks = ln.split()
            if toks[0] != key or len(toks) != n_tok + 1:
                fail(lineno, f"expected '{key}' with {n_tok} values, got {ln!r}")
            fields[key] = toks[1:]
            fields[f"{key}@"] = lineno
            idx += 1
        try:
            fx, fy, cx, cy = (float(v) for v in fields["intrinsics"])
            w, h = (int(v) for v in fields["size"])
            r = np.array([float(v) for v in fields["rotation"]]).reshape(3, 3)
            t = np.array([float(v) for v in fields["translation"]])
            cams.append(Camera(fx, fy, cx, cy, r, t, w, h))
        except (ValueError, GeometryError) as exc:
            fail(fields["image@"], f"bad camera block: {exc}")
        names.append(fields["image"][0])
    return names, cams


# ---------------------------------------------------------------------------
# Scene generation / loading
# ---------------------------------------------------------------------------

def generate_scene(spec: SyntheticSceneSpec, out_dir) -> str:
    """Write one synthetic scene; deterministic per spec. Returns out_dir."""
    rng = np.random.default_rng(spec.seed)
    tex = _texture_fn(spec, rng)
    intersect = _scene_geometry(spec, rng)
    cams = _rig_cameras(spec, rng)

    # contexts take evenly spread rig slots (endpoints included), targets the rest
    n = len(cams)
    ctx_slots = sorted(set(np.round(np.linspace(0, n - 1, spec.n_context))
                           .astype(int)))
    if len(ctx_slots) != spec.n_context:
        raise SceneError("rig too small for the requested context count")
    tgt_slots = [i for i in range(n) if i not in ctx_slots]
    ordering = ctx_slots + tgt_slots

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    names = []
    ordered_cams = []
    for new_i, slot in enumerate(ordering):
        cam = cams[slot]
        color, depth = trace_scene(spec, cam, intersect, tex)
        name = f"{new_i:03d}.ppm"
        tmp = os.path.join(out_dir, "images", f".{name}.tmp")
        write_ppm(tmp, color)
        os.replace(tmp, os.path.join(out_dir, "images", name))
        write_depth(os.path.join(out_dir, "depth", f"{new_i:03d}.f32"), depth)
        names.append(name)
        ordered_cams.append(cam)
    write_cameras(os.path.join(out_dir, "cameras.txt"), names, ordered_cams)
    meta = (f"scene 1\nseed {spec.seed}\nkind {spec.kind}\n"
            f"near {_fmt(spec.near)}\nfar {_fmt(spec.far)}\n"
            f"context {spec.n_context}\ntarget {spec.n_target}\n"
            f"resolution {spec.width} {spec.height}\n")
    _atomic_bytes(os.path.join(out_dir, "meta.txt"), meta.encode())
    return out_dir


def load_scene(scene_dir, with_depth=True) -> SceneBatch:
    meta_path = os.path.join(scene_dir, "meta.txt")
    if not os.path.exists(meta_path):
        raise SceneError(f"missing meta file: {meta_path}")
    meta = {}
    for ln in open(meta_path):
        toks = ln.split()
        if toks:
            meta[toks[0]] = toks[1:]
    names, cams = read_cameras(os.path.join(scene_dir, "cameras.txt"))
    images = []
    for name in names:
        path = os.path.join(scene_dir, "images", name)
        if not os.path.exists(path):
            raise SceneError(f"missing image: {path}")
        images.append(read_image(path))
    depths = []
    if with_depth:
        for i in range(len(names)):
            dpath = os.path.join(scene_dir, "depth", f"{i:03d}.f32")
            if os.path.exists(dpath):
                depths.append(read_depth(dpath))
    return SceneBatch(
        images=images, cameras=cams,
        n_context=int(meta["context"][0]), n_target=int(meta["target"][0]),
        near=float(meta["near"][0]), far=float(meta["far"][0]),
        scene_id=os.path.basename(os.path.normpath(scene_dir)),
        depths=depths)


@dataclass(frozen=True)
class DatasetIndex:
    """Root directory holding one subdirectory per scene."""

    root: str
    scene_dirs: tuple

    @staticmethod
    def scan(root) -> "DatasetIndex":
        if not os.path.isdir(root):
            raise SceneError(f"dataset root is not a directory: {root}")
        dirs = sorted(
            os.path.join(root, d) for d in os.listdir(root)
            if os.path.isdir(os.path.join(root, d))
            and os.path.exists(os.path.join(root, d, "cameras.txt")))
        if not dirs:
            raise SceneError(f"no scenes found under {root}")
        return DatasetIndex(root, tuple(dirs))

    def __len__(self):
        return len(self.scene_dirs)

    def load(self, i: int, with_depth=True) -> SceneBatch:
        return load_scene(self.scene_dirs[i], with_depth=with_depth)

    def validate(self):
        for i in range(len(self.scene_dirs)):
            self.load(i)
        return self
