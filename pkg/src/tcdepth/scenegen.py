"""Procedural RGB-D-label-flow sequence generation over analytic 3-D scenes.

A pinhole camera drives through a static world made of a ground plane, a sky
dome and a handful of box/sphere primitives. Because every surface is
analytic, depth is the exact ray-hit distance projected onto the optical
axis and optical flow is the exact reprojection displacement of each
visible surface point, making both usable as supervision targets without
any rendering noise.

Conventions: world +z forward, +y down, ground plane at y=0; camera axes
+x right, +y down, +z forward; poses are 4x4 float64 camera-to-world
matrices; the principal point sits at ((W-1)/2, (H-1)/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ioutil
from .ioutil import FormatError

SKY, GROUND = 0, 1
CLASS_NAMES = ("sky", "ground", "building", "car", "sphere", "pole", "vegetation", "misc")

SEQUENCE_FORMAT_VERSION = 1

_CAMERA_HEIGHT = 1.5
_CAMERA_PITCH = 0.175  # rad, looking down; keeps the sky under ~1/3 of the frame
_LIGHT = np.array([0.35, -0.85, 0.40])
_AMBIENT, _DIFFUSE = 0.35, 0.65


@dataclass
class SceneConfig:
    image_width: int = 192
    image_height: int = 64
    num_classes: int = 8
    sequence_length: int = 10
    num_objects: int = 8
    camera_speed: float = 0.5
    focal_length: float = 96.0
    seed: int = 0
    depth_range: tuple = (1.0, 50.0)
    brightness_jitter: float = 0.0

    def __post_init__(self):
        if self.image_width % 32 or self.image_height % 32:
            raise ValueError(
                f"image dims must be divisible by 32, got "
                f"{self.image_width}x{self.image_height}"
            )
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_classes > 255:
            raise ValueError("class indices must fit in a byte")
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be >= 2")
        if self.depth_range[0] <= 0 or self.depth_range[1] <= self.depth_range[0]:
            raise ValueError(f"bad depth_range {self.depth_range}")


@dataclass
class Frame:
    """One time step: aligned rasters plus the camera that produced them."""

    rgb: np.ndarray          # (H, W, 3) float32 in [0,1], quantized to the k/255 grid
    depth: np.ndarray        # (H, W) float32, meters
    labels: np.ndarray       # (H, W) uint8, class indices
    pose: np.ndarray         # (4, 4) float64 camera-to-world
    focal: float
    time_index: int
    flow_to_next: np.ndarray | None = None   # (H, W, 2) float32, pixels
    occ_to_next: np.ndarray | None = None    # (H, W) bool, True = not visible at t+1

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class Sequence:
    frames: list
    config: SceneConfig

    def __len__(self):
        return len(self.frames)

    def validate(self):
        if not self.frames:
            raise ValueError("empty sequence")
        h, w = self.frames[0].shape
        for i, fr in enumerate(self.frames):
            if fr.shape != (h, w):
                raise ValueError(f"frame {i}: shape {fr.shape} != {(h, w)}")
            if fr.focal != self.frames[0].focal:
                raise ValueError(f"frame {i}: focal length differs")
            if fr.labels.max(initial=0) >= self.config.num_classes:
                raise ValueError(f"frame {i}: label out of range")
            last = i == len(self.frames) - 1
            if not last and (fr.flow_to_next is None or fr.occ_to_next is None):
                raise ValueError(f"frame {i}: missing flow/occlusion to next frame")
        return self


# --------------------------------------------------------------------------
# scene construction

@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    cls: int
    albedo: np.ndarray


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int
    albedo: np.ndarray


_KINDS = ("building", "car", "sphere", "pole", "vegetation", "misc")


def _object_class(kind_index: int, num_classes: int) -> int:
    if num_classes <= 2:
        return GROUND
    return 2 + kind_index % (num_classes - 2)


def _build_scene(config: SceneConfig, rng: np.random.Generator) -> list:
    """Drop num_objects primitives beside the camera's forward corridor."""
    objects = []
    z_far = min(40.0, 0.8 * config.depth_range[1])
    for i in range(config.num_objects):
        kind = _KINDS[i % len(_KINDS)]
        cls = _object_class(i % len(_KINDS), config.num_classes)
        side = 1.0 if rng.random() < 0.5 else -1.0
        x = side * rng.uniform(2.5, 10.0)
        z = rng.uniform(5.0, z_far)
        albedo = rng.uniform(0.15, 0.9, size=3)
        if kind == "building":
            w, d, h = rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(3.0, 6.0)
            albedo = np.full(3, rng.uniform(0.35, 0.75)) + rng.uniform(-0.05, 0.05, 3)
            objects.append(_Box(np.array([x - w, -h, z - d]), np.array([x + w, 0.0, z + d]), cls, albedo))
        elif kind == "car":
            w, l, h = rng.uniform(0.8, 1.0), rng.uniform(1.5, 2.0), rng.uniform(1.2, 1.5)
            objects.append(_Box(np.array([x - w, -h, z - l]), np.array([x + w, 0.0, z + l]), cls, albedo))
        elif kind == "sphere":
            r = rng.uniform(0.5, 1.2)
            objects.append(_Sphere(np.array([x, -r, z]), r, cls, albedo))
        elif kind == "pole":
            w, h = rng.uniform(0.08, 0.2), rng.uniform(3.0, 5.0)
            objects.append(_Box(np.array([x - w, -h, z - w]), np.array([x + w, 0.0, z + w]), cls, albedo))
        elif kind == "vegetation":
            r = rng.uniform(0.8, 1.8)
            y = -(r + rng.uniform(0.2, 1.5))
            albedo = np.array([rng.uniform(0.1, 0.3), rng.uniform(0.4, 0.8), rng.uniform(0.1, 0.3)])
            objects.append(_Sphere(np.array([x, y, z]), r, cls, albedo))
        else:
            s = rng.uniform(0.5, 1.5)
            objects.append(_Box(np.array([x - s, -2 * s, z - s]), np.array([x + s, 0.0, z + s]), cls, albedo))
    return objects


def _camera_pose(config: SceneConfig, rng_phases: tuple, n: int) -> np.ndarray:
    """Smooth forward drive with speed-scaled lateral sway and yaw."""
    s = config.camera_speed
    ph_x, ph_yaw = rng_phases
    x = 0.6 * s * math.sin(2.0 * math.pi * n / 16.0 + ph_x)
    pos = np.array([x, -_CAMERA_HEIGHT, s * n])
    yaw = 0.10 * min(s, 1.0) * math.sin(2.0 * math.pi * n / 24.0 + ph_yaw)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(_CAMERA_PITCH), math.sin(_CAMERA_PITCH)
    # camera-to-world = yaw about y, then pitch; +y is down, so the forward
    # axis maps to (0, sin p, cos p) to look below the horizon
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    pose = np.eye(4)
    pose[:3, :3] = r_yaw @ r_pitch
    pose[:3, 3] = pos
    return pose


# --------------------------------------------------------------------------
# ray casting

def _ray_grid(config: SceneConfig):
    h, w = config.image_height, config.image_width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    # z component 1 so the ray parameter equals depth along the optical axis
    d = np.stack([(u - cx) / config.focal_length, (v - cy) / config.focal_length, np.ones_like(u)], axis=-1)
    return d


def _intersect_sphere(o, d, sph: _Sphere):
    oc = o - sph.center
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(d * oc, axis=-1)
    c = float(oc @ oc - sph.radius**2)
    disc = b * b - 4.0 * a * c
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2.0 * a)
    t = np.where(hit & (t > 1e-6), t, np.inf)
    t_safe = np.where(np.isfinite(t), t, 0.0)
    normal = (o + d * t_safe[..., None] - sph.center) / sph.radius
    return t, normal


def _intersect_box(o, d, box: _Box):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (box.lo - o) * inv
        t_hi = (box.hi - o) * inv
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    axis = np.argmax(t_near, axis=-1)
    t_in = np.max(t_near, axis=-1)
    t_out = np.min(t_far, axis=-1)
    hit = (t_out >= t_in) & (t_in > 1e-6)
    t = np.where(hit, t_in, np.inf)
    # entering face normal: hit axis, opposing the ray direction
    normal = np.zeros(d.shape)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
    return t, normal


def _shade(albedo, normal):
    light = _LIGHT / np.linalg.norm(_LIGHT)
    lam = np.clip(-(normal @ light), 0.0, None)
    return albedo * (_AMBIENT + _DIFFUSE * lam)[..., None]


def _render_frame(config: SceneConfig, objects, pose, dirs_cam, jitter: float):
    h, w = config.image_height, config.image_width
    min_d, max_d = config.depth_range
    o = pose[:3, 3]
    d = dirs_cam @ pose[:3, :3].T

    depth = np.full((h, w), np.inf)
    labels = np.full((h, w), SKY, dtype=np.uint8)
    rgb = np.zeros((h, w, 3))

    # ground plane y = 0, truncated where it would exceed the depth cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(d[..., 1] > 1e-9, -o[1] / d[..., 1], np.inf)
    t_ground = np.where(t_ground > max_d, np.inf, t_ground)
    hit_pts = o + d * np.where(np.isfinite(t_ground), t_ground, 0.0)[..., None]
    checker = ((np.floor(hit_pts[..., 0] / 2.0) + np.floor(hit_pts[..., 2] / 2.0)) % 2.0)
    ground_albedo = np.where(checker[..., None] > 0.5, [0.45, 0.42, 0.38], [0.30, 0.32, 0.30])
    ground_rgb = _shade(ground_albedo, np.broadcast_to([0.0, -1.0, 0.0], d.shape))
    closer = t_ground < depth
    depth[closer] = t_ground[closer]
    labels[closer] = GROUND
    rgb[closer] = ground_rgb[closer]

    for obj in objects:
        if isinstance(obj, _Sphere):
            t, normal = _intersect_sphere(o, d, obj)
        else:
            t, normal = _intersect_box(o, d, obj)
        t = np.where(t > max_d, np.inf, t)
        closer = t < depth
        if not closer.any():
            continue
        shaded = _shade(obj.albedo, normal)
        depth[closer] = t[closer]
        labels[closer] = obj.cls
        rgb[closer] = shaded[closer]

    sky = ~np.isfinite(depth)
    depth[sky] = max_d
    up = -d[..., 1] / np.linalg.norm(d, axis=-1)   # world up-ness of each ray
    sky_col = (
        np.array([0.55, 0.68, 0.85])[None, None] * np.clip(up, 0.0, 1.0)[..., None]
        + np.array([0.78, 0.80, 0.84])[None, None] * (1.0 - np.clip(up, 0.0, 1.0))[..., None]
    )
    rgb[sky] = sky_col[sky]
    labels[sky] = SKY

    rgb = np.clip(rgb * (1.0 + jitter), 0.0, 1.0)
    rgb = (np.rint(rgb * 255.0) / 255.0).astype(np.float32)
    depth = np.clip(depth, min_d, max_d).astype(np.float32)
    return rgb, depth, labels


# --------------------------------------------------------------------------
# ground-truth flow

def _bilinear_sample(raster: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample raster at float coords with border clamping."""
    h, w = raster.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    if raster.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    v00 = raster[y0, x0]
    v01 = raster[y0, x1]
    v10 = raster[y1, x0]
    v11 = raster[y1, x1]
    return (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )


def _reprojection_flow(depth_a, pose_a, pose_b, focal, depth_b):
    """Exact displacement of a's surface points into b's image, plus occlusion.

    A point is occluded when it reprojects outside b's image, behind the
    camera, or behind b's visible surface.
    """
    h, w = depth_a.shape
    if np.array_equal(pose_a, pose_b):
        return np.zeros((h, w, 2), dtype=np.float32), np.zeros((h, w), dtype=bool)

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    z = depth_a.astype(np.float64)
    pts_cam = np.stack([(u - cx) / focal * z, (v - cy) / focal * z, z], axis=-1)
    pts_world = pts_cam @ pose_a[:3, :3].T + pose_a[:3, 3]
    pts_b = (pts_world - pose_b[:3, 3]) @ pose_b[:3, :3]

    zb = pts_b[..., 2]
    behind = zb <= 1e-6
    zb_safe = np.where(behind, 1.0, zb)
    ub = focal * pts_b[..., 0] / zb_safe + cx
    vb = focal * pts_b[..., 1] / zb_safe + cy

    flow = np.stack([ub - u, vb - v], axis=-1).astype(np.float32)
    out = (ub < 0) | (ub > w - 1) | (vb < 0) | (vb > h - 1)
    seen = _bilinear_sample(depth_b.astype(np.float64), ub, vb)
    hidden = zb > seen + np.maximum(0.1, 0.02 * zb)
    occ = behind | out | hidden
    flow[behind] = 0.0
    return flow, occ


def ground_truth_flow(frame_a: Frame, frame_b: Frame):
    """Flow raster mapping a's visible points into b, with an occlusion mask.

    Frames must be consecutive (either direction) and share intrinsics.
    """
    if abs(frame_a.time_index - frame_b.time_index) != 1:
        raise ValueError(
            f"frames {frame_a.time_index} and {frame_b.time_index} are not consecutive"
        )
    if frame_a.shape != frame_b.shape or frame_a.focal != frame_b.focal:
        raise ValueError("frames do not share camera geometry")
    return _reprojection_flow(
        frame_a.depth, frame_a.pose, frame_b.pose, frame_a.focal, frame_b.depth
    )


# --------------------------------------------------------------------------
# generation entry point

def generate_sequence(config: SceneConfig) -> Sequence:
    """Render a deterministic sequence; equal seeds give bit-equal output."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    objects = _build_scene(config, rng)
    phases = (rng.uniform(0.0, 2.0 * math.pi), rng.uniform(0.0, 2.0 * math.pi))
    jitters = rng.uniform(-config.brightness_jitter, config.brightness_jitter,
                          size=config.sequence_length)
    dirs_cam = _ray_grid(config)

    frames = []
    for n in range(config.sequence_length):
        pose = _camera_pose(config, phases, n)
        rgb, depth, labels = _render_frame(config, objects, pose, dirs_cam, jitters[n])
        frames.append(Frame(rgb, depth, labels, pose, config.focal_length, n))

    for a, b in zip(frames[:-1], frames[1:]):
        a.flow_to_next, a.occ_to_next = ground_truth_flow(a, b)

    return Sequence(frames, config).validate()


# --------------------------------------------------------------------------
# on-disk layout

def _frame_paths(directory: Path, n: int) -> dict:
    stem = directory / f"frame_{n:04d}"
    return {
        "rgb": stem.with_suffix(".rgb.png"),
        "depth": stem.with_suffix(".depth.f32"),
        "labels": stem.with_suffix(".labels.png"),
        "flow": stem.with_suffix(".flow.f32"),
        "occ": stem.with_suffix(".occ.png"),
    }


def write_sequence(seq: Sequence, directory) -> None:
    """Write manifest plus per-frame rasters; the round trip is bit exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = seq.config
    manifest = {
        "version": SEQUENCE_FORMAT_VERSION,
        "width": cfg.image_width,
        "height": cfg.image_height,
        "K": cfg.num_classes,
        "frames": len(seq.frames),
        "focal_length": cfg.focal_length,
        "seed": cfg.seed,
        "depth_min": cfg.depth_range[0],
        "depth_max": cfg.depth_range[1],
        "camera_speed": cfg.camera_speed,
        "num_objects": cfg.num_objects,
    }
    for n, fr in enumerate(seq.frames):
        manifest[f"pose_{n:04d}"] = " ".join(f"{x:.17g}" for x in fr.pose.ravel())
    ioutil.write_kv(directory / "manifest.txt", manifest)

    for n, fr in enumerate(seq.frames):
        paths = _frame_paths(directory, n)
        ioutil.write_rgb_png(paths["rgb"], fr.rgb)
        ioutil.write_f32_raster(paths["depth"], ioutil.DEPTH_MAGIC, fr.depth)
        ioutil.write_gray_png(paths["labels"], fr.labels)
        if fr.flow_to_next is not None:
            ioutil.write_f32_raster(paths["flow"], ioutil.FLOW_MAGIC, fr.flow_to_next)
            ioutil.write_gray_png(paths["occ"], fr.occ_to_next)


def read_sequence(directory) -> Sequence:
    directory = Path(directory)
    manifest = ioutil.read_kv(directory / "manifest.txt")
    try:
        version = int(manifest["version"])
        width = int(manifest["width"])
        height = int(manifest["height"])
        num_classes = int(manifest["K"])
        n_frames = int(manifest["frames"])
        focal = float(manifest["focal_length"])
        seed = int(manifest["seed"])
    except KeyError as missing:
        raise FormatError(f"{directory}: manifest missing key {missing}") from None
    if version != SEQUENCE_FORMAT_VERSION:
        raise FormatError(f"{directory}: unknown format version {version}")
    if num_classes < 2:
        raise FormatError(f"{directory}: manifest K={num_classes} is invalid")
    if n_frames < 1:
        raise FormatError(f"{directory}: manifest frame count {n_frames} is invalid")

    config = SceneConfig(
        image_width=width,
        image_height=height,
        num_classes=num_classes,
        sequence_length=max(n_frames, 2),
        focal_length=focal,
        seed=seed,
        num_objects=int(manifest.get("num_objects", 8)),
        camera_speed=float(manifest.get("camera_speed", 0.5)),
        depth_range=(
            float(manifest.get("depth_min", 1.0)),
            float(manifest.get("depth_max", 50.0)),
        ),
    )

    frames = []
    for n in range(n_frames):
        paths = _frame_paths(directory, n)
        try:
            rgb = ioutil.read_rgb_png(paths["rgb"])
            depth = ioutil.read_f32_raster(paths["depth"], ioutil.DEPTH_MAGIC)
            labels = ioutil.read_gray_png(paths["labels"])
        except FileNotFoundError as err:
            raise FormatError(f"{directory}: frame {n}: missing file {err.filename}") from None
        if depth.shape != (height, width) or labels.shape != (height, width):
            raise FormatError(f"{directory}: frame {n}: raster dims do not match manifest")
        if labels.max(initial=0) >= num_classes:
            raise FormatError(f"{directory}: frame {n}: label >= K")

        pose_key = f"pose_{n:04d}"
        if pose_key in manifest:
            pose = np.array([float(x) for x in manifest[pose_key].split()]).reshape(4, 4)
        else:
            pose = np.eye(4)

        frame = Frame(rgb, depth, labels, pose, focal, n)
        if n < n_frames - 1:
            try:
                frame.flow_to_next = ioutil.read_f32_raster(paths["flow"], ioutil.FLOW_MAGIC)
                occ = ioutil.read_gray_png(paths["occ"])
            except FileNotFoundError as err:
                raise FormatError(f"{directory}: frame {n}: missing file {err.filename}") from None
            if frame.flow_to_next.shape[:2] != (height, width):
                raise FormatError(f"{directory}: frame {n}: flow dims do not match manifest")
            frame.occ_to_next = occ > 127
        frames.append(frame)

    return Sequence(frames, config).validate()


def sequence_dirs(root) -> list:
    """All sequence directories under root (any dir holding a manifest)."""
    root = Path(root)
    if (root / "manifest.txt").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/manifest.txt"))
