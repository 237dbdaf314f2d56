"""Procedural ground-truth scenes, camera trajectories and dataset generation.

Scenes are built from signed distance functions (positive in free space);
node logits are ``clip(-sharpness * sdf, -cap, cap)`` and node colors come
from a smooth random texture, so surfaces render as soft, well-textured
walls and objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, DepthImage, EventImage, Pose, RgbImage, quat_from_matrix
from .event_sim import EventSimParams, simulate_sequence
from .renderer import RenderConfig, VoxelScene, render

DEFAULT_SHARPNESS = 50.0  # logit units per meter
DEFAULT_CAP = 30.0


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One timestep. ``rgb``/``depth`` are None when withheld from the tracker."""

    frame_id: int
    timestamp: float
    rgb: Optional[RgbImage]
    depth: Optional[DepthImage]
    gt_events: EventImage
    gt_pose: Pose

    @property
    def has_rgbd(self) -> bool:
        return self.rgb is not None and self.depth is not None


def replica_like_intrinsics(width: int = 600, height: int = 340) -> CameraIntrinsics:
    """Replica's 1200x680 camera (f = 600) rescaled to ``width`` x ``height``."""
    full = CameraIntrinsics(600.0, 600.0, 599.5, 339.5, 1200, 680)
    return full.resized(width, height)


# --- signed distances --------------------------------------------------------


def sdf_box_interior(p, half):
    """Distance to the walls of a box, measured from inside (positive inside)."""
    return np.min(np.asarray(half) - np.abs(p), axis=-1)


def sdf_box(p, center, half):
    q = np.abs(p - np.asarray(center)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sdf_sphere(p, center, radius):
    return np.linalg.norm(p - np.asarray(center), axis=-1) - radius


def smooth_texture(points: np.ndarray, rng: np.random.Generator, n_waves: int = 8,
                   wavelength=(0.3, 1.2), lo: float = 15.0, hi: float = 240.0) -> np.ndarray:
    """Sum of random plane waves per channel, rescaled into [lo, hi]."""
    out = np.zeros(points.shape[:-1] + (3,))
    for c in range(3):
        acc = np.zeros(points.shape[:-1])
        for _ in range(n_waves):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            k = 2 * math.pi / rng.uniform(*wavelength)
            acc += rng.uniform(0.5, 1.0) * np.sin(points @ (d * k) + rng.uniform(0, 2 * math.pi))
        out[..., c] = acc
    # shared luminance pattern keeps log-contrast high across channels
    shared = out.mean(axis=-1, keepdims=True)
    out = 0.35 * out + 0.65 * shared
    m, s = out.mean(), out.std() + 1e-12
    mid = 0.5 * (lo + hi)
    return np.clip(mid + (out - m) / s * (hi - lo) / 4.5, lo, hi)


def project_to_surface(sdf_fn, pts: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """One closest-point step ``p - sdf(p) * grad sdf(p)`` (exact for planes and spheres)."""
    d = sdf_fn(pts)
    grad = np.zeros_like(pts)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        grad[..., a] = (sdf_fn(pts + e) - sdf_fn(pts - e)) / (2 * h)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    return pts - d[..., None] * grad / np.maximum(norm, 1e-12)


def scene_from_sdf(sdf_fn, color_fn, bounds_min, bounds_max, spacing: float,
                   sharpness: float = DEFAULT_SHARPNESS, cap: float = DEFAULT_CAP) -> VoxelScene:
    """Sample an SDF scene on a node grid.

    Colors are evaluated at each node's closest surface point, so they stay
    constant along surface normals and do not depend on how deep a ray
    sample lands inside the transition band.
    """
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    res = np.maximum(np.round((bounds_max - bounds_min) / spacing).astype(int) + 1, 2)
    axes = [np.linspace(bounds_min[a], bounds_max[a], res[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    occ = np.clip(-sharpness * sdf_fn(pts), -cap, cap)
    return VoxelScene(bounds_min, bounds_max, occ, color_fn(project_to_surface(sdf_fn, pts)))


def make_room_scene(seed: int = 0, spacing: float = 0.08, half_extent=(2.3, 1.3, 2.3),
                    n_objects: int = 5, sharpness: float = DEFAULT_SHARPNESS) -> VoxelScene:
    """Closed, textured room with a few boxes and spheres inside."""
    rng = np.random.default_rng(seed)
    half = np.asarray(half_extent, dtype=np.float64)
    margin = 0.3
    objects = []
    for _ in range(n_objects):
        kind = rng.choice(["box", "sphere"])
        size = rng.uniform(0.2, 0.45)
        # keep objects away from the room center where cameras live
        while True:
            c = rng.uniform(-half + size + 0.1, half - size - 0.1)
            if np.linalg.norm(c[[0, 2]]) > 1.0:
                break
        if kind == "box":
            objects.append(("box", c, rng.uniform(0.6, 1.0, size=3) * size))
        else:
            objects.append(("sphere", c, size))

    def sdf(p):
        d = sdf_box_interior(p, half)
        for kind, c, s in objects:
            d = np.minimum(d, sdf_box(p, c, s) if kind == "box" else sdf_sphere(p, c, s))
        return d

    tex_rng = np.random.default_rng(seed + 7919)
    return scene_from_sdf(sdf, lambda pts: smooth_texture(pts, tex_rng),
                          -half - margin, half + margin, spacing, sharpness)


def make_slab_scene(z: float = 2.0, thickness: float = 0.4, extent: float = 3.0,
                    spacing: float = 0.05, color=(128.0, 128.0, 128.0), textured: bool = False,
                    sharpness: float = 400.0, seed: int = 0, half_width: Optional[float] = None) -> VoxelScene:
    """Opaque axis-aligned slab whose front face is the plane ``z``.

    ``half_width`` limits the slab's x/y extent (default: fills the bounds).
    """
    hw = extent - 0.3 if half_width is None else half_width
    center = np.array([0.0, 0.0, z + thickness / 2])
    half = np.array([hw, hw, thickness / 2])

    def sdf(p):
        return sdf_box(p, center, half)

    if textured:
        rng = np.random.default_rng(seed)
        color_fn = lambda pts: smooth_texture(pts, rng)  # noqa: E731
    else:
        color_fn = lambda pts: np.broadcast_to(np.asarray(color, float), pts.shape).copy()  # noqa: E731
    bmin = np.array([-extent, -extent, max(z - 1.5, 0.05)])
    bmax = np.array([extent, extent, z + thickness + 0.5])
    return scene_from_sdf(sdf, color_fn, bmin, bmax, spacing, sharpness)


def make_smooth_scene(seed: int = 0, spacing: float = 0.5, sharpness: float = 12.0) -> VoxelScene:
    """Random soft surface near z = 2 in front of a camera at the origin.

    Logits and colors are random multilinear functions of position
    (terms in 1, x, y, z, xy, xz, yz, xyz), which trilinear interpolation
    reproduces exactly, so the interpolated field is smooth across cell
    faces. Used for finite-difference gradient checks.
    """
    rng = np.random.default_rng(seed)
    bmin = np.array([-6.0, -4.0, -0.5])
    bmax = np.array([6.0, 4.0, 5.0])
    axes = [np.linspace(bmin[a], bmax[a], int(round((bmax[a] - bmin[a]) / spacing)) + 1) for a in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    # unit-range coordinates keep the cross terms bounded
    u, v, w = x / 6.0, y / 4.0, (z - 2.0) / 3.0
    monomials = np.stack([np.ones_like(u), u, v, w, u * v, u * w, v * w, u * v * w], axis=-1)
    z0 = 2.0 + rng.uniform(-0.2, 0.2)
    tilt = rng.uniform(-0.25, 0.25, size=2)
    warp = rng.uniform(-0.1, 0.1, size=4)
    height = z0 + tilt[0] * x + tilt[1] * y + np.tensordot(warp, np.stack([u * v, u * w, v * w, u * v * w]), axes=1)
    occ = sharpness * (z - height)
    coeffs = rng.uniform(-1.0, 1.0, size=(8, 3))
    coeffs[0] = 0.0
    coeffs *= 110.0 / np.abs(coeffs).sum(axis=0)
    color = 128.0 + monomials @ coeffs
    return VoxelScene(bmin, bmax, occ, color)


def empty_like(scene: VoxelScene, logit: float = -DEFAULT_CAP, gray: float = 128.0) -> VoxelScene:
    return VoxelScene(scene.bounds_min, scene.bounds_max,
                      np.full(scene.resolution, logit), np.full(scene.resolution + (3,), gray))


# --- trajectories ------------------------------------------------------------


def _euler_yxz(yaw, pitch, roll):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Ry @ Rx @ Rz


def _eased_time(n_frames: int, ease_in: int) -> np.ndarray:
    """Frame index warped so its rate rises smoothly from 0 to 1 over ``ease_in`` frames."""
    k = np.arange(n_frames, dtype=np.float64)
    if ease_in <= 0:
        return k
    u = np.clip(k / ease_in, 0.0, 1.0)
    # integral of the smoothstep rate 3u^2 - 2u^3
    ramp = ease_in * (u ** 3 - 0.5 * u ** 4)
    return np.where(k < ease_in, ramp, k - 0.5 * ease_in)


def make_trajectory(n_frames: int, seed: int = 0, speed: float = 0.01, kind: str = "oscillate",
                    center=(0.0, 0.0, -0.3), rot_amplitude_deg=(10.0, 5.0, 2.0), ease_in: int = 10) -> list:
    """Smooth camera path with mean translational speed ``speed`` m/frame.

    ``oscillate`` sums random sinusoids per axis (periods 40-140 frames), so
    the camera accelerates and turns back repeatedly; ``static`` never moves;
    ``line`` moves at constant velocity along +x. Moving paths start at rest
    and reach full speed over the first ``ease_in`` frames.
    """
    center = np.asarray(center, dtype=np.float64)
    if n_frames < 1:
        raise ValueError("trajectory needs at least one frame")
    if kind == "static":
        return [Pose.from_matrix(np.block([[np.eye(3), center[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))] * n_frames
    t = _eased_time(n_frames, ease_in)
    if kind == "line":
        pos = center[None, :] + np.outer(t * speed, [1.0, 0.0, 0.0])
        angles = np.zeros((n_frames, 3))
    elif kind == "oscillate":
        rng = np.random.default_rng(seed)
        waves = [[(rng.uniform(40.0, 140.0), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * math.pi))
                  for _ in range(3)] for _ in range(3)]

        def offsets(tt):
            off = np.zeros((len(tt), 3))
            for a in range(3):
                for period, amp, phase in waves[a]:
                    off[:, a] += amp * np.sin(2 * math.pi * tt / period + phase)
            off[:, 1] *= 0.5
            return off

        pos_off = offsets(t)
        # normalise on the full-speed part of the path (at least one step, even for short runs)
        t_ref = np.arange(ease_in, max(n_frames, ease_in + 2)) - 0.5 * ease_in
        mean_step = np.linalg.norm(np.diff(offsets(t_ref), axis=0), axis=1).mean()
        pos = center[None, :] + pos_off * (speed / mean_step)
        angles = np.zeros((n_frames, 3))
        for a in range(3):
            amp = math.radians(rot_amplitude_deg[a])
            for _ in range(2):
                period = rng.uniform(60.0, 160.0)
                angles[:, a] += 0.5 * amp * np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    poses = []
    for k in range(n_frames):
        R = _euler_yxz(*angles[k])
        poses.append(Pose(quat_from_matrix(R), pos[k]))
    return poses


# --- dataset -----------------------------------------------------------------


def generate_dataset(scene: VoxelScene, trajectory, intr: CameraIntrinsics,
                     cfg: RenderConfig, sim_params: EventSimParams,
                     quantize: bool = True, t_start: float = 0.0) -> list:
    """Render full-resolution RGB-D at every pose and synthesize events.

    Frame ``k`` carries the events over ``(t_{k-1}, t_k]``; frame 0 carries
    an empty event image. With ``quantize`` the RGB frames are rounded to
    8-bit values, as a camera would deliver them.
    """
    trajectory = list(trajectory)
    if not trajectory:
        raise ValueError("trajectory is empty")
    full_cfg = RenderConfig(n_samples=cfg.n_samples, near=cfg.near, far=cfg.far, scale=1.0,
                            background=cfg.background, seed=cfg.seed, min_weight=cfg.min_weight)
    rgbs, depths = [], []
    for pose in trajectory:
        out = render(scene, pose, intr, full_cfg)
        if quantize:
            rgbs.append(RgbImage(np.round(out.rgb.data).astype(np.uint8)))
        else:
            rgbs.append(out.rgb)
        depths.append(DepthImage(out.depth.data.astype(np.float32)))
    events = simulate_sequence(rgbs, sim_params, t_start)
    return [
        FrameRecord(k, t_start + k * sim_params.frame_dt, rgbs[k], depths[k], events[k], trajectory[k])
        for k in range(len(trajectory))
    ]
