"""Online tracking and mapping loop.

Tracking optimizes one pose per frame against the reconstructed map. Every
frame after the first carries ground-truth events; every ``tau``-th frame
also carries RGB-D. On event-only frames the tracker compares the events
accumulated since the last RGB-D frame ``t_GT`` with the soft events
predicted between the cached RGB at ``t_GT`` and the current rendering.

Mapping runs at RGB-D frames only and never sees events: holes in the map
are first filled by projecting keyframe depth into the grid, then the grid
is refined by gradient steps on photometric and depth L1.
"""
from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr

from .core import (CameraIntrinsics, DepthImage, EventImage, Pose, RgbImage, apply_tangent,
                   downscale, pose_difference)
from .event_predictor import PredictorParams
from .losses import GaussianKernel, LossTerms, LossWeights, depth_loss, photometric_loss, total_tracking_loss
from .renderer import (RenderConfig, VoxelScene, grid_gradient, render, render_intrinsics, render_rays,
                       render_with_jacobian)


@dataclass(frozen=True)
class ScheduleConfig:
    tau: int = 5
    tracking_iters: int = 20
    mapping_iters: int = 60
    mapping_every: Optional[int] = None  # None -> tau
    lr_pose: float = 1e-3
    lr_grid: float = 1e-2
    lr_color: float = 0.25  # grid colors are on [0, 255]
    events: bool = True
    mode: str = "sequential"
    # kernel sizes used over the iterations of each frame (coarse to fine); empty = fixed kernel
    kernel_schedule: tuple = ()
    event_coverage: float = 0.99  # min render weight sum for a pixel to enter the event term
    keep_best: bool = True  # return the lowest-loss iterate instead of the last one
    mapping_rays: int = 2048
    mapping_window: int = 4  # most recent RGB-D keyframes used per dispatch
    fuse_sharpness: float = 50.0
    fuse_band: float = 0.25
    seed: int = 0
    # divergence: depth L1 (m) at RGB-D frames, optional loss cap, per-frame pose jump
    max_depth_l1: float = 0.15
    max_loss: float = math.inf
    max_step_trans: float = 0.2
    max_step_rot: float = 0.35
    patience: int = 3
    on_failure: str = "abort"  # or "continue"

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.tracking_iters < 1 or self.mapping_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.mapping_every is not None and self.mapping_every < 1:
            raise ValueError("mapping_every must be >= 1")
        if min(self.lr_pose, self.lr_grid, self.lr_color) < 0:
            raise ValueError("step sizes must be non-negative")
        if self.mode not in ("sequential", "concurrent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.on_failure not in ("abort", "continue"):
            raise ValueError(f"unknown failure policy {self.on_failure!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if any(int(s) < 1 or int(s) % 2 == 0 for s in self.kernel_schedule):
            raise ValueError("kernel schedule sizes must be positive odd integers")

    @property
    def map_every(self) -> int:
        return self.tau if self.mapping_every is None else self.mapping_every


@dataclass(frozen=True)
class SlamConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    render: RenderConfig = RenderConfig()
    weights: LossWeights = LossWeights()
    kernel: GaussianKernel = GaussianKernel()
    predictor: PredictorParams = PredictorParams()


def schedule_inputs(frame_id: int, tau: int) -> dict:
    if frame_id < 0:
        raise ValueError("frame_id must be >= 0")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return {"rgbd": frame_id % tau == 0, "events": frame_id > 0}


class Adam:
    """Adam on a flat parameter vector; returns the step to subtract."""

    def __init__(self, lr: float, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- state and reports ---------------------------------------------------------


@dataclass
class Keyframe:
    frame_id: int
    pose: Pose
    rgb: np.ndarray  # downscaled, float (h, w, 3)
    depth: np.ndarray  # downscaled (h, w)


@dataclass
class TrackingState:
    pose: Pose
    prev_pose: Optional[Pose]
    frame_id: int
    t_gt: int
    gt_rgb: np.ndarray  # downscaled RGB at t_gt
    event_accum: EventImage  # full-resolution GT events over (t_gt, frame_id]
    supervised: list = field(default_factory=list)  # [(frame_id, pose)] last two optimized frames


@dataclass
class FrameReport:
    frame_id: int
    timestamp: float
    pose: Pose
    rgbd: bool
    events: bool
    optimized: bool
    t_gt: int
    loss_trace: list
    terms: dict
    step_trans: float
    step_rot: float
    status: str  # "anchor", "ok", "bad" or "unchecked"

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id, "timestamp": self.timestamp,
            "translation": self.pose.translation.tolist(), "rotation": self.pose.rotation.tolist(),
            "rgbd": self.rgbd, "events": self.events, "optimized": self.optimized, "t_gt": self.t_gt,
            "loss_trace": list(self.loss_trace), "terms": dict(self.terms),
            "step_trans": self.step_trans, "step_rot": self.step_rot, "status": self.status,
        }


@dataclass
class TrackingReport:
    frames: list = field(default_factory=list)
    n_frames: int = 0
    failed_at: Optional[int] = None
    tau: int = 5
    events: bool = True

    @property
    def success(self) -> bool:
        return self.failed_at is None and len(self.frames) == self.n_frames

    @property
    def frames_completed(self) -> int:
        return len(self.frames) if self.failed_at is None else self.failed_at

    def poses(self) -> list:
        return [f.pose for f in self.frames]

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames, "failed_at": self.failed_at, "tau": self.tau,
            "events": self.events, "success": self.success,
            "frames_completed": self.frames_completed,
            "frames": [f.to_dict() for f in self.frames],
        }


# --- tracking --------------------------------------------------------------------


def _low(img, cfg: RenderConfig):
    return downscale(img, cfg.scale) if cfg.scale != 1.0 else img


def _kernel_at(cfg: SlamConfig, it: int) -> GaussianKernel:
    sched = cfg.schedule.kernel_schedule
    if not sched:
        return cfg.kernel
    size = int(sched[min(it * len(sched) // cfg.schedule.tracking_iters, len(sched) - 1)])
    if size == cfg.kernel.size:
        return cfg.kernel
    return GaussianKernel(size, cfg.kernel.sigma * size / cfg.kernel.size)


def init_state(frame, gt_pose: Pose, cfg: SlamConfig) -> TrackingState:
    if not frame.has_rgbd:
        raise ValueError("the first frame must carry RGB-D")
    h, w = frame.rgb.height, frame.rgb.width
    return TrackingState(pose=gt_pose, prev_pose=None, frame_id=frame.frame_id, t_gt=frame.frame_id,
                         gt_rgb=_low(frame.rgb, cfg.render).as_float(),
                         event_accum=EventImage.zeros(h, w), supervised=[(frame.frame_id, gt_pose)])


def predict_pose(state: TrackingState, frame_id: int) -> Pose:
    """Constant-velocity guess from the last two supervised frames."""
    sup = state.supervised
    if len(sup) < 2:
        return state.pose
    (f0, p0), (f1, p1) = sup[-2], sup[-1]
    vel = pose_difference(p1, p0) / (f1 - f0)
    steps = frame_id - state.frame_id
    pose = state.pose
    for _ in range(steps):
        pose = apply_tangent(pose, vel)
    return pose


def _accumulate(acc: EventImage, ev: EventImage) -> EventImage:
    return EventImage(acc.pos + ev.pos, acc.neg + ev.neg)


def track_frame(state: TrackingState, frame, scene: VoxelScene, intr: CameraIntrinsics,
                cfg: SlamConfig):
    """Estimate the pose of ``frame``; returns ``(new_state, FrameReport)``."""
    sch = cfg.schedule
    flags = schedule_inputs(frame.frame_id, sch.tau)
    if flags["rgbd"] and not frame.has_rgbd:
        raise ValueError(f"frame {frame.frame_id} is scheduled for RGB-D but has none")
    if frame.frame_id <= state.frame_id:
        raise ValueError("frames must be processed in increasing order")
    accum = _accumulate(state.event_accum, frame.gt_events)
    t_gt = state.t_gt
    init = predict_pose(state, frame.frame_id)
    pose = init

    use_events = sch.events and flags["events"]
    optimize = use_events or flags["rgbd"]
    trace, terms = [], LossTerms(0.0)
    if optimize:
        gt_events = _low(accum, cfg.render) if use_events else None
        gt_rgb = gt_depth = None
        if flags["rgbd"]:
            gt_rgb = _low(frame.rgb, cfg.render).as_float()
            gt_depth = _low(frame.depth, cfg.render).data
        opt = Adam(sch.lr_pose, 6)
        best = None  # (loss, pose, terms); reset when the kernel changes
        kernel = None
        for it in range(sch.tracking_iters):
            if _kernel_at(cfg, it) != kernel:
                kernel, best = _kernel_at(cfg, it), None
            out, jac = render_with_jacobian(scene, pose, intr, cfg.render)
            terms, grad = total_tracking_loss(
                out.rgb.data, out.depth.data, jac, cfg.weights, kernel, cfg.predictor,
                prev_gt_rgb=state.gt_rgb, gt_events=gt_events, gt_rgb=gt_rgb, gt_depth=gt_depth,
                event_mask=out.weight_sum >= sch.event_coverage)
            trace.append(terms.total)
            if best is None or terms.total < best[0]:
                best = (terms.total, pose, terms)
            step = opt.step(grad)
            if np.any(step):
                pose = apply_tangent(pose, -step)
        if sch.keep_best and best is not None:
            _, pose, terms = best

    d = pose_difference(pose, init)
    step_rot, step_trans = float(np.linalg.norm(d[:3])), float(np.linalg.norm(d[3:]))
    status = "unchecked"
    if optimize:
        bad = (step_trans > sch.max_step_trans or step_rot > sch.max_step_rot
               or (trace and not math.isfinite(trace[-1])) or (trace and trace[-1] > sch.max_loss))
        if flags["rgbd"]:
            bad = bad or terms.depth > sch.max_depth_l1
            status = "bad" if bad else "ok"
        elif bad:
            status = "bad"

    supervised = state.supervised
    if optimize:
        supervised = (supervised + [(frame.frame_id, pose)])[-2:]
    new = TrackingState(pose=pose, prev_pose=state.pose, frame_id=frame.frame_id, t_gt=t_gt,
                        gt_rgb=state.gt_rgb, event_accum=accum, supervised=supervised)
    if flags["rgbd"]:
        new.t_gt = frame.frame_id
        new.gt_rgb = _low(frame.rgb, cfg.render).as_float()
        new.event_accum = EventImage.zeros(frame.rgb.height, frame.rgb.width)
    report = FrameReport(frame.frame_id, frame.timestamp, pose, flags["rgbd"], flags["events"], optimize,
                         t_gt, trace, vars(terms).copy(), step_trans, step_rot, status)
    return new, report


# --- mapping ---------------------------------------------------------------------


@dataclass
class MapReport:
    loss_trace: list
    fused_nodes: int


def make_keyframe(frame, pose: Pose, cfg: RenderConfig) -> Keyframe:
    return Keyframe(frame.frame_id, pose, _low(frame.rgb, cfg).as_float(), _low(frame.depth, cfg).data.astype(np.float64))


def ramp_depth_bias(sharpness: float, step: float, n_phase: int = 256) -> float:
    """Rendered depth minus the logit-zero crossing for a ramp ``logit = sharpness * (z - z0)``.

    Averaged over sample phases; used to place fused surfaces so that they
    render at the observed depth.
    """
    k = np.arange(-60, 61)
    bias = 0.0
    for ph in (np.arange(n_phase) + 0.5) / n_phase:
        z = (k + ph) * step
        a = 1.0 / (1.0 + np.exp(-np.clip(sharpness * z, -30.0, 30.0)))
        w = a * np.concatenate([[1.0], np.cumprod(1.0 - a[:-1])])
        bias += float((w * z).sum() / w.sum())
    return bias / n_phase


def fuse_holes(scene: VoxelScene, keyframes, intr: CameraIntrinsics, cfg: RenderConfig,
               sharpness: float = 50.0, band: float = 0.25, damping: float = 0.05):
    """Write keyframe depth into the grid wherever the map has holes.

    A hole is a pixel with valid GT depth whose rendering has weight sum
    below ``cfg.min_weight``. Points along each hole ray within ``band`` of
    the observed depth ``d`` get the target logit ``sharpness * (z - d + b)``
    and the pixel color, where ``b`` is :func:`ramp_depth_bias` so that the
    fused surface renders at depth ``d``. The touched nodes are then solved
    for by damped sparse least squares, so their trilinear interpolant
    reproduces the targets; the damping pulls weakly supported nodes towards
    the trilinear-weighted mean of their targets.
    Returns ``(scene, n_nodes_written)``.
    """
    ri = render_intrinsics(intr, cfg)
    dirs = ri.ray_directions()
    res = np.array(scene.resolution)
    sp = scene.spacing
    offsets = np.arange(-band, band + 1e-12, 0.5 * float(sp.min()))
    shift = ramp_depth_bias(sharpness, cfg.sample_spacing)
    rows, cols, vals, targets, colors = [], [], [], [], []
    n_rows = 0
    for kf in keyframes:
        out = render(scene, kf.pose, intr, cfg)
        depth = kf.depth.reshape(-1)
        hole = np.flatnonzero((depth > 0) & (out.weight_sum.reshape(-1) < cfg.min_weight))
        if hole.size == 0:
            continue
        d = depth[hole]
        z = np.clip(d[:, None] + offsets[None, :], cfg.near, None)  # (n, s)
        target = np.clip(sharpness * (z - d[:, None] + shift), -30.0, 30.0).ravel()
        color = np.repeat(kf.rgb.reshape(-1, 3)[hole], len(offsets), axis=0)
        cam = (dirs[hole][:, None, :] * z[..., None]).reshape(-1, 3)
        g = (kf.pose.transform_points(cam) - scene.bounds_min) / sp
        base = np.floor(g).astype(np.int64)
        keep = np.all((base >= 0) & (base < res - 1), axis=1)
        base, frac = base[keep], g[keep] - base[keep]
        row = n_rows + np.arange(len(base))
        for corner in np.ndindex(2, 2, 2):
            c = np.array(corner)
            rows.append(row)
            cols.append(np.ravel_multi_index((base + c).T, res))
            vals.append(np.prod(np.where(c, frac, 1.0 - frac), axis=1))
        targets.append(target[keep])
        colors.append(color[keep])
        n_rows += len(base)
    if n_rows == 0:
        return scene, 0
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    nodes, local = np.unique(cols, return_inverse=True)
    A = sparse.csr_matrix((vals, (rows, local)), shape=(n_rows, len(nodes)))
    b = np.column_stack([np.concatenate(targets), np.concatenate(colors)])  # (rows, 4)
    wsum = np.asarray(A.sum(axis=0)).ravel()
    prior = (A.T @ b) / wsum[:, None]
    sol = np.empty_like(prior)
    for ch in range(4):
        r = b[:, ch] - A @ prior[:, ch]
        sol[:, ch] = prior[:, ch] + lsqr(A, r, damp=damping, atol=1e-8, btol=1e-8, iter_lim=300)[0]
    occ = scene.occ.reshape(-1).copy()
    col = scene.color.reshape(-1, 3).copy()
    occ[nodes] = np.clip(sol[:, 0], -30.0, 30.0)
    col[nodes] = np.clip(sol[:, 1:], 0.0, 255.0)
    return scene.with_values(occ.reshape(scene.resolution), col.reshape(scene.resolution + (3,))), len(nodes)


def map_update(scene: VoxelScene, keyframes, intr: CameraIntrinsics, cfg: SlamConfig,
               rng: Optional[np.random.Generator] = None, fuse: bool = True):
    """Refine the map on RGB-D keyframes with poses held fixed.

    Keyframes may be :class:`Keyframe` objects or frame records (used at
    their GT pose); records without RGB-D are ignored. Returns ``(scene, MapReport)``.
    """
    sch = cfg.schedule
    kfs = [k for k in keyframes if isinstance(k, Keyframe)]
    kfs += [make_keyframe(k, k.gt_pose, cfg.render)
            for k in keyframes if not isinstance(k, Keyframe) and k.has_rgbd]
    if not kfs:
        return scene, MapReport([], 0)
    rng = np.random.default_rng(sch.seed) if rng is None else rng
    fused = 0
    if fuse:
        scene, fused = fuse_holes(scene, kfs, intr, cfg.render, sch.fuse_sharpness, sch.fuse_band)

    ri = render_intrinsics(intr, cfg.render)
    dirs_all = ri.ray_directions()
    npix = dirs_all.shape[0]
    occ = scene.occ.copy()
    col = scene.color.copy()
    opt_occ = Adam(sch.lr_grid, occ.shape)
    opt_col = Adam(sch.lr_color, col.shape)
    per_kf = max(1, sch.mapping_rays // len(kfs))
    trace = []
    cur = scene
    for _ in range(sch.mapping_iters):
        g_occ = np.zeros_like(occ)
        g_col = np.zeros_like(col)
        total = 0.0
        for kf in kfs:
            pix = np.arange(npix) if per_kf >= npix else np.sort(rng.choice(npix, per_kf, replace=False))
            dirs = dirs_all[pix]
            rgb, depth, _, _ = render_rays(cur, kf.pose, dirs, cfg.render)
            gt_rgb = kf.rgb.reshape(-1, 3)[pix]
            gt_d = kf.depth.reshape(-1)[pix]
            lp, grgb = photometric_loss(rgb, gt_rgb)
            mask = (depth > 0) & (gt_d > 0)
            if mask.any():
                ld, gd = depth_loss(depth, gt_d)
            else:
                ld, gd = 0.0, np.zeros_like(depth)
            total += cfg.weights.lambda_photo * lp + cfg.weights.lambda_depth * ld
            go, gc = grid_gradient(cur, kf.pose, dirs, cfg.render,
                                   cfg.weights.lambda_photo * grgb, cfg.weights.lambda_depth * gd)
            g_occ += go
            g_col += gc
        trace.append(total / len(kfs))
        occ = occ - opt_occ.step(g_occ / len(kfs))
        col = np.clip(col - opt_col.step(g_col / len(kfs)), 0.0, 255.0)
        cur = scene.with_values(occ, col)
    return cur, MapReport(trace, fused)


# --- full run --------------------------------------------------------------------


@dataclass
class RunResult:
    report: TrackingReport
    scene: VoxelScene
    trajectory: list  # [(timestamp, Pose)]
    map_reports: list = field(default_factory=list)


class _ConcurrentMapper:
    """Mapper thread working on a private scene copy and publishing snapshots."""

    def __init__(self, scene, intr, cfg, rng):
        self._scene = scene
        self._lock = threading.Lock()
        self._jobs = queue.Queue()
        self.reports = []
        self.error = None
        self._intr, self._cfg, self._rng = intr, cfg, rng
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            job = self._jobs.get()
            if job is None:
                return
            try:
                new, rep = map_update(self.latest(), job, self._intr, self._cfg, self._rng)
            except Exception as exc:  # surfaced on close()
                self.error = exc
                return
            with self._lock:
                self._scene = new
                self.reports.append(rep)

    def latest(self) -> VoxelScene:
        with self._lock:
            return self._scene

    def submit(self, keyframes):
        self._jobs.put(list(keyframes))

    def close(self) -> VoxelScene:
        self._jobs.put(None)
        self._thread.join()
        if self.error is not None:
            raise self.error
        return self.latest()


def run_sequence(dataset, intr: CameraIntrinsics, initial_scene: VoxelScene, cfg: SlamConfig = SlamConfig(),
                 callback=None) -> RunResult:
    """Track a whole sequence, mapping every ``schedule.map_every`` frames.

    ``initial_scene`` is the map the run starts from (usually empty with
    the right bounds). Frame 0 is anchored to its ground-truth pose.
    ``callback(frame_report)`` is invoked after every frame.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    sch = cfg.schedule
    rng = np.random.default_rng(sch.seed)
    first = dataset[0]
    state = init_state(first, first.gt_pose, cfg)
    report = TrackingReport(n_frames=len(dataset), tau=sch.tau, events=sch.events)
    report.frames.append(FrameReport(first.frame_id, first.timestamp, first.gt_pose, True, False, False,
                                     first.frame_id, [], {}, 0.0, 0.0, "anchor"))
    keyframes = [make_keyframe(first, first.gt_pose, cfg.render)]
    map_reports = []
    concurrent = sch.mode == "concurrent"
    scene = initial_scene
    if concurrent:
        mapper = _ConcurrentMapper(scene, intr, cfg, rng)
        mapper.submit(keyframes[-sch.mapping_window:])
    else:
        scene, rep = map_update(scene, keyframes[-sch.mapping_window:], intr, cfg, rng)
        map_reports.append(rep)
    if callback:
        callback(report.frames[0])

    streak = []
    try:
        for frame in dataset[1:]:
            snap = mapper.latest() if concurrent else scene
            state, fr = track_frame(state, frame, snap, intr, cfg)
            report.frames.append(fr)
            if callback:
                callback(fr)
            if fr.status == "bad":
                streak.append(fr.frame_id)
            elif fr.status == "ok":
                streak = []
            if len(streak) >= sch.patience and report.failed_at is None:
                report.failed_at = streak[0]
                if sch.on_failure == "abort":
                    break
            if fr.rgbd:
                keyframes.append(make_keyframe(frame, fr.pose, cfg.render))
                keyframes = keyframes[-sch.mapping_window:]
            if fr.rgbd and frame.frame_id % sch.map_every == 0:
                if concurrent:
                    mapper.submit(keyframes)
                else:
                    scene, rep = map_update(scene, keyframes, intr, cfg, rng)
                    map_reports.append(rep)
    finally:
        if concurrent:
            scene = mapper.close()
            map_reports = mapper.reports
    traj = [(f.timestamp, f.pose) for f in report.frames]
    return RunResult(report, scene, traj, map_reports)


__all__ = [
    "ScheduleConfig",
    "SlamConfig",
    "TrackingState",
    "TrackingReport",
    "FrameReport",
    "Keyframe",
    "MapReport",
    "RunResult",
    "Adam",
    "schedule_inputs",
    "init_state",
    "predict_pose",
    "track_frame",
    "fuse_holes",
    "map_update",
    "make_keyframe",
    "run_sequence",
]
