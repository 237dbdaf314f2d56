"""Trajectory, depth and surface metrics, plus the frame-gap ablation table.

All distances come out in centimeters.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import _render_kernels as K
from .core import CameraIntrinsics, DepthImage, Pose, downscale
from .renderer import RenderConfig, VoxelScene, render, render_intrinsics

CM = 100.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_pairs(cls, pairs) -> "Trajectory":
        pairs = list(pairs)
        return cls(np.array([t for t, _ in pairs], dtype=np.float64), tuple(p for _, p in pairs))

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        """Left-apply a rigid transform to every pose."""
        return Trajectory(self.timestamps, tuple(T.compose(p) for p in self.poses))

    def head(self, n: int) -> "Trajectory":
        return Trajectory(self.timestamps[:n], self.poses[:n])


@dataclass
class MetricsReport:
    ate_rmse_cm: float
    ate_rmse_aligned_cm: float
    depth_l1_cm: float
    depth_coverage: float
    accuracy_cm: float
    completion_cm: float
    completion_ratio_pct: float
    success: bool
    frames_completed: int
    psnr_db: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


# --- trajectory ------------------------------------------------------------------


def rigid_alignment(src: np.ndarray, dst: np.ndarray):
    """Rotation ``R`` and translation ``t`` minimizing ``sum |R src + t - dst|^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    if len(src) < 2:
        return np.eye(3), mu_d - mu_s
    with warnings.catch_warnings():
        # collinear point sets leave the rotation about that line undetermined
        warnings.simplefilter("ignore", UserWarning)
        rot, _ = Rotation.align_vectors(dst - mu_d, src - mu_s)
    R = rot.as_matrix()
    return R, mu_d - R @ mu_s


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = False) -> float:
    """Position RMSE in cm, optionally after rigid (no scale) alignment of ``est`` onto ``gt``."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise ValueError("empty trajectories")
    if not np.allclose(est.timestamps, gt.timestamps, rtol=0, atol=1e-6):
        raise ValueError("trajectory timestamps do not match")
    p = est.positions()
    q = gt.positions()
    if align:
        R, t = rigid_alignment(p, q)
        p = p @ R.T + t
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))) * CM)


# --- depth -----------------------------------------------------------------------


@dataclass(frozen=True)
class DepthL1:
    value_cm: float
    coverage: float  # fraction of GT-valid pixels the reconstruction renders as valid


def depth_l1(scene: VoxelScene, frames, intr: CameraIntrinsics, cfg: RenderConfig) -> DepthL1:
    """Mean |rendered - GT| depth in cm over GT-valid pixels, rendered at GT poses.

    Pixels where the reconstruction renders no valid depth count with depth
    0, so missing geometry shows up as a large error and low coverage.
    """
    frames = [f for f in frames if f.depth is not None]
    if not frames:
        raise ValueError("depth_l1 needs at least one view with depth")
    total, n, covered = 0.0, 0, 0
    for f in frames:
        gt = f.depth if cfg.scale == 1.0 else downscale(f.depth, cfg.scale)
        out = render(scene, f.gt_pose, intr, cfg)
        valid = gt.data > 0
        total += float(np.abs(out.depth.data[valid] - gt.data[valid]).sum())
        n += int(valid.sum())
        covered += int((valid & (out.depth.data > 0)).sum())
    if n == 0:
        raise ValueError("no valid ground-truth depth pixels")
    return DepthL1(total / n * CM, covered / n)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


# --- surfaces --------------------------------------------------------------------


def _logits(scene: VoxelScene, pts: np.ndarray) -> np.ndarray:
    out = np.empty((len(pts), 4))
    grid, skip, bmin, inv_sp = scene._kernel_args()
    K.sample_points(grid, skip, bmin, inv_sp, np.ascontiguousarray(pts, dtype=np.float64), out)
    return out[:, 0]


def sample_surface(scene: VoxelScene, n_points: int, seed: int = 0, seg_len: Optional[float] = None,
                   max_batches: int = 400, batch: int = 200_000) -> np.ndarray:
    """Points on the logit-0 (occupancy 0.5) surface.

    Random short segments (uniform origin and direction) that straddle the
    surface are bisected to the crossing. A segment's chance of crossing is
    proportional to the local surface area, so the points are close to
    area-uniform. Segments leaving the scene bounds are discarded.
    """
    # trilinear values stay within the node range, so one sign means no crossing
    if scene.occ.max() <= 0 or scene.occ.min() > 0:
        raise ValueError("scene has no occupancy iso-surface")
    rng = np.random.default_rng(seed)
    L = float(scene.spacing.min()) if seg_len is None else seg_len
    found = []
    count = 0
    for _ in range(max_batches):
        a = rng.uniform(scene.bounds_min, scene.bounds_max, size=(batch, 3))
        d = rng.normal(size=(batch, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = a + L * d
        fa, fb = _logits(scene, a), _logits(scene, b)
        ok = np.isfinite(fa) & np.isfinite(fb) & ((fa > 0) != (fb > 0))
        a, b, fa = a[ok], b[ok], fa[ok]
        for _ in range(30):
            m = 0.5 * (a + b)
            fm = _logits(scene, m)
            same = (fm > 0) == (fa > 0)
            a = np.where(same[:, None], m, a)
            fa = np.where(same, fm, fa)
            b = np.where(same[:, None], b, m)
        found.append(0.5 * (a + b))
        count += len(a)
        if count >= n_points:
            break
    pts = np.concatenate(found) if found else np.empty((0, 3))
    if len(pts) == 0:
        raise ValueError("scene has no occupancy iso-surface")
    return pts[:n_points]


def visible_mask(points: np.ndarray, views, intr: CameraIntrinsics, cfg: RenderConfig,
                 reference: VoxelScene, tol: float = 0.1) -> np.ndarray:
    """Points seen by at least one view: in frame and not behind the reference depth by more than ``tol``."""
    ri = render_intrinsics(intr, cfg)
    seen = np.zeros(len(points), dtype=bool)
    for pose in views:
        depth = render(reference, pose, intr, cfg).depth.data
        cam = pose.inverse().transform_points(points)
        z = cam[:, 2]
        zs = np.where(z > cfg.near, z, 1.0)
        u = np.rint(ri.fx * cam[:, 0] / zs + ri.cx).astype(np.int64)
        v = np.rint(ri.fy * cam[:, 1] / zs + ri.cy).astype(np.int64)
        inside = (z > cfg.near) & (u >= 0) & (u < ri.width) & (v >= 0) & (v < ri.height)
        idx = np.flatnonzero(inside)
        dref = depth[v[idx], u[idx]]
        seen[idx[(dref > 0) & (z[idx] <= dref + tol)]] = True
    return seen


def surface_metrics(recon: VoxelScene, gt: VoxelScene, n_points: int = 100_000, threshold_cm: float = 5.0,
                    seed: int = 0, views=None, intr: Optional[CameraIntrinsics] = None,
                    cfg: Optional[RenderConfig] = None):
    """``(accuracy_cm, completion_cm, completion_ratio_pct)`` between two scenes' surfaces.

    Both scenes are sampled with the same seed. When ``views`` (GT poses)
    are given, points of both surfaces not visible from any view (judged
    against the GT scene's depth) are dropped before measuring.
    """
    pr = sample_surface(recon, n_points, seed)
    pg = sample_surface(gt, n_points, seed)
    if views is not None:
        if intr is None or cfg is None:
            raise ValueError("visibility culling needs intrinsics and a render config")
        views = list(views)
        pr = pr[visible_mask(pr, views, intr, cfg, gt)]
        pg = pg[visible_mask(pg, views, intr, cfg, gt)]
        if len(pr) == 0 or len(pg) == 0:
            raise ValueError("no visible surface points")
    d_acc, _ = cKDTree(pg).query(pr)
    d_comp, _ = cKDTree(pr).query(pg)
    ratio = float(np.mean(d_comp * CM < threshold_cm) * 100.0)
    return float(d_acc.mean() * CM), float(d_comp.mean() * CM), ratio


# --- ablation --------------------------------------------------------------------


def ablation_summary(reports, out_dir=None) -> dict:
    """Group runs by (tau, events) and compute success rates.

    ``reports`` holds ``(config, tracking_report, metrics_report)`` triples;
    ``config`` needs ``tau`` and ``events`` (attributes or mapping keys).
    With ``out_dir``, writes ``ablation.csv`` and ``ablation.json``.
    """
    def get(cfg, key):
        return cfg[key] if isinstance(cfg, dict) else getattr(cfg, key)

    groups = {}
    for cfg, trep, mrep in reports:
        key = (int(get(cfg, "tau")), bool(get(cfg, "events")))
        groups.setdefault(key, []).append((trep, mrep))
    rows = []
    for (tau, events), runs in sorted(groups.items()):
        succ = [bool(m.success) for _, m in runs]
        ate = [m.ate_rmse_cm for _, m in runs]
        rows.append({
            "tau": tau,
            "events": events,
            "runs": len(runs),
            "successes": int(sum(succ)),
            "success_rate_pct": 100.0 * sum(succ) / len(runs),
            "mean_ate_rmse_cm": float(np.mean(ate)),
            "mean_depth_l1_cm": float(np.mean([m.depth_l1_cm for _, m in runs])),
            "mean_frames_completed": float(np.mean([m.frames_completed for _, m in runs])),
        })
    summary = {
        "rows": rows,
        "histogram": {
            "labels": [f"tau={r['tau']} events={'on' if r['events'] else 'off'}" for r in rows],
            "success_rate_pct": [r["success_rate_pct"] for r in rows],
        },
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["tau"])
            w.writeheader()
            w.writerows(rows)
        (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    return summary


__all__ = [
    "Trajectory",
    "MetricsReport",
    "DepthL1",
    "rigid_alignment",
    "ate_rmse",
    "depth_l1",
    "psnr",
    "sample_surface",
    "visible_mask",
    "surface_metrics",
    "ablation_summary",
]
