"""Differentiable volume rendering over an occupancy/color voxel grid.

Samples are stratified in depth between ``near`` and ``far``: one jitter
per depth stratum, drawn from the config seed and shared by every ray, so
renders at different resolutions sample the same depth planes. Occupancy ``o = sigmoid(logit)`` acts directly as the
per-sample opacity::

    w_i   = o_i * prod_{j<i} (1 - o_j)
    rgb   = sum w_i c_i + (1 - sum w_i) * background
    depth = sum w_i z_i / max(sum w_i, 1e-6)

Depth is reported as 0 (invalid) where the weight sum is below
``RenderConfig.min_weight``. Cells whose eight corner logits are all below
``SKIP_LOGIT`` are treated as empty and samples stop once transmittance
drops under 1e-12; both cut-offs perturb results by less than 1e-10.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _render_kernels as K
from .core import CameraIntrinsics, DepthImage, Pose, RgbImage

SKIP_LOGIT = -25.0


@dataclass(frozen=True, eq=False)
class VoxelScene:
    """Occupancy logits and colors on a regular grid of nodes.

    Nodes sit on the bounds corners: node ``(i, j, k)`` is at
    ``bounds_min + (i, j, k) * spacing``.
    """

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    occ: np.ndarray  # (nx, ny, nz) logits
    color: np.ndarray  # (nx, ny, nz, 3) in [0, 255]

    def __post_init__(self):
        bmin = np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        bmax = np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        occ = np.asarray(self.occ, dtype=np.float64)
        color = np.asarray(self.color, dtype=np.float64)
        if occ.ndim != 3 or min(occ.shape) < 2:
            raise ValueError(f"occupancy grid needs >= 2 nodes per axis, got {occ.shape}")
        if color.shape != occ.shape + (3,):
            raise ValueError(f"color grid shape {color.shape} does not match {occ.shape}")
        if not np.all(bmax > bmin):
            raise ValueError("scene bounds are degenerate")
        if np.isnan(occ).any() or not np.all(np.isfinite(color)):
            raise ValueError("scene values must not be NaN")
        for name, arr in (("bounds_min", bmin), ("bounds_max", bmax), ("occ", occ), ("color", color)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def resolution(self) -> tuple:
        return self.occ.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / (np.array(self.resolution) - 1)

    @cached_property
    def packed(self) -> np.ndarray:
        g = np.empty(self.occ.shape + (4,))
        g[..., 0] = self.occ
        g[..., 1:] = self.color
        return g

    @cached_property
    def skip_mask(self) -> np.ndarray:
        o = self.occ
        m = np.maximum.reduce([
            o[:-1, :-1, :-1], o[1:, :-1, :-1], o[:-1, 1:, :-1], o[:-1, :-1, 1:],
            o[1:, 1:, :-1], o[1:, :-1, 1:], o[:-1, 1:, 1:], o[1:, 1:, 1:],
        ])
        return np.ascontiguousarray(m <= SKIP_LOGIT)

    def node_positions(self) -> np.ndarray:
        axes = [self.bounds_min[a] + np.arange(self.resolution[a]) * self.spacing[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_values(self, occ=None, color=None) -> "VoxelScene":
        return VoxelScene(self.bounds_min, self.bounds_max,
                          self.occ if occ is None else occ,
                          self.color if color is None else color)

    def _kernel_args(self):
        return self.packed, self.skip_mask, self.bounds_min, 1.0 / self.spacing


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    near: float = 0.2
    far: float = 6.0
    scale: float = 0.15
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    min_weight: float = 0.1

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if not (0 < self.scale <= 1):
            raise ValueError("scale must lie in (0, 1]")

    @property
    def sample_spacing(self) -> float:
        return (self.far - self.near) / self.n_samples


@dataclass(frozen=True, eq=False)
class RenderOutput:
    rgb: RgbImage
    depth: DepthImage
    weight_sum: np.ndarray = field(repr=False)


def sample_depths(cfg: RenderConfig) -> np.ndarray:
    """Stratified camera depths shared by all rays of a render."""
    u = np.random.default_rng(cfg.seed).uniform(size=cfg.n_samples)
    return cfg.near + (np.arange(cfg.n_samples) + u) * cfg.sample_spacing


def sample_scene(scene: VoxelScene, point):
    """``(logit, rgb)`` at a world point; ``-inf`` logit outside the bounds."""
    pts = np.asarray(point, dtype=np.float64).reshape(-1, 3)
    out = np.empty((pts.shape[0], 4))
    grid, skip, bmin, inv_sp = scene._kernel_args()
    K.sample_points(grid, skip, bmin, inv_sp, pts, out)
    if np.asarray(point).ndim == 1:
        return float(out[0, 0]), out[0, 1:].copy()
    return out[:, 0], out[:, 1:]


def render_intrinsics(intr: CameraIntrinsics, cfg: RenderConfig) -> CameraIntrinsics:
    return intr.scaled(cfg.scale)


def _check_pose(pose: Pose):
    if not isinstance(pose, Pose):
        raise TypeError("pose must be a Pose")


def render_rays(scene: VoxelScene, pose: Pose, dirs: np.ndarray, cfg: RenderConfig,
                want_jac: bool = False):
    """Render an arbitrary ray batch (camera-frame directions with unit z).

    Returns ``(rgb (N, 3), depth (N,), weight_sum (N,), jac (N, 4, 6) or None)``.
    """
    _check_pose(pose)
    n = dirs.shape[0]
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    wsum = np.empty(n)
    jac = np.empty((n if want_jac else 0, 4, 6))
    grid, skip, bmin, inv_sp = scene._kernel_args()
    K.render_rays(grid, skip, bmin, inv_sp, pose.rotation_matrix(), pose.translation,
                  np.ascontiguousarray(dirs, dtype=np.float64), sample_depths(cfg),
                  np.asarray(cfg.background, dtype=np.float64), float(cfg.min_weight),
                  want_jac, rgb, depth, wsum, jac)
    return rgb, depth, wsum, (jac if want_jac else None)


def _render_full(scene, pose, intr, cfg, want_jac):
    ri = render_intrinsics(intr, cfg)
    dirs = ri.ray_directions()
    rgb, depth, wsum, jac = render_rays(scene, pose, dirs, cfg, want_jac)
    h, w = ri.height, ri.width
    out = RenderOutput(
        RgbImage(np.clip(rgb, 0.0, 255.0).reshape(h, w, 3)),
        DepthImage(depth.reshape(h, w)),
        wsum.reshape(h, w),
    )
    return out, jac


def render(scene: VoxelScene, pose: Pose, intr: CameraIntrinsics, cfg: RenderConfig) -> RenderOutput:
    """Render at ``floor(intrinsics size * cfg.scale)``."""
    return _render_full(scene, pose, intr, cfg, False)[0]


def render_with_jacobian(scene, pose, intr, cfg):
    """Render plus the per-pixel Jacobian of (r, g, b, depth) w.r.t. the pose tangent.

    The Jacobian has shape (H*W, 4, 6); contract it with upstream gradients
    via :func:`contract_pose_gradient`.
    """
    return _render_full(scene, pose, intr, cfg, True)


def contract_pose_gradient(jac: np.ndarray, adj_rgb, adj_depth) -> np.ndarray:
    g = np.zeros(6)
    if adj_rgb is not None:
        g += np.einsum("rc,rcq->q", np.asarray(adj_rgb).reshape(-1, 3), jac[:, :3, :])
    if adj_depth is not None:
        g += np.asarray(adj_depth).reshape(-1) @ jac[:, 3, :]
    return g


def render_with_pose_gradient(scene, pose, intr, cfg, adj_rgb=None, adj_depth=None) -> np.ndarray:
    """d(loss)/d(tangent at ``pose``) given upstream gradients on the rendered images."""
    _, jac = render_with_jacobian(scene, pose, intr, cfg)
    return contract_pose_gradient(jac, adj_rgb, adj_depth)


def grid_gradient(scene: VoxelScene, pose: Pose, dirs, cfg: RenderConfig, adj_rgb, adj_depth):
    """d(loss)/d(occ) and d(loss)/d(color) for a ray batch.

    Cells flagged as empty by the skip mask receive no gradient.
    """
    grid, skip, bmin, inv_sp = scene._kernel_args()
    out = np.zeros(grid.shape)
    K.grid_backward(grid, skip, bmin, inv_sp, pose.rotation_matrix(), pose.translation,
                    np.ascontiguousarray(dirs, dtype=np.float64), sample_depths(cfg),
                    np.asarray(cfg.background, dtype=np.float64), float(cfg.min_weight),
                    np.ascontiguousarray(adj_rgb, dtype=np.float64).reshape(-1, 3),
                    np.ascontiguousarray(adj_depth, dtype=np.float64).reshape(-1), out)
    return out[..., 0], out[..., 1:]
