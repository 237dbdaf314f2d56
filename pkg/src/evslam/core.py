"""Image containers, pinhole camera, rigid poses and resampling helpers.

Quaternions are stored scalar-last, ``(qx, qy, qz, qw)``, which is also the
order used by the trajectory text format.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# floor() guard: 1200 * 0.15 evaluates to 180.00000000000003, 0.29 * 100 to 28.999...
_DIM_EPS = 1e-9


def _frozen(arr, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Three-channel image, values in [0, 255], shape (height, width, 3).

    Integer storage (uint8) is accepted for datasets; arithmetic always
    goes through ``as_float``.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"RgbImage expects (H, W, 3) data, got {data.shape}")
        if data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 255.0:
                raise ValueError("RgbImage values must lie in [0, 255]")
        elif data.dtype != np.uint8:
            data = data.astype(np.float64)
            if data.min() < 0.0 or data.max() > 255.0:
                raise ValueError("RgbImage values must lie in [0, 255]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True, eq=False)
class GrayImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"GrayImage expects (H, W) data, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("GrayImage values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Depth in meters along the optical axis; 0 marks an invalid pixel."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"DepthImage expects (H, W) data, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0:
            raise ValueError("DepthImage values must be finite and >= 0")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True, eq=False)
class EventImage:
    """Per-pixel positive and negative event counts over one interval.

    Ground-truth images carry unsigned integer planes; predicted images
    carry real-valued (soft) counts.
    """

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos)
        neg = np.asarray(self.neg)
        if pos.shape != neg.shape or pos.ndim != 2 or min(pos.shape) < 1:
            raise ValueError(f"event planes must share a 2-D shape, got {pos.shape} and {neg.shape}")
        for plane in (pos, neg):
            if plane.dtype.kind == "f":
                if not np.all(np.isfinite(plane)) or plane.min() < 0.0:
                    raise ValueError("event counts must be finite and >= 0")
            elif plane.dtype.kind == "i":
                if plane.min() < 0:
                    raise ValueError("event counts must be >= 0")
            elif plane.dtype.kind != "u":
                raise ValueError(f"unsupported event dtype {plane.dtype}")
        object.__setattr__(self, "pos", _frozen(pos))
        object.__setattr__(self, "neg", _frozen(neg))

    @classmethod
    def zeros(cls, height: int, width: int, dtype=np.uint32) -> "EventImage":
        return cls(np.zeros((height, width), dtype), np.zeros((height, width), dtype))

    @property
    def height(self) -> int:
        return self.pos.shape[0]

    @property
    def width(self) -> int:
        return self.pos.shape[1]

    @property
    def is_integer(self) -> bool:
        return self.pos.dtype.kind in "iu" and self.neg.dtype.kind in "iu"

    def stacked(self) -> np.ndarray:
        """(2, H, W) float64 array, positive plane first."""
        return np.stack([self.pos, self.neg]).astype(np.float64)


Image = Union[RgbImage, GrayImage, DepthImage, EventImage]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera resampled to ``width`` x ``height``.

        Pixel centers map consistently with area pooling: source pixel
        center ``u`` lands at ``(u + 0.5) * width / self.width - 0.5``.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        w, h = scaled_dims(self.width, self.height, factor)
        return self.resized(w, h)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ray_directions(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape (H*W, 3), row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        x = (u.ravel() - self.cx) / self.fx
        y = (v.ravel() - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=1)


# --- quaternion helpers (scalar-last) ---------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = float(np.linalg.norm(rotvec))
    if theta < 1e-12:
        # second-order series keeps the map smooth at the origin
        half = 0.5 * rotvec
        q = np.array([half[0], half[1], half[2], 1.0 - 0.125 * theta * theta])
        return q / np.linalg.norm(q)
    axis = rotvec / theta
    s = math.sin(0.5 * theta)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * theta)])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q[3] < 0:
        q = -q
    vec = q[:3]
    s = float(np.linalg.norm(vec))
    if s < 1e-12:
        return 2.0 * vec
    theta = 2.0 * math.atan2(s, q[3])
    return vec / s * theta


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # unit quaternion, scalar-last
    translation: np.ndarray  # meters

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("rotation quaternion has zero norm")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(quat_from_matrix(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        q_inv = self.rotation * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose(q_inv, -quat_to_matrix(q_inv) @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            quat_multiply(self.rotation, other.rotation),
            self.rotation_matrix() @ other.translation + self.translation,
        )

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation_matrix().T + self.translation

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


def apply_tangent(pose: Pose, delta) -> Pose:
    """Left-multiplicative update on SO(3) x R^3.

    ``delta = (wx, wy, wz, vx, vy, vz)``: the rotation increment is an
    axis-angle vector applied in the world frame (about the camera center),
    the translation increment is added in world coordinates. Applying
    ``-delta`` afterwards restores the original pose.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise ValueError("pose tangent must be finite")
    q = quat_multiply(quat_from_rotvec(delta[:3]), pose.rotation)
    q = q / np.linalg.norm(q)
    return Pose(q, pose.translation + delta[3:])


def pose_difference(a: Pose, b: Pose) -> np.ndarray:
    """Tangent ``d`` with ``apply_tangent(b, d) == a``."""
    dq = quat_multiply(a.rotation, b.rotation * np.array([-1.0, -1.0, -1.0, 1.0]))
    return np.concatenate([rotvec_from_quat(dq), a.translation - b.translation])


def luminance(img: RgbImage) -> GrayImage:
    """ITU-R BT.601 luma."""
    y = img.as_float() @ LUMA_WEIGHTS
    lo = img.data.min(axis=2)
    hi = img.data.max(axis=2)
    # weights sum to one; clip rounding so Y stays within the channel range
    return GrayImage(np.clip(y, lo, hi))


def scaled_dims(width: int, height: int, factor: float) -> tuple[int, int]:
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"scale factor must lie in (0, 1], got {factor}")
    w = int(math.floor(width * factor + _DIM_EPS))
    h = int(math.floor(height * factor + _DIM_EPS))
    if w < 1 or h < 1:
        raise ValueError(f"scale {factor} shrinks {width}x{height} below one pixel")
    return w, h


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalized overlap weights mapping n_in source pixels onto n_out."""
    if n_in == n_out:
        return np.eye(n_in)
    ratio = n_in / n_out
    edges = np.arange(n_out + 1) * ratio
    src = np.arange(n_in)
    lo = np.maximum(edges[:-1, None], src[None, :])
    hi = np.minimum(edges[1:, None], src[None, :] + 1)
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _pool(data: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    if data.ndim == 3:
        rows = np.tensordot(py, data, axes=(1, 0))
        return np.einsum("lk,ikc->ilc", px, rows, optimize=True)
    return py @ data @ px.T


def downscale(img: Image, factor: float) -> Image:
    """Area-weighted average pooling to ``floor(dims * factor)``.

    Depth pools over valid pixels only; a destination pixel with no valid
    source coverage stays invalid.
    """
    w, h = scaled_dims(img.width, img.height, factor)
    return resize_area(img, w, h)


def resize_area(img: Image, width: int, height: int) -> Image:
    py = _pool_matrix(img.height, height)
    px = _pool_matrix(img.width, width)
    if isinstance(img, RgbImage):
        out = _pool(img.as_float(), py, px)
        return RgbImage(np.clip(out, 0.0, 255.0))
    if isinstance(img, GrayImage):
        return GrayImage(_pool(img.data, py, px))
    if isinstance(img, DepthImage):
        d = img.data.astype(np.float64)
        valid = (d > 0).astype(np.float64)
        num = _pool(d, py, px)
        den = _pool(valid, py, px)
        out = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
        return DepthImage(out)
    if isinstance(img, EventImage):
        return EventImage(
            np.clip(_pool(img.pos.astype(np.float64), py, px), 0.0, None),
            np.clip(_pool(img.neg.astype(np.float64), py, px), 0.0, None),
        )
    raise TypeError(f"cannot downscale {type(img).__name__}")
