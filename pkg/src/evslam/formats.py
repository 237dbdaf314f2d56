"""On-disk formats: event images, trajectories, depth/RGB PNGs, scenes and dataset manifests."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, DepthImage, EventImage, Pose, RgbImage
from .event_sim import EventSimParams
from .evaluation import Trajectory
from .renderer import VoxelScene

EVENT_MAGIC = b"EVIMG01\n"
_EVENT_HEADER = struct.Struct("<IIB")
_EVENT_DTYPES = {0: np.dtype("<u4"), 1: np.dtype("<f4")}
DEPTH_SCALE = 5000.0
DEPTH_MAX_M = 65535 / DEPTH_SCALE
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    """A file does not follow its declared format."""

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


# --- event images ----------------------------------------------------------------


def encode_event_image(img: EventImage) -> bytes:
    """Serialize with u32 planes for integer counts, f32 planes for soft counts."""
    if img.is_integer:
        if max(int(img.pos.max()), int(img.neg.max())) > 0xFFFFFFFF:
            raise ValueError("event count exceeds u32 range")
        tag = 0
    else:
        tag = 1
    dt = _EVENT_DTYPES[tag]
    return (EVENT_MAGIC + _EVENT_HEADER.pack(img.width, img.height, tag)
            + np.ascontiguousarray(img.pos, dtype=dt).tobytes()
            + np.ascontiguousarray(img.neg, dtype=dt).tobytes())


def decode_event_image(buf: bytes, path="<bytes>") -> EventImage:
    head = len(EVENT_MAGIC) + _EVENT_HEADER.size
    if len(buf) < len(EVENT_MAGIC) or buf[: len(EVENT_MAGIC)] != EVENT_MAGIC:
        raise FormatError(path, f"bad magic {buf[:len(EVENT_MAGIC)]!r}, expected {EVENT_MAGIC!r}")
    if len(buf) < head:
        raise FormatError(path, f"truncated header: expected {head} bytes, got {len(buf)}")
    w, h, tag = _EVENT_HEADER.unpack_from(buf, len(EVENT_MAGIC))
    if tag not in _EVENT_DTYPES:
        raise FormatError(path, f"unknown dtype tag {tag}")
    if w < 1 or h < 1:
        raise FormatError(path, f"invalid dimensions {w}x{h}")
    dt = _EVENT_DTYPES[tag]
    plane = w * h * dt.itemsize
    expected = head + 2 * plane
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "trailing data"
        raise FormatError(path, f"{kind}: expected {expected} bytes, got {len(buf)}")
    pos = np.frombuffer(buf, dtype=dt, count=w * h, offset=head).reshape(h, w)
    neg = np.frombuffer(buf, dtype=dt, count=w * h, offset=head + plane).reshape(h, w)
    native = np.uint32 if tag == 0 else np.float32
    try:
        return EventImage(pos.astype(native), neg.astype(native))
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None


def write_event_image(path, img: EventImage) -> None:
    Path(path).write_bytes(encode_event_image(img))


def read_event_image(path) -> EventImage:
    return decode_event_image(Path(path).read_bytes(), path)


# --- trajectories ----------------------------------------------------------------


def format_pose_line(timestamp: float, pose: Pose) -> str:
    vals = list(pose.translation) + list(pose.rotation)
    return f"{timestamp:.9f} " + " ".join(f"{v:.17g}" for v in vals)


def write_trajectory(path, traj: Trajectory, header: Optional[str] = None) -> None:
    """TUM layout: ``timestamp tx ty tz qx qy qz qw`` per line."""
    lines = [f"# {header}"] if header else []
    lines += [format_pose_line(t, p) for t, p in zip(traj.timestamps, traj.poses)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_trajectory(text: str, path="<text>") -> Trajectory:
    stamps, poses = [], []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(path, f"expected 8 fields, got {len(parts)}", no)
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise FormatError(path, f"non-numeric field in {line!r}", no) from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(path, "non-finite value", no)
        try:
            poses.append(Pose(np.array(vals[4:8]), np.array(vals[1:4])))
        except ValueError as exc:
            raise FormatError(path, str(exc), no) from None
        stamps.append(vals[0])
    try:
        return Trajectory(np.array(stamps), tuple(poses))
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None


def read_trajectory(path) -> Trajectory:
    return parse_trajectory(Path(path).read_text(), path)


# --- depth and color PNGs --------------------------------------------------------


def depth_to_u16(depth: DepthImage) -> np.ndarray:
    """Meters to TUM-style u16 (value = depth * 5000). Tiny positive depths stay valid as 1."""
    d = np.asarray(depth.data, dtype=np.float64)
    if d.max() > DEPTH_MAX_M:
        raise ValueError(f"depth {d.max():.4f} m exceeds the {DEPTH_MAX_M:.3f} m storable range")
    q = np.rint(d * DEPTH_SCALE)
    q = np.where((d > 0) & (q == 0), 1.0, q)
    return q.astype(np.uint16)


def u16_to_depth(raw: np.ndarray) -> DepthImage:
    return DepthImage(np.asarray(raw, dtype=np.float64) / DEPTH_SCALE)


def write_depth(path, depth: DepthImage) -> None:
    Image.fromarray(depth_to_u16(depth)).save(path, format="PNG")


def read_depth(path) -> DepthImage:
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.ndim != 2:
        raise FormatError(path, f"depth image must be single-channel, got shape {raw.shape}")
    if raw.dtype != np.uint16:
        if raw.dtype.kind not in "iu" or raw.min() < 0 or raw.max() > 65535:
            raise FormatError(path, f"depth image must be 16-bit, got {raw.dtype}")
        raw = raw.astype(np.uint16)
    return u16_to_depth(raw)


def write_rgb(path, img: RgbImage) -> None:
    data = img.data if img.data.dtype == np.uint8 else np.rint(img.data).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_rgb(path) -> RgbImage:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(path, f"expected an RGB image, got mode {im.mode}")
        return RgbImage(np.array(im))


# --- scenes ----------------------------------------------------------------------


def write_scene(path, scene: VoxelScene) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, bounds_min=scene.bounds_min, bounds_max=scene.bounds_max, occ=scene.occ, color=scene.color)


def read_scene(path) -> VoxelScene:
    try:
        with np.load(path) as z:
            return VoxelScene(z["bounds_min"], z["bounds_max"], z["occ"], z["color"])
    except KeyError as exc:
        raise FormatError(path, f"missing array {exc}") from None


# --- datasets --------------------------------------------------------------------


@dataclass
class FrameFiles:
    rgb: str
    depth: str
    events: str


@dataclass
class DatasetManifest:
    name: str
    n_frames: int
    intrinsics: dict
    frame_dt: float
    sim_params: dict
    trajectory: str
    frames: list = field(default_factory=list)  # [FrameFiles]
    luminance: str = "Y = 0.299 R + 0.587 G + 0.114 B on [0, 255]"
    t_start: float = 0.0
    scene: Optional[str] = None  # ground-truth scene (npz), used for map bounds and surface metrics
    version: int = MANIFEST_VERSION

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(**self.intrinsics)

    def sim(self) -> EventSimParams:
        return EventSimParams(**self.sim_params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, path="<manifest>") -> "DatasetManifest":
        try:
            frames = [FrameFiles(**f) for f in d["frames"]]
            m = cls(**{**d, "frames": frames})
        except (KeyError, TypeError) as exc:
            raise FormatError(path, f"malformed manifest: {exc}") from None
        if m.version != MANIFEST_VERSION:
            raise FormatError(path, f"unsupported manifest version {m.version}")
        return m


def _check(cond: bool, path, msg: str) -> None:
    if not cond:
        raise FormatError(path, msg)


def validate_manifest(manifest: DatasetManifest, root) -> None:
    """Check counts, file existence and image dimensions before anything runs."""
    root = Path(root)
    path = root / MANIFEST_NAME
    _check(manifest.n_frames >= 1, path, "manifest declares no frames")
    _check(len(manifest.frames) == manifest.n_frames, path,
           f"{len(manifest.frames)} frame entries for {manifest.n_frames} declared frames")
    try:
        intr = manifest.camera()
        manifest.sim()
    except (TypeError, ValueError) as exc:
        raise FormatError(path, f"invalid camera or simulator parameters: {exc}") from None
    if manifest.scene is not None:
        _check((root / manifest.scene).is_file(), path, f"missing scene file {manifest.scene}")
    traj_path = root / manifest.trajectory
    _check(traj_path.is_file(), path, f"missing trajectory file {manifest.trajectory}")
    traj = read_trajectory(traj_path)
    _check(len(traj) == manifest.n_frames, traj_path, f"{len(traj)} poses for {manifest.n_frames} frames")
    for k, ff in enumerate(manifest.frames):
        for kind in ("rgb", "depth", "events"):
            _check((root / getattr(ff, kind)).is_file(), path, f"frame {k}: missing {kind} file {getattr(ff, kind)}")
        for kind in ("rgb", "depth"):
            with Image.open(root / getattr(ff, kind)) as im:
                _check(im.size == (intr.width, intr.height), root / getattr(ff, kind),
                       f"size {im.size[0]}x{im.size[1]}, manifest says {intr.width}x{intr.height}")
        with open(root / ff.events, "rb") as fh:
            head = fh.read(len(EVENT_MAGIC) + _EVENT_HEADER.size)
        _check(head[: len(EVENT_MAGIC)] == EVENT_MAGIC and len(head) == len(EVENT_MAGIC) + _EVENT_HEADER.size,
               root / ff.events, "not an event image")
        w, h, _ = _EVENT_HEADER.unpack_from(head, len(EVENT_MAGIC))
        _check((w, h) == (intr.width, intr.height), root / ff.events,
               f"size {w}x{h}, manifest says {intr.width}x{intr.height}")


def write_dataset(root, frames, intr: CameraIntrinsics, sim_params: EventSimParams,
                  name: str = "sequence", scene: Optional[VoxelScene] = None) -> DatasetManifest:
    """Write frame records (RGB, depth, events, GT poses) plus a manifest into ``root``."""
    root = Path(root)
    for sub in ("rgb", "depth", "events"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    entries = []
    for f in frames:
        ff = FrameFiles(f"rgb/{f.frame_id:06d}.png", f"depth/{f.frame_id:06d}.png", f"events/{f.frame_id:06d}.evimg")
        write_rgb(root / ff.rgb, f.rgb)
        write_depth(root / ff.depth, f.depth)
        write_event_image(root / ff.events, f.gt_events)
        entries.append(ff)
    traj = Trajectory(np.array([f.timestamp for f in frames]), tuple(f.gt_pose for f in frames))
    write_trajectory(root / "groundtruth.txt", traj, "timestamp tx ty tz qx qy qz qw")
    if scene is not None:
        write_scene(root / "scene.npz", scene)
    manifest = DatasetManifest(
        name=name, n_frames=len(frames), intrinsics=asdict(intr), frame_dt=sim_params.frame_dt,
        sim_params=asdict(sim_params), trajectory="groundtruth.txt", frames=entries,
        t_start=float(frames[0].timestamp) if frames else 0.0,
        scene="scene.npz" if scene is not None else None)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(path, "manifest not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON: {exc}") from None
    return DatasetManifest.from_dict(d, path)


def read_dataset(root, validate: bool = True):
    """``(manifest, frames, intrinsics)`` for a dataset directory."""
    from .synthetic import FrameRecord

    root = Path(root)
    if root.is_file():
        root = root.parent
    manifest = read_manifest(root)
    if validate:
        validate_manifest(manifest, root)
    traj = read_trajectory(root / manifest.trajectory)
    frames = []
    for k, (ff, ts, pose) in enumerate(zip(manifest.frames, traj.timestamps, traj.poses)):
        frames.append(FrameRecord(k, float(ts), read_rgb(root / ff.rgb), read_depth(root / ff.depth),
                                  read_event_image(root / ff.events), pose))
    return manifest, frames, manifest.camera()


__all__ = [
    "FormatError",
    "EVENT_MAGIC",
    "DEPTH_SCALE",
    "DEPTH_MAX_M",
    "encode_event_image",
    "decode_event_image",
    "write_event_image",
    "read_event_image",
    "format_pose_line",
    "write_trajectory",
    "parse_trajectory",
    "read_trajectory",
    "depth_to_u16",
    "u16_to_depth",
    "write_depth",
    "read_depth",
    "write_rgb",
    "read_rgb",
    "write_scene",
    "read_scene",
    "FrameFiles",
    "DatasetManifest",
    "validate_manifest",
    "write_dataset",
    "read_manifest",
    "read_dataset",
]
