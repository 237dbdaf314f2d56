import json

import numpy as np
import pytest
from hypothesis import given, settings

from evslam.core import DepthImage, EventImage, Pose, RgbImage
from evslam.evaluation import Trajectory
from evslam.event_sim import EventSimParams
from evslam.formats import (DEPTH_SCALE, FormatError, decode_event_image, depth_to_u16, encode_event_image,
                            format_pose_line, parse_trajectory, read_dataset, read_depth, read_event_image,
                            read_manifest, read_rgb, read_scene, read_trajectory, u16_to_depth, validate_manifest,
                            write_dataset, write_depth, write_event_image, write_rgb, write_scene,
                            write_trajectory)
from evslam.renderer import RenderConfig
from evslam.synthetic import generate_dataset, make_slab_scene, replica_like_intrinsics
from strategies import depth_images, event_images, trajectories


def test_event_image_byte_layout():
    img = EventImage(np.array([[1, 2]], np.uint32), np.array([[0, 3]], np.uint32))
    buf = encode_event_image(img)
    # magic, width, height, tag, then two planes of 2 u32 values
    assert len(buf) == 8 + 4 + 4 + 1 + 8 + 8 == 33
    assert buf[:8] == b"EVIMG01\n"
    assert buf[8:17] == bytes([2, 0, 0, 0, 1, 0, 0, 0, 0])
    assert buf[17:] == bytes([1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0])


def test_event_image_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = EventImage(rng.integers(0, 100, (5, 7)).astype(np.uint32), rng.integers(0, 100, (5, 7)).astype(np.uint32))
    write_event_image(tmp_path / "e.evimg", img)
    back = read_event_image(tmp_path / "e.evimg")
    assert back.pos.dtype == np.uint32
    assert np.array_equal(back.pos, img.pos) and np.array_equal(back.neg, img.neg)


def test_event_image_errors():
    buf = encode_event_image(EventImage.zeros(3, 4))
    with pytest.raises(FormatError, match=r"expected 113 bytes, got 100"):
        decode_event_image(buf[:100])
    with pytest.raises(FormatError, match="bad magic"):
        decode_event_image(b"EVIMG02\n" + buf[8:])
    with pytest.raises(FormatError, match="trailing"):
        decode_event_image(buf + b"\0")
    with pytest.raises(FormatError, match="dtype tag"):
        decode_event_image(buf[:16] + b"\x07" + buf[17:])
    with pytest.raises(FormatError, match="truncated header"):
        decode_event_image(buf[:12])


@settings(max_examples=300, deadline=None)
@given(event_images())
def test_event_image_fuzz(img):
    back = decode_event_image(encode_event_image(img))
    assert back.pos.dtype == img.pos.dtype
    assert back.pos.tobytes() == img.pos.tobytes() and back.neg.tobytes() == img.neg.tobytes()


def test_identity_pose_line():
    assert format_pose_line(0.0, Pose.identity()) == "0.000000000 0 0 0 0 0 0 1"


def test_trajectory_round_trip_with_comments(tmp_path):
    rng = np.random.default_rng(1)
    poses = []
    for _ in range(2000):
        q = rng.normal(size=4)
        poses.append(Pose(q / np.linalg.norm(q), rng.uniform(-10, 10, 3)))
    traj = Trajectory(np.arange(2000) / 30.0, poses)
    write_trajectory(tmp_path / "t.txt", traj, header="timestamp tx ty tz qx qy qz qw")
    assert (tmp_path / "t.txt").read_text().startswith("# ")
    back = read_trajectory(tmp_path / "t.txt")
    assert np.abs(back.timestamps - traj.timestamps).max() < 1e-9
    err = max(max(np.abs(a.translation - b.translation).max(), np.abs(a.rotation - b.rotation).max())
              for a, b in zip(back.poses, traj.poses))
    assert err < 1e-9


def test_trajectory_parse_errors_name_the_line():
    text = "# header\n0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 1\n"
    with pytest.raises(FormatError) as exc:
        parse_trajectory(text, "t.txt")
    assert exc.value.line == 3 and "t.txt:3" in str(exc.value)
    with pytest.raises(FormatError, match=":2"):
        parse_trajectory("0.0 0 0 0 0 0 0 1\n0.1 0 0 x 0 0 0 1\n")
    with pytest.raises(FormatError, match=":1"):
        parse_trajectory("0.0 0 0 0 0 0 0 0\n")
    with pytest.raises(FormatError):
        parse_trajectory("0.1 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n")


@settings(max_examples=300, deadline=None)
@given(trajectories())
def test_trajectory_fuzz(traj):
    text = "\n".join(format_pose_line(t, p) for t, p in zip(traj.timestamps, traj.poses))
    back = parse_trajectory(text)
    assert np.array_equal(back.timestamps, traj.timestamps)
    for a, b in zip(back.poses, traj.poses):
        assert np.abs(a.translation - b.translation).max() < 1e-9
        assert np.abs(a.rotation - b.rotation).max() < 1e-9


def test_depth_scale_examples(tmp_path):
    d = DepthImage(np.array([[2.0, 0.0], [1e-5, 13.107]]))
    raw = depth_to_u16(d)
    assert raw.dtype == np.uint16
    assert raw[0, 0] == 10000 and raw[0, 1] == 0 and raw[1, 0] == 1 and raw[1, 1] == 65535
    write_depth(tmp_path / "d.png", d)
    back = read_depth(tmp_path / "d.png")
    assert back.data[0, 1] == 0 and back.data[0, 0] == 2.0
    with pytest.raises(ValueError, match="exceeds"):
        depth_to_u16(DepthImage(np.array([[13.2]])))


@settings(max_examples=300, deadline=None)
@given(depth_images())
def test_depth_fuzz(depth):
    back = u16_to_depth(depth_to_u16(depth))
    assert np.abs(back.data - depth.data).max() <= 1 / DEPTH_SCALE
    assert np.array_equal(back.data == 0, depth.data == 0)


def test_rgb_and_scene_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = RgbImage(rng.integers(0, 256, (4, 6, 3)).astype(np.uint8))
    write_rgb(tmp_path / "c.png", img)
    assert np.array_equal(read_rgb(tmp_path / "c.png").data, img.data)
    s = make_slab_scene(spacing=0.5)
    write_scene(tmp_path / "s.npz", s)
    back = read_scene(tmp_path / "s.npz")
    assert np.array_equal(back.occ, s.occ) and np.array_equal(back.color, s.color)


def small_dataset(root):
    intr = replica_like_intrinsics(30, 17)
    poses = [Pose([0, 0, 0, 1], [0.02 * k, 0, 0]) for k in range(3)]
    scene = make_slab_scene(spacing=0.25)
    frames = generate_dataset(scene, poses, intr, RenderConfig(n_samples=16), EventSimParams())
    write_dataset(root, frames, intr, EventSimParams(), name="tiny", scene=scene)
    return frames


def test_dataset_round_trip(tmp_path):
    frames = small_dataset(tmp_path)
    manifest, back, intr = read_dataset(tmp_path)
    assert manifest.n_frames == 3 and manifest.name == "tiny" and (intr.width, intr.height) == (30, 17)
    for a, b in zip(frames, back):
        assert np.array_equal(a.rgb.data, b.rgb.data)
        assert np.abs(a.depth.data - b.depth.data).max() <= 1 / DEPTH_SCALE
        assert np.array_equal(a.gt_events.pos, b.gt_events.pos)
        assert np.allclose(a.gt_pose.translation, b.gt_pose.translation, atol=1e-12)


def test_manifest_validation_rejects_inconsistency(tmp_path):
    small_dataset(tmp_path)
    m = read_manifest(tmp_path)
    write_rgb(tmp_path / m.frames[1].rgb, RgbImage(np.zeros((17, 29, 3), np.uint8)))
    with pytest.raises(FormatError, match="29x17"):
        validate_manifest(m, tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["n_frames"] = 4
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="3 frame entries for 4"):
        read_dataset(tmp_path)
    d["version"] = 9
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="version"):
        read_manifest(tmp_path)
    (tmp_path / m.frames[0].events).unlink()
    with pytest.raises(FormatError, match="missing events"):
        validate_manifest(m, tmp_path)
