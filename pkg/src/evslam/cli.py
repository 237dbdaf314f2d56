"""Command-line entry point: dataset generation, event simulation, tracking, evaluation, ablation, plots."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, RunConfig, RunLog, apply_thread_override, load_run_config, output_dir, save_run_config
from .core import downscale
from .evaluation import (MetricsReport, Trajectory, ablation_summary, ate_rmse, depth_l1, psnr,
                         surface_metrics)
from .event_predictor import PredictorParams
from .event_sim import EventSimParams, simulate_sequence
from .renderer import RenderConfig, render
from .synthetic import (empty_like, generate_dataset, make_room_scene, make_slab_scene, make_trajectory,
                        replica_like_intrinsics)
from .tracker import run_sequence

SCENES = ("room", "slab")
TRAJECTORIES = ("oscillate", "line", "static")


class CliError(Exception):
    """Failure reported as a structured diagnostic with a nonzero exit code."""


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool_list(text: str) -> list:
    return [_on_off(x) for x in text.split(",") if x]


# --- operations (also used by tests) ---------------------------------------------


def make_scene(kind: str, seed: int):
    if kind == "room":
        return make_room_scene(seed)
    if kind == "slab":
        return make_slab_scene(textured=True, seed=seed)
    raise CliError(f"unknown scene preset {kind!r}")


def gen_dataset(out, scene: str = "room", trajectory: str = "oscillate", frames: int = 200, seed: int = 0,
                width: int = 600, height: int = 340, speed: float = 0.01, sim: EventSimParams = EventSimParams()):
    gt_scene = make_scene(scene, seed)
    center = (0.0, 0.0, -0.3) if scene == "room" else (0.0, 0.0, 0.0)
    poses = make_trajectory(frames, seed=seed, speed=speed, kind=trajectory, center=center)
    intr = replica_like_intrinsics(width, height)
    data = generate_dataset(gt_scene, poses, intr, RenderConfig(), sim)
    return formats.write_dataset(out, data, intr, sim, name=f"{scene}-{trajectory}-{seed}", scene=gt_scene)


def sim_events(rgb_dir, out, sim: EventSimParams = EventSimParams()) -> int:
    paths = sorted(Path(rgb_dir).glob("*.png"))
    if not paths:
        raise CliError(f"no PNG frames in {rgb_dir}")
    frames = [formats.read_rgb(p) for p in paths]
    events = simulate_sequence(frames, sim)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for p, ev in zip(paths, events):
        formats.write_event_image(out / (p.stem + ".evimg"), ev)
    return len(events)


def _initial_scene(manifest, root):
    if manifest.scene is None:
        raise CliError("dataset has no scene file to take map bounds from")
    return empty_like(formats.read_scene(Path(root) / manifest.scene))


def track(dataset, cfg: RunConfig, out, max_frames=None):
    """Run the tracker; writes trajectory.txt, scene.npz, report.json, config.yaml and run.jsonl."""
    manifest, frames, intr = formats.read_dataset(dataset)
    if max_frames is not None:
        frames = frames[:max_frames]
    slam = cfg.to_slam(PredictorParams.from_sim(manifest.sim()))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(out / "config.yaml", cfg)
    with RunLog(out / "run.jsonl") as log:
        log.write("start", dataset=str(dataset), frames=len(frames), config=cfg.to_dict())
        res = run_sequence(frames, intr, _initial_scene(manifest, Path(dataset)), slam,
                           callback=lambda fr: log.write("frame", **{k: v for k, v in fr.to_dict().items()
                                                                      if k != "loss_trace"}))
        log.write("done", success=res.report.success, failed_at=res.report.failed_at)
    formats.write_trajectory(out / "trajectory.txt", Trajectory.from_pairs(res.trajectory))
    formats.write_trajectory(out / "groundtruth.txt", Trajectory.from_pairs((f.timestamp, f.gt_pose) for f in frames))
    formats.write_scene(out / "scene.npz", res.scene)
    (out / "report.json").write_text(json.dumps(res.report.to_dict(), indent=1))
    return res


def evaluate(run_dir, dataset, view_stride: int = 10, surface_points: int = 20000) -> MetricsReport:
    """Metrics for a finished run; writes metrics.json into ``run_dir``."""
    run_dir = Path(run_dir)
    manifest, frames, intr = formats.read_dataset(dataset)
    est = formats.read_trajectory(run_dir / "trajectory.txt")
    report = json.loads((run_dir / "report.json").read_text())
    cfg = load_run_config(run_dir / "config.yaml") if (run_dir / "config.yaml").exists() else RunConfig()
    rc = RenderConfig(n_samples=cfg.n_samples, scale=cfg.scale, seed=cfg.seed)
    n = min(report["frames_completed"], len(est))
    gt = Trajectory(np.array([f.timestamp for f in frames]), tuple(f.gt_pose for f in frames))
    est_c, gt_c = est.head(max(n, 1)), gt.head(max(n, 1))
    recon = formats.read_scene(run_dir / "scene.npz")
    views = frames[:max(n, 1)][::view_stride]
    dl = depth_l1(recon, views, intr, rc)
    psnrs = []
    for f in views:
        out = render(recon, f.gt_pose, intr, rc)
        psnrs.append(psnr(out.rgb.data, downscale(f.rgb, rc.scale).as_float()))
    acc = comp = ratio = float("nan")
    if manifest.scene is not None:
        gt_scene = formats.read_scene(Path(dataset) / manifest.scene)
        try:
            acc, comp, ratio = surface_metrics(recon, gt_scene, surface_points, views=[f.gt_pose for f in views],
                                               intr=intr, cfg=rc)
        except ValueError:
            pass
    metrics = MetricsReport(
        ate_rmse_cm=ate_rmse(est_c, gt_c), ate_rmse_aligned_cm=ate_rmse(est_c, gt_c, align=True),
        depth_l1_cm=dl.value_cm, depth_coverage=dl.coverage, accuracy_cm=acc, completion_cm=comp,
        completion_ratio_pct=ratio, success=bool(report["success"]), frames_completed=int(report["frames_completed"]),
        psnr_db=float(np.mean(psnrs)))
    (run_dir / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1))
    return metrics


def ablate(out, taus, events, seeds, base: RunConfig, frames: int = 200, scene: str = "room",
           surface_points: int = 20000) -> dict:
    out = Path(out)
    rows = []
    for seed in seeds:
        data_dir = out / "data" / f"seed{seed}"
        if not (data_dir / formats.MANIFEST_NAME).exists():
            gen_dataset(data_dir, scene=scene, frames=frames, seed=seed)
        for tau in taus:
            for ev in events:
                cfg = base.updated(tau=tau, events=ev, seed=seed)
                run_dir = out / "runs" / f"seed{seed}_tau{tau}_{'on' if ev else 'off'}"
                track(data_dir, cfg, run_dir)
                metrics = evaluate(run_dir, data_dir, surface_points=surface_points)
                rows.append(({"tau": tau, "events": ev, "seed": seed}, None, metrics))
    return ablation_summary(rows, out)


def plot(inputs, out) -> list:
    """SVG charts: a top-down trajectory plot per run directory, success rates per ablation summary."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for item in map(Path, inputs):
        if (item / "trajectory.txt").exists():
            est = formats.read_trajectory(item / "trajectory.txt").positions()
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.plot(est[:, 0], est[:, 2], label="estimate")
            gt_path = item / "groundtruth.txt"
            if gt_path.exists():
                gt = formats.read_trajectory(gt_path).positions()
                ax.plot(gt[:, 0], gt[:, 2], "--", label="ground truth")
            ax.set_xlabel("x [m]")
            ax.set_ylabel("z [m]")
            ax.set_aspect("equal", adjustable="datalim")
            ax.legend()
            target = out / f"{item.name}_trajectory.svg"
        elif (item / "ablation.json").exists() or item.name == "ablation.json":
            src = item if item.is_file() else item / "ablation.json"
            hist = json.loads(src.read_text())["histogram"]
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.bar(range(len(hist["labels"])), hist["success_rate_pct"])
            ax.set_xticks(range(len(hist["labels"])), hist["labels"], rotation=30, ha="right")
            ax.set_ylabel("success rate [%]")
            ax.set_ylim(0, 100)
            target = out / "success_rate.svg"
        else:
            raise CliError(f"{item}: neither a run directory nor an ablation summary")
        fig.tight_layout()
        fig.savefig(target, format="svg")
        plt.close(fig)
        written.append(target)
    return written


# --- argument parsing ------------------------------------------------------------


def _sim_args(p):
    p.add_argument("--c-pos", type=float, default=0.1)
    p.add_argument("--c-neg", type=float, default=0.1)
    p.add_argument("--t-ref", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--frame-dt", type=float, default=1.0 / 30.0)


def _sim_from(ns) -> EventSimParams:
    return EventSimParams(c_pos=ns.c_pos, c_neg=ns.c_neg, t_ref=ns.t_ref, epsilon=ns.epsilon, frame_dt=ns.frame_dt)


def _run_args(p):
    p.add_argument("--config", help="YAML run config; flags override its fields")
    p.add_argument("--tau", type=int)
    p.add_argument("--events", type=_on_off, help="on|off")
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("sequential", "concurrent"))
    p.add_argument("--tracking-iters", type=int)
    p.add_argument("--mapping-iters", type=int)
    p.add_argument("--on-failure", choices=("abort", "continue"))


def _config_from(ns) -> RunConfig:
    cfg = load_run_config(ns.config)
    return cfg.updated(tau=ns.tau, events=ns.events, scale=ns.scale, seed=ns.seed, mode=ns.mode,
                       tracking_iters=ns.tracking_iters, mapping_iters=ns.mapping_iters, on_failure=ns.on_failure)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evslam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="render a synthetic RGB-D + event sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", choices=SCENES, default="room")
    p.add_argument("--trajectory", choices=TRAJECTORIES, default="oscillate")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=600)
    p.add_argument("--height", type=int, default=340)
    p.add_argument("--speed", type=float, default=0.01, help="mean camera speed in m/frame")
    _sim_args(p)

    p = sub.add_parser("sim-events", help="simulate event images for a directory of RGB frames")
    p.add_argument("--rgb-dir", required=True)
    p.add_argument("--out", required=True)
    _sim_args(p)

    p = sub.add_parser("track", help="track a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--max-frames", type=int)
    _run_args(p)

    p = sub.add_parser("eval", help="compute metrics for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view-stride", type=int, default=10)
    p.add_argument("--surface-points", type=int, default=20000)

    p = sub.add_parser("ablate", help="frame-gap x events x seeds matrix")
    p.add_argument("--out")
    p.add_argument("--taus", type=_int_list, default=[1, 3, 5])
    p.add_argument("--event-settings", type=_bool_list, default=[True, False], help="e.g. on,off")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--scene", choices=SCENES, default="room")
    p.add_argument("--surface-points", type=int, default=20000)
    _run_args(p)

    p = sub.add_parser("plot", help="SVG charts from run directories or ablation summaries")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    return ap


def _diag(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        apply_thread_override()
        if ns.command == "gen-dataset":
            out = output_dir(ns.out)
            m = gen_dataset(out, ns.scene, ns.trajectory, ns.frames, ns.seed, ns.width, ns.height, ns.speed,
                            _sim_from(ns))
            print(json.dumps({"dataset": str(out), "frames": m.n_frames}))
        elif ns.command == "sim-events":
            n = sim_events(ns.rgb_dir, output_dir(ns.out), _sim_from(ns))
            print(json.dumps({"event_images": n}))
        elif ns.command == "track":
            out = output_dir(ns.out or "run")
            res = track(ns.dataset, _config_from(ns), out, ns.max_frames)
            print(json.dumps({"run": str(out), "success": res.report.success,
                              "frames_completed": res.report.frames_completed}))
        elif ns.command == "eval":
            m = evaluate(ns.run, ns.dataset, ns.view_stride, ns.surface_points)
            print(json.dumps(m.to_dict()))
        elif ns.command == "ablate":
            summary = ablate(output_dir(ns.out or "ablation"), ns.taus, ns.event_settings, ns.seeds,
                             _config_from(ns), ns.frames, ns.scene, ns.surface_points)
            print(json.dumps(summary["rows"]))
        elif ns.command == "plot":
            for path in plot(ns.inputs, ns.out):
                print(path)
    except (CliError, ConfigError, formats.FormatError) as exc:
        _diag(type(exc).__name__, str(exc))
        return 1
    except FileNotFoundError as exc:
        _diag("FileNotFoundError", str(exc))
        return 1
    except ValueError as exc:
        _diag("ValueError", str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
