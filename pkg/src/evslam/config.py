"""Run configuration (YAML), environment overrides and the JSON-lines run log."""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .event_predictor import PredictorParams
from .losses import GaussianKernel, LossWeights
from .renderer import RenderConfig
from .tracker import ScheduleConfig, SlamConfig

ENV_OUTPUT_DIR = "EVSLAM_OUTPUT_DIR"
ENV_THREADS = "EVSLAM_THREADS"


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    tau: int = 5
    events: bool = True
    scale: float = 0.3
    n_samples: int = 64
    kernel_size: int = 9
    kernel_sigma: float = 1.7
    kernel_schedule: list = field(default_factory=list)
    lambda_event: float = 0.025
    lambda_photo: float = 1.0
    lambda_depth: float = 1.0
    lr_pose: float = 1e-3
    lr_grid: float = 1e-2
    lr_color: float = 0.25
    tracking_iters: int = 20
    mapping_iters: int = 60
    mapping_every: Optional[int] = None
    mapping_rays: int = 2048
    mode: str = "sequential"
    seed: int = 0
    on_failure: str = "abort"
    max_depth_l1: float = 0.15
    patience: int = 3

    def to_slam(self, predictor: Optional[PredictorParams] = None) -> SlamConfig:
        """Build and validate the tracker configuration."""
        try:
            schedule = ScheduleConfig(
                tau=self.tau, tracking_iters=self.tracking_iters, mapping_iters=self.mapping_iters,
                mapping_every=self.mapping_every, lr_pose=self.lr_pose, lr_grid=self.lr_grid,
                lr_color=self.lr_color, events=self.events, mode=self.mode,
                kernel_schedule=tuple(self.kernel_schedule), mapping_rays=self.mapping_rays, seed=self.seed,
                on_failure=self.on_failure, max_depth_l1=self.max_depth_l1, patience=self.patience)
            return SlamConfig(
                schedule=schedule,
                render=RenderConfig(n_samples=self.n_samples, scale=self.scale, seed=self.seed),
                weights=LossWeights(self.lambda_event, self.lambda_photo, self.lambda_depth),
                kernel=GaussianKernel(self.kernel_size, self.kernel_sigma),
                predictor=predictor or PredictorParams())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.to_slam()
        return cfg

    def updated(self, **overrides) -> "RunConfig":
        """Copy with the non-None overrides applied, re-validated."""
        cfg = replace(self, **{k: v for k, v in overrides.items() if v is not None})
        cfg.to_slam()
        return cfg


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def output_dir(default) -> Path:
    """``default`` unless the output-dir environment variable is set."""
    return Path(os.environ.get(ENV_OUTPUT_DIR) or default)


def apply_thread_override() -> Optional[int]:
    """Cap numba's worker threads from the environment; returns the value applied."""
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1")
    import numba

    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


class RunLog:
    """Append-only JSON-lines log; one object per line with a wall-clock stamp."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def write(self, event: str, **payload) -> None:
        rec = {"time": time.time(), "event": event, **payload}
        self._fh.write(json.dumps(rec, default=_jsonable) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _jsonable(obj):
    try:
        import numpy as np

        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
    except ImportError:
        pass
    return str(obj)


__all__ = [
    "ConfigError",
    "RunConfig",
    "RunLog",
    "load_run_config",
    "save_run_config",
    "output_dir",
    "apply_thread_override",
    "ENV_OUTPUT_DIR",
    "ENV_THREADS",
]
