"""Run configuration: one JSON file covering every tunable in the package.

Parsing is strict. Unknown keys are rejected rather than ignored so a typo
cannot silently fall back to a default, and every value is validated against
its constraint at load time. Serialization always materializes the full
default set, which makes the canonical form (sorted keys) hashable for
reproducibility manifests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

from .denoiser import DenoiserConfig
from .scenes import TrajectorySpec


class ConfigError(ValueError):
    """Base class so the CLI can map all config failures to one exit code."""


class ParseError(ConfigError):
    """File unreadable or not valid JSON."""


class UnknownKey(ConfigError):
    """A key not in the schema (typo guard)."""


class InvalidValue(ConfigError):
    """A value violating its documented constraint."""


@dataclass(frozen=True)
class ScheduleConfig:
    train_steps: int = 1000
    inference_steps: int = 250
    variance_preserving: bool = True


@dataclass(frozen=True)
class SamplerSettings:
    t_prime: int = 100
    window: int = 0
    resample_per_step: bool = True


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 64
    eval_scenes: int = 8
    frames_per_scene: int = 8
    height: int = 16
    width: int = 16
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    epipolar: bool = True
    log_every: int = 100


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = ""
    out_dir: str = ""
    ckpt: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SCALARS = {int: "an integer", float: "a number", bool: "a boolean", str: "a string"}


def _coerce(value, typ, path):
    if typ is bool:
        if not isinstance(value, bool):
            raise InvalidValue(f"{path}: expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidValue(f"{path}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidValue(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise InvalidValue(f"{path}: expected a string, got {value!r}")
        return value
    if typ is tuple:
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise InvalidValue(f"{path}: expected a list of integers, got {value!r}")
        return tuple(value)
    raise InvalidValue(f"{path}: unsupported type {typ}")


def _build(dc_type, data, path):
    """Fill a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InvalidValue(f"{path}: expected an object, got {data!r}")
    spec = {f.name: f for f in fields(dc_type)}
    for key in data:
        if key not in spec:
            raise UnknownKey(f"{path}.{key}: unknown key (valid: {sorted(spec)})")
    kwargs = {}
    for name, f in spec.items():
        if name not in data:
            continue
        base = f.type if isinstance(f.type, type) else None
        if base is None:
            # dataclass fields carry string annotations under future-import
            base = {"int": int, "float": float, "bool": bool, "str": str,
                    "tuple": tuple}.get(str(f.type).split("[")[0], None)
        if base is None:
            raise InvalidValue(f"{path}.{name}: unsupported field")
        kwargs[name] = _coerce(data[name], base, f"{path}.{name}")
    try:
        return dc_type(**kwargs)
    except ValueError as err:
        raise InvalidValue(f"{path}: {err}") from None


def _from_dict(data):
    if not isinstance(data, dict):
        raise InvalidValue(f"top level: expected an object, got {data!r}")
    known = {"seed", "schedule", "sampler", "denoiser", "dataset", "training", "paths"}
    for key in data:
        if key not in known:
            raise UnknownKey(f"{key}: unknown key (valid: {sorted(known)})")

    seed = _coerce(data.get("seed", 0), int, "seed")
    schedule = _build(ScheduleConfig, data.get("schedule", {}), "schedule")
    sampler = _build(SamplerSettings, data.get("sampler", {}), "sampler")
    denoiser = _build(DenoiserConfig, data.get("denoiser", {}), "denoiser")
    training = _build(TrainingConfig, data.get("training", {}), "training")
    paths = _build(PathsConfig, data.get("paths", {}), "paths")

    ds_data = dict(data.get("dataset", {})) if isinstance(data.get("dataset", {}), dict) \
        else data.get("dataset", {})
    traj_data = {}
    if isinstance(ds_data, dict) and "trajectory" in ds_data:
        traj_data = ds_data.pop("trajectory")
    dataset = _build(DatasetConfig, ds_data, "dataset")
    trajectory = _build(TrajectorySpec, traj_data, "dataset.trajectory")
    dataset = DatasetConfig(n_scenes=dataset.n_scenes, eval_scenes=dataset.eval_scenes,
                            frames_per_scene=dataset.frames_per_scene,
                            height=dataset.height, width=dataset.width,
                            trajectory=trajectory)

    cfg = RunConfig(seed=seed, schedule=schedule, sampler=sampler, denoiser=denoiser,
                    dataset=dataset, training=training, paths=paths)
    _validate(cfg)
    return cfg


def _require(cond, message):
    if not cond:
        raise InvalidValue(message)


def _validate(cfg):
    s = cfg.schedule
    _require(s.train_steps >= 1, f"schedule.train_steps must be >= 1, got {s.train_steps}")
    _require(1 <= s.inference_steps <= s.train_steps,
             f"schedule.inference_steps must lie in [1, {s.train_steps}], got {s.inference_steps}")
    _require(0 <= cfg.sampler.t_prime <= s.inference_steps,
             f"sampler.t_prime must lie in [0, {s.inference_steps}], got {cfg.sampler.t_prime}")
    _require(cfg.sampler.window >= 0,
             f"sampler.window must be >= 0 (0 means all priors), got {cfg.sampler.window}")
    d = cfg.dataset
    _require(d.n_scenes >= 1, f"dataset.n_scenes must be >= 1, got {d.n_scenes}")
    _require(d.eval_scenes >= 0, f"dataset.eval_scenes must be >= 0, got {d.eval_scenes}")
    _require(d.frames_per_scene >= 2,
             f"dataset.frames_per_scene must be >= 2, got {d.frames_per_scene}")
    _require(d.height >= 1 and d.width >= 1,
             f"dataset.height/width must be positive, got {d.height}x{d.width}")
    _require(d.height == cfg.denoiser.image_size and d.width == cfg.denoiser.image_size,
             f"dataset frames are {d.height}x{d.width} but the denoiser expects "
             f"{cfg.denoiser.image_size}x{cfg.denoiser.image_size}")
    t = cfg.training
    _require(t.steps >= 1, f"training.steps must be >= 1, got {t.steps}")
    _require(t.batch_size >= 1, f"training.batch_size must be >= 1, got {t.batch_size}")
    _require(t.lr > 0, f"training.lr must be > 0, got {t.lr}")
    _require(t.log_every >= 1, f"training.log_every must be >= 1, got {t.log_every}")


def parse_config(path):
    """Load, validate and default-complete a JSON config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ParseError(f"{path}: {err}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line {err.lineno} col {err.colno}: {err.msg}") from None
    return _from_dict(data)


def config_from_dict(data):
    """Same contract as parse_config, for already-decoded objects."""
    return _from_dict(data)


def to_dict(cfg):
    """Full config as plain data, every default materialized."""
    return {
        "seed": cfg.seed,
        "schedule": {"train_steps": cfg.schedule.train_steps,
                     "inference_steps": cfg.schedule.inference_steps,
                     "variance_preserving": cfg.schedule.variance_preserving},
        "sampler": {"t_prime": cfg.sampler.t_prime,
                    "window": cfg.sampler.window,
                    "resample_per_step": cfg.sampler.resample_per_step},
        "denoiser": {"image_size": cfg.denoiser.image_size,
                     "in_channels": cfg.denoiser.in_channels,
                     "base_channels": cfg.denoiser.base_channels,
                     "channel_multiples": list(cfg.denoiser.channel_multiples),
                     "res_blocks_per_level": cfg.denoiser.res_blocks_per_level,
                     "attention_resolutions": list(cfg.denoiser.attention_resolutions),
                     "head_channels": cfg.denoiser.head_channels},
        "dataset": {"n_scenes": cfg.dataset.n_scenes,
                    "eval_scenes": cfg.dataset.eval_scenes,
                    "frames_per_scene": cfg.dataset.frames_per_scene,
                    "height": cfg.dataset.height,
                    "width": cfg.dataset.width,
                    "trajectory": {
                        "forward_step": cfg.dataset.trajectory.forward_step,
                        "lateral_amp": cfg.dataset.trajectory.lateral_amp,
                        "vertical_amp": cfg.dataset.trajectory.vertical_amp,
                        "yaw_amp_deg": cfg.dataset.trajectory.yaw_amp_deg,
                        "pitch_amp_deg": cfg.dataset.trajectory.pitch_amp_deg,
                        "pan_rate_deg": cfg.dataset.trajectory.pan_rate_deg}},
        "training": {"steps": cfg.training.steps,
                     "batch_size": cfg.training.batch_size,
                     "lr": cfg.training.lr,
                     "epipolar": cfg.training.epipolar,
                     "log_every": cfg.training.log_every},
        "paths": {"data_dir": cfg.paths.data_dir,
                  "out_dir": cfg.paths.out_dir,
                  "ckpt": cfg.paths.ckpt},
    }


def to_json(cfg):
    """Canonical serialization: sorted keys, stable separators."""
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """sha256 of the canonical serialization."""
    return hashlib.sha256(to_json(cfg).encode("utf-8")).hexdigest()
