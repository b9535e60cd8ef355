"""Experiment configuration: a YAML file with one section per module, every
key validated, flag overrides winning over file values, and the resolved
config archived into each run directory for provenance."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baselines import HandcraftParams
from .engine import TrainConfig
from .phantoms import PRESETS, PhantomSpec
from .segmenter import SegmenterConfig


class ConfigError(ValueError):
    pass


_DATA_KEYS = {"preset", "dims", "pathological", "normal", "test_count", "radius_ranges", "spacing"}
_ENGINE_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_TEXTURE_KEYS = {"bins", "clusters", "strategy"}
_DIFFMASK_KEYS = _ENGINE_KEYS | {"kernel_size", "threshold", "sphere_jitter", "sphere_scale"}
_BASELINE_KEYS = {f.name for f in dataclasses.fields(HandcraftParams)}
_EVAL_KEYS = {f.name for f in dataclasses.fields(SegmenterConfig)} | {
    "seeds",
    "nsd_tau",
    "settings",
}

_SECTION_KEYS = {
    "data": _DATA_KEYS,
    "engine": _ENGINE_KEYS,
    "texture_control": _TEXTURE_KEYS,
    "diffmask": _DIFFMASK_KEYS,
    "baselines": _BASELINE_KEYS,
    "evaluation": _EVAL_KEYS,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/run"
    data: dict = field(default_factory=dict)
    engine: dict = field(default_factory=dict)
    texture_control: dict = field(default_factory=dict)
    diffmask: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for section, allowed in _SECTION_KEYS.items():
            values = getattr(self, section)
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            unknown = set(values) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")

    def to_yaml(self) -> str:
        payload = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            **{s: dict(getattr(self, s)) for s in _SECTION_KEYS},
        }
        return yaml.safe_dump(payload, sort_keys=True)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    try:
        payload = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must be a mapping")
    known_top = {"seed", "output_dir", *_SECTION_KEYS}
    unknown = set(payload) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    return ExperimentConfig(**payload)


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply dotted key=value overrides ('engine.epochs=3', 'seed=7');
    values parse as YAML scalars."""
    payload = {
        "seed": config.seed,
        "output_dir": config.output_dir,
        **{s: dict(getattr(config, s)) for s in _SECTION_KEYS},
    }
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        if len(parts) == 1:
            if parts[0] not in ("seed", "output_dir"):
                raise ConfigError(f"unknown top-level key {parts[0]!r}")
            payload[parts[0]] = value
        elif len(parts) == 2:
            section, name = parts
            if section not in _SECTION_KEYS:
                raise ConfigError(f"unknown section {section!r}")
            payload[section][name] = value
        else:
            raise ConfigError(f"override key {key!r} has too many parts")
    return ExperimentConfig(**payload)


def write_lock(config: ExperimentConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "config.lock"
    lock.write_text(config.to_yaml())
    return lock


def phantom_spec_from_config(config: ExperimentConfig) -> PhantomSpec:
    data = config.data
    preset = data.get("preset", "cardiac")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid: {sorted(PRESETS)}")
    dims = tuple(data.get("dims", (32, 32, 16)))
    spec = PRESETS[preset](dims)
    if "spacing" in data:
        spec.spacing = tuple(float(v) for v in data["spacing"])
    ranges = data.get("radius_ranges")
    if ranges:
        if len(ranges) != len(spec.classes):
            raise ConfigError(
                f"radius_ranges needs {len(spec.classes)} entries for preset {preset!r}"
            )
        for cls, rr in zip(spec.classes, ranges):
            cls.radius_range = (float(rr[0]), float(rr[1]))
    return spec


def train_config_from(config: ExperimentConfig, section: str = "engine", **extra) -> TrainConfig:
    values = dict(getattr(config, section))
    for k in ("kernel_size", "threshold", "sphere_jitter", "sphere_scale"):
        values.pop(k, None)
    values.setdefault("seed", config.seed)
    values.update(extra)
    return TrainConfig(**values)


def segmenter_config_from(config: ExperimentConfig, **extra) -> SegmenterConfig:
    values = {
        k: v for k, v in config.evaluation.items() if k in {f.name for f in dataclasses.fields(SegmenterConfig)}
    }
    values.setdefault("seed", config.seed)
    values.update(extra)
    return SegmenterConfig(**values)


def handcraft_params_from(config: ExperimentConfig) -> HandcraftParams:
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in config.baselines.items()}
    return HandcraftParams(**values)
