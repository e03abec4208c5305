"""Run configuration: nested dataclasses, YAML files, dotted overrides.

A run is described by one ``RunConfig``.  Profiles give known-good
starting points ("toy" fits a laptop CPU, "paper-base" is the
full-scale recipe); a YAML file and then ``--set path.key=value``
overrides refine them.  Overrides can also come from the environment as
``MASKDUO_SET_<path>`` with double underscores for dots, e.g.
``MASKDUO_SET_train__base_lr=0.001``, which is how batch schedulers
inject settings without editing files.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .audio import AudioConfig
from .backbone import EncoderConfig, PredictorConfig
from .evaluation import ProbeConfig
from .training import TrainConfig

__all__ = [
    "GridConfig",
    "DataConfig",
    "RunConfig",
    "PROFILES",
    "load_config",
    "save_config",
    "apply_overrides",
    "env_overrides",
    "resolve_cache_dir",
]

ENV_PREFIX = "MASKDUO_SET_"
CACHE_ENV = "MASKDUO_CACHE_DIR"


@dataclass(frozen=True)
class GridConfig:
    """Model-facing spectrogram geometry."""

    patch_size: int = 16
    n_mels: int = 80
    n_frames: int = 608

    def __post_init__(self):
        if self.n_mels % self.patch_size or self.n_frames % self.patch_size:
            raise ValueError(
                f"{self.n_mels}x{self.n_frames} grid is not divisible by patch {self.patch_size}"
            )


@dataclass(frozen=True)
class DataConfig:
    """Where clips come from: a bundled synthetic corpus or a manifest."""

    kind: str = "synthetic_bands"
    manifest: str | None = None
    root: str | None = None
    n_classes: int = 4
    clips_per_class: int = 16
    clip_seconds: float = 1.0
    snr_db: float = 5.0
    test_fraction: float = 0.25
    # limit the probe's labeled set to the first k train clips per class
    # (None = use every train label); pre-training always sees all clips
    probe_clips_per_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic_bands", "manifest"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == "manifest" and not self.manifest:
            raise ValueError("data.kind = manifest requires data.manifest")


@dataclass
class RunConfig:
    profile: str = "toy"
    out_dir: str = "runs/latest"
    grid: GridConfig = field(default_factory=GridConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


def _toy_profile() -> RunConfig:
    return RunConfig(
        profile="toy",
        grid=GridConfig(patch_size=16, n_mels=80, n_frames=96),
        encoder=EncoderConfig.toy(),
        predictor=PredictorConfig.toy(),
        train=TrainConfig(epochs=40, warmup_epochs=2, batch_size=8, base_lr=1e-3),
        probe=ProbeConfig(epochs=30),
    )


def _paper_base_profile() -> RunConfig:
    return RunConfig(
        profile="paper-base",
        grid=GridConfig(patch_size=16, n_mels=80, n_frames=608),
        encoder=EncoderConfig.paper_base(),
        predictor=PredictorConfig.paper_base(),
        train=TrainConfig.paper_preset(),
    )


PROFILES = {"toy": _toy_profile, "paper-base": _paper_base_profile}


def _build(cls, data: dict):
    """Recursively construct a (possibly nested) dataclass from a dict."""
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        sub = _SECTION_TYPES.get(key)
        kwargs[key] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_SECTION_TYPES = {
    "grid": GridConfig,
    "audio": AudioConfig,
    "data": DataConfig,
    "encoder": EncoderConfig,
    "predictor": PredictorConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


def load_config(path=None, profile: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Profile defaults <- YAML file <- env <- explicit overrides, in that order."""
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        base_profile = profile or raw.get("profile", "toy")
        cfg = _profile_config(base_profile)
        merged = _deep_merge(asdict(cfg), raw)
        merged["profile"] = base_profile
        cfg = _build(RunConfig, merged)
    else:
        cfg = _profile_config(profile or "toy")
    cfg = apply_overrides(cfg, env_overrides())
    cfg = apply_overrides(cfg, overrides or [])
    return cfg


def _profile_config(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choices: {sorted(PROFILES)}")
    return PROFILES[name]()


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(asdict(cfg), fh, sort_keys=False)
    return path


def _coerce(text: str, current):
    """Parse an override string against the type of the value it replaces."""
    if text.lower() in ("null", "none"):
        return None
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse {text!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        # untyped slot: let YAML decide (numbers, strings, booleans)
        return yaml.safe_load(text)
    return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; returns a new config."""
    if not overrides:
        return cfg
    data = asdict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form path.key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ValueError(f"override path {dotted!r} does not name a config section")
            node = node[key]
        leaf = keys[-1]
        if leaf not in node:
            raise ValueError(f"override {dotted!r} names an unknown setting")
        node[leaf] = _coerce(text.strip(), node[leaf])
    return _build(RunConfig, data)


def env_overrides(environ=None) -> list[str]:
    """Collect ``MASKDUO_SET_a__b=v`` variables as ``a.b=v`` override strings."""
    environ = os.environ if environ is None else environ
    out = []
    for key, value in sorted(environ.items()):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].replace("__", ".")
            out.append(f"{dotted}={value}")
    return out


def resolve_cache_dir(cfg: RunConfig) -> Path:
    """Cache location: ``MASKDUO_CACHE_DIR`` if set, else under out_dir."""
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(cfg.out_dir) / "cache"
