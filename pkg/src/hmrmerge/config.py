"""Experiment configuration: one JSON document covering every stage.

The fingerprint hashes the canonical JSON of everything except
``output_dir``, so moving a run does not change its identity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .diffusion import OBJECTIVES, DenoiserConfig
from .io import canonical_json
from .layer_merge import EclmConfig
from .model import ModelConfig
from .token_merge import MergeSchedule
from .vae import VaeConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSpec:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "scaled_linear"
    zero_terminal: bool = True
    objective: str = "both"
    sample_steps: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {sorted(OBJECTIVES)}")
        if not 1 <= self.sample_steps <= self.T:
            raise ValueError("sample_steps must lie in [1, T]")


@dataclass(frozen=True)
class DataSpec:
    train_clips: int = 200
    test_clips: int = 20
    frames: int = 36
    seed: int = 0
    shape_jitter: float = 0.1
    backbone_clips: int = 800  # short extra clips for backbone training
    backbone_frames: int = 4

    def __post_init__(self):
        for k in ("train_clips", "test_clips", "frames", "backbone_frames"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.frames < 3:
            raise ValueError("clips need >= 3 frames for the acceleration metric")


@dataclass(frozen=True)
class TrainSpec:
    backbone_epochs: int = 20
    backbone_lr: float = 2e-3
    backbone_batch: int = 32
    layer_drop: float = 0.1
    vae_epochs: int = 150
    vae_lr: float = 1e-3
    vae_batch: int = 16
    denoiser_epochs: int = 300
    denoiser_lr: float = 1e-3
    denoiser_batch: int = 32
    augment_p: float = 0.5

    def __post_init__(self):
        for k in ("backbone_epochs", "vae_epochs", "denoiser_epochs"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if not 0.0 <= self.augment_p <= 1.0 or not 0.0 <= self.layer_drop < 1.0:
            raise ValueError("augment_p must lie in [0, 1] and layer_drop in [0, 1)")


@dataclass(frozen=True)
class BenchSpec:
    repetitions: int = 50
    warmup: int = 10
    threads: int = 1
    clips: int = 2

    def __post_init__(self):
        if self.repetitions < 1 or self.warmup < 0 or self.clips < 1:
            raise ValueError("invalid benchmark settings")


_SECTIONS = {"model": ModelConfig, "merge": MergeSchedule, "eclm": EclmConfig, "vae": VaeConfig,
             "denoiser": DenoiserConfig, "diffusion": DiffusionSpec, "data": DataSpec,
             "train": TrainSpec, "bench": BenchSpec}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    merge: MergeSchedule = field(default_factory=MergeSchedule)
    eclm: EclmConfig = field(default_factory=EclmConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionSpec = field(default_factory=DiffusionSpec)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self._check_consistency()

    def _check_consistency(self):
        m, v, d = self.model, self.vae, self.denoiser
        if m.tokens_per_frame % 2:
            raise ConfigError("tokens_per_frame must be even for the A/B split")
        if d.cond_dim != m.feature_dim:
            raise ConfigError(f"denoiser cond_dim {d.cond_dim} != backbone feature_dim {m.feature_dim}")
        if (d.latent_tokens, d.latent_dim) != (v.latent_tokens, v.latent_dim):
            raise ConfigError("denoiser latent shape must match the VAE latent shape")
        if d.frames != v.frames or v.frames != self.data.frames:
            raise ConfigError("VAE, denoiser and dataset frame counts must agree")
        if v.n_joints != m.n_joints:
            raise ConfigError("VAE and backbone joint counts differ")
        if self.merge.floor > m.tokens_per_frame:
            raise ConfigError("merge floor exceeds the token count")

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw: dict[str, Any] = {}
        try:
            for key, value in raw.items():
                if key in _SECTIONS:
                    sub = _SECTIONS[key]
                    names = {f.name for f in dataclasses.fields(sub)}
                    bad = set(value) - names
                    if bad:
                        raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                    value = dict(value)
                    for k, v in value.items():
                        if isinstance(v, list):
                            value[k] = tuple(v)
                    kw[key] = sub(**value)
                else:
                    kw[key] = value
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields or ``section__field`` entries replaced."""
        top, nested = {}, {}
        for k, v in changes.items():
            if "__" in k:
                sec, name = k.split("__", 1)
                nested.setdefault(sec, {})[name] = v
            else:
                top[k] = v
        try:
            for sec, vals in nested.items():
                top[sec] = dataclasses.replace(getattr(self, sec), **vals)
            return dataclasses.replace(self, **top)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        content = self.to_dict()
        content.pop("output_dir")
        return hashlib.sha256(canonical_json(content).encode()).hexdigest()[:16]
