"""Run configuration: defaulted sections, TOML/JSON loading, stable hashing.

Every tool reads one ``RunConfig`` whose sections mirror the package
modules.  Unknown keys anywhere in the file are rejected so typos fail
loudly.  ``config_hash`` digests the fully-resolved config (defaults
included) canonically, so equal configs hash equally on any platform, and
every artifact the CLI writes embeds that hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VocabSection:
    num_categories: int = 5
    num_bins: int = 32
    n_max: int = 8


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 100
    profile: str = "epsilon-flat"
    profile_param: float = 1e-6
    epsilon: float = 1e-6
    gamma_headroom: float = 1e-4


@dataclass(frozen=True)
class DenoiserSection:
    embed_dim: int = 96
    num_layers: int = 3
    num_heads: int = 4
    ff_dim: int = 192
    dropout: float = 0.0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 3500
    lambda_aux: float = 0.1


@dataclass(frozen=True)
class CorrectorSection:
    embed_dim: int = 96
    num_layers: int = 4
    num_heads: int = 8
    ff_dim: int = 192
    dropout: float = 0.0
    objective: str = "correctness"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 2000


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 100
    corrector_timesteps: tuple[int, ...] = (10, 20, 30)
    threshold: float = 0.7
    tau: float = 0.05
    selection_mode: str = "threshold"
    noise_space: str = "probability"
    maskgit_steps: int = 10
    maskgit_threshold: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    k: int = 3
    n_samples: int = 500
    max_iou_cap: int = 200


@dataclass(frozen=True)
class DataSection:
    grammar: str = "doc"
    n_lo: int = 1
    n_hi: int = 8
    jitter: int = 0
    shift_range: int = 1
    seed: int = 0
    count: int = 10000


_SECTIONS = {
    "vocab": VocabSection,
    "schedule": ScheduleSection,
    "denoiser": DenoiserSection,
    "corrector": CorrectorSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "data": DataSection,
}


@dataclass(frozen=True)
class RunConfig:
    vocab: VocabSection = field(default_factory=VocabSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    corrector: CorrectorSection = field(default_factory=CorrectorSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _build_section(cls, payload: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    coerced = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{name}]: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = payload.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section [{name}] must be a table/object")
        sections[name] = _build_section(cls, raw, name)
    return RunConfig(**sections)


def load_config(path: str | Path | None) -> RunConfig:
    """Load TOML or JSON config; ``None`` yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        payload = json.loads(text.decode("utf-8"))
    elif path.suffix == ".toml":
        payload = tomllib.loads(text.decode("utf-8"))
    else:
        raise ConfigError(f"config must be .toml or .json, got {path.suffix!r}")
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a table/object")
    return config_from_dict(payload)
