"""Single-file pipeline configuration with a strict schema.

One YAML document configures every stage; unknown keys are rejected so a
typo cannot silently fall back to a default. The root seed is the only
source of randomness for the whole pipeline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .aligner import AlignConfig
from .augmentor import ReplacementConfig
from .datakit import SynthConfig
from .ganlite import GanConfig
from .oracle import OracleConfig
from .projector import ProjectionConfig
from .retriever import RetrievalConfig

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class AugmentationSection:
    r: float = 0.7
    strategy: str = "random"
    scale: float = 1.0
    exclude_original: bool = True

    def replacement(self) -> ReplacementConfig:
        return ReplacementConfig(r=self.r, strategy=self.strategy,
                                 exclude_original=self.exclude_original)


@dataclass
class EvalSection:
    n: int = 1000
    repeats: int = 10
    protocol: str = "instance"
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.protocol not in ("instance", "class"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.n <= 0 or self.repeats <= 0:
            raise ValueError("n and repeats must be positive")


def _build(cls, data: dict, path: str, exclude: frozenset = frozenset()):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - exclude
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class PipelineConfig:
    seed: int = 0
    artifact_root: str = "runs"
    schema_version: int = CONFIG_SCHEMA_VERSION
    dataset: SynthConfig = field(default_factory=SynthConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    alignment: AlignConfig = field(default_factory=AlignConfig)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = {
        "dataset": (SynthConfig, frozenset()),
        "oracle": (OracleConfig, frozenset()),
        "gan": (GanConfig, frozenset()),
        "projection": (ProjectionConfig, frozenset()),
        "alignment": (AlignConfig, frozenset()),
        "augmentation": (AugmentationSection, frozenset()),
        # Retrieval takes its augmentation scale from the augmentation
        # section; a second copy under retrieval would be ambiguous.
        "retrieval": (RetrievalConfig, frozenset({"scale"})),
        "eval": (EvalSection, frozenset()),
    }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        scalars = {"seed", "artifact_root", "schema_version"}
        unknown = sorted(set(data) - scalars - set(cls.SECTIONS))
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {unknown}")
        version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"config schema_version {version!r} not supported "
                f"(expected {CONFIG_SCHEMA_VERSION})")
        kwargs = {k: data[k] for k in scalars if k in data}
        for section, (section_cls, exclude) in cls.SECTIONS.items():
            if section in data:
                kwargs[section] = _build(section_cls, data[section], section,
                                         exclude)
        cfg = cls(**kwargs)
        cfg.retrieval.scale = cfg.augmentation.scale
        if not isinstance(cfg.seed, int):
            raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
        try:
            cfg.dataset.validate()
        except Exception as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        return cfg

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "artifact_root": self.artifact_root,
            "schema_version": self.schema_version,
        }
        for section, (_, exclude) in self.SECTIONS.items():
            d = dataclasses.asdict(getattr(self, section))
            for key in exclude:
                d.pop(key, None)
            out[section] = d
        return out


def load_config(path: Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    return PipelineConfig.from_dict(data)
