"""Experiment configuration: a TOML file mapped onto frozen dataclasses.

Every section may carry its own ``seed``; a section without one inherits the
top-level ``seed``, so a whole experiment is pinned by a single integer.  See
``configs/`` in the repository for annotated examples.
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
else:
    import tomli as tomllib

from . import nn
from .csm import AdaptationConfig, FSCConfig, PFEConfig
from .errors import ConfigurationError
from .fl import FLConfig
from .privacy import DEFAULT_BETA, PROPERTY_KINDS

METHODS = ("baseline", "finetune", "random", "federated", "pfa")


@dataclass(frozen=True)
class DatasetSpec:
    format: str = "synthetic"  # "synthetic" or "idx"
    images: str | None = None
    labels: str | None = None
    samples_per_class: int = 600
    size: int = 12
    noise: float = 0.08
    seed: int = 0

    def validate(self):
        if self.format == "idx":
            for name in ("images", "labels"):
                path = getattr(self, name)
                if not path:
                    raise ConfigurationError(f"dataset.{name} is required for idx datasets")
                if not Path(path).exists():
                    raise ConfigurationError(f"dataset.{name} not found: {path}")
        elif self.format == "synthetic":
            if self.samples_per_class < 1 or self.size < 6:
                raise ConfigurationError("synthetic dataset needs samples_per_class >= 1 and size >= 6")
        else:
            raise ConfigurationError(f"dataset.format must be 'synthetic' or 'idx', got {self.format!r}")


@dataclass(frozen=True)
class FederationSpec:
    kind: str = "class-imbalance"  # or "background-difference"
    n_clients: int = 25
    n_types: int = 5
    classes_per_type: int = 2
    samples_per_split: int = 100
    n_domains: int = 4
    clients_per_domain: int = 5
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self):
        if self.kind not in ("class-imbalance", "background-difference"):
            raise ConfigurationError(f"federation.kind {self.kind!r} is not 'class-imbalance' or 'background-difference'")

    @property
    def type_count(self):
        return self.n_types if self.kind == "class-imbalance" else self.n_domains


@dataclass(frozen=True)
class BaselineSpec:
    methods: tuple = METHODS
    random_groups: int | None = None  # default: number of groups PFA found
    seed: int = 0

    def validate(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigurationError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")


@dataclass(frozen=True)
class PrivacySpec:
    enabled: bool = False
    kinds: tuple = PROPERTY_KINDS
    relu_indices: tuple = (1,)
    samples: int = 3
    steps: int = 500
    step_size: float = 1.0
    beta: float = DEFAULT_BETA
    seed: int = 0

    def validate(self):
        unknown = set(self.kinds) - set(PROPERTY_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown privacy kinds {sorted(unknown)}")
        if self.samples < 1 or self.steps < 1:
            raise ConfigurationError("privacy.samples and privacy.steps must be >= 1")


@dataclass(frozen=True)
class SweepSpec:
    relu_indices: tuple = (1, 2)
    q_values: tuple = (10, 30)
    anchor_client: int = 1
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    architecture: str = "small-cnn"
    checkpoint_every: int = 0
    figures: bool = True
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    fl: FLConfig = field(default_factory=FLConfig)
    pfe: PFEConfig = field(default_factory=PFEConfig)
    fsc: FSCConfig = field(default_factory=FSCConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    privacy: PrivacySpec = field(default_factory=PrivacySpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self):
        if self.architecture not in nn.ARCHITECTURES:
            raise ConfigurationError(f"architecture {self.architecture!r} not in {list(nn.ARCHITECTURES)}")
        for section in (self.dataset, self.federation, self.baselines, self.privacy):
            section.validate()
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    @property
    def config_hash(self):
        """Short sha256 of the canonical JSON form; identifies results, not runs."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


SECTIONS = {
    "dataset": DatasetSpec,
    "federation": FederationSpec,
    "fl": FLConfig,
    "pfe": PFEConfig,
    "fsc": FSCConfig,
    "adaptation": AdaptationConfig,
    "baselines": BaselineSpec,
    "privacy": PrivacySpec,
    "sweep": SweepSpec,
}
TOP_LEVEL = ("seed", "architecture", "checkpoint_every", "figures")


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build_section(name, cls, raw, seed):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    values = dict(raw)
    for key in ("seed", "anchor_seed"):
        if key in names and key not in values:
            values[key] = seed
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def config_from_dict(raw, seed=None):
    """Build a validated config; ``seed`` overrides the top-level seed."""
    raw = dict(raw)
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw:
        raise ConfigurationError("config must set an explicit top-level seed")
    top = {k: raw[k] for k in TOP_LEVEL if k in raw}
    sections = {name: _build_section(name, cls, raw.get(name, {}), top["seed"]) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**top, **sections).validate()


def load_config(path, seed=None):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(raw, seed=seed)
