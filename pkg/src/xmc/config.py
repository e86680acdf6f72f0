"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attribution import METHODS, AttributionSettings, PerturbationBudget
from .data import SynthConfig
from .metrics import FaithfulnessConfig, PlausibilityConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d, section: str, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class DataSection:
    synth: dict | None = None          # SynthConfig fields
    train: str | None = None           # JSONL paths when not synthetic
    val: str | None = None
    test: str | None = None
    max_len: int = 128
    vocab_max_size: int | None = None

    def __post_init__(self):
        if (self.synth is None) == (self.train is None):
            raise ConfigError("data: give exactly one of 'synth' or corpus paths")
        if self.synth is not None:
            try:
                SynthConfig.from_dict(self.synth).validate()
            except ValueError as exc:
                raise ConfigError(f"data.synth: {exc}") from exc
        if self.max_len < 3:
            raise ConfigError("data.max_len must be >= 3")

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        d = dict(self.synth)
        if seed is not None:
            d["seed"] = seed
        return SynthConfig.from_dict(d)


@dataclass
class ModelSection:
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    ff_mult: int = 4


@dataclass
class AttributionSection:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0])
    intgrad_steps: int = 64
    samples: int = 1000
    mask_prob: float = 0.5
    ridge: float = 0.01
    kernel_width: float = 0.25
    rollout_renormalize: bool = True
    max_docs: int | None = None        # per split; None explains every document

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"attribution.methods: unknown {bad}")
        if not self.seeds:
            raise ConfigError("attribution.seeds must be non-empty")

    def settings(self) -> AttributionSettings:
        return AttributionSettings(self.intgrad_steps,
                                   PerturbationBudget(self.samples, self.mask_prob, self.ridge, self.kernel_width),
                                   self.rollout_renormalize)


@dataclass
class MetricsSection:
    k_rank: int = 5
    normalization: str = "sum"
    macro: bool = False
    k_faith: int = 100
    faithfulness_methods: list[str] | None = None   # None: every explained method
    max_faith_docs: int | None = None

    def plausibility(self, tau: float = 0.5) -> PlausibilityConfig:
        return PlausibilityConfig(tau, self.k_rank, self.normalization, self.macro)

    def faithfulness(self) -> FaithfulnessConfig:
        return FaithfulnessConfig(self.k_faith)


@dataclass
class ReportSection:
    max_docs: int = 20
    method: str | None = None


@dataclass
class RunConfig:
    data: DataSection
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    report: ReportSection = field(default_factory=ReportSection)
    output: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        if "data" not in d:
            raise ConfigError("config needs a 'data' section")
        try:
            train = TrainConfig.from_dict(d.get("train", {}))
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc
        return cls(
            data=_strict(DataSection, d["data"], "data"),
            model=_strict(ModelSection, d.get("model", {}), "model"),
            train=train,
            attribution=_strict(AttributionSection, d.get("attribution", {}), "attribution"),
            metrics=_strict(MetricsSection, d.get("metrics", {}), "metrics"),
            report=_strict(ReportSection, d.get("report", {}), "report"),
            output=str(d.get("output", "runs/default")),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def default_config(**overrides) -> RunConfig:
    d = {"data": {"synth": {}}}
    d.update(overrides)
    return RunConfig.from_dict(d)
