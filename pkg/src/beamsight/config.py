"""Reproducible run configuration: JSON schema, defaults, and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import SplitSpec
from .errors import DataError, InvalidConfig
from .resnet import ModelConfig
from .synth import SynthConfig
from .trainer import HParams

SCHEMA_VERSION = 1
OUT_ENV_VAR = "BEAMSIGHT_OUT"


@dataclass
class Paths:
    corpus_root: str = "corpus"
    out_root: str = ""          # empty: fall back to $BEAMSIGHT_OUT, then ./out
    checkpoint: str = ""


@dataclass
class AttributionDefaults:
    steps: int = 64
    tol_fraction: float = 0.01


@dataclass
class GenerateDefaults:
    n_hazard: int = 125
    n_safe: int = 125


@dataclass
class SourceTaskDefaults:
    n_per_class: int = 125
    epochs: int = 6


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    deterministic: bool = True
    workers: int = 1
    paths: Paths = field(default_factory=Paths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    hparams: HParams = field(default_factory=HParams)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(input_size=64))
    attribution: AttributionDefaults = field(default_factory=AttributionDefaults)
    generate: GenerateDefaults = field(default_factory=GenerateDefaults)
    source_task: SourceTaskDefaults = field(default_factory=SourceTaskDefaults)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported schema_version {self.schema_version}")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be >= 1, got {self.workers}")
        self.synth.validate()
        self.split.validate()
        self.hparams.validate()
        self.model.validate()
        if self.attribution.steps < 1:
            raise InvalidConfig("attribution steps must be >= 1")
        if not 0.0 <= self.attribution.tol_fraction:
            raise InvalidConfig("attribution tol_fraction must be >= 0")

    def out_root(self) -> Path:
        if self.paths.out_root:
            return Path(self.paths.out_root)
        env = os.environ.get(OUT_ENV_VAR, "")
        return Path(env) if env else Path("out")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["synth"]["depth_range"] = list(self.synth.depth_range)
        return d


def _merge_section(obj, values: dict, section: str):
    unknown = set(values) - {f for f in obj.__dataclass_fields__}
    if unknown:
        raise InvalidConfig(f"unknown {section} field(s): {sorted(unknown)}")
    return replace(obj, **values)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("config document must be a JSON object")
    cfg = RunConfig()
    plain = {k: v for k, v in doc.items()
             if k in ("schema_version", "seed", "deterministic", "workers")}
    cfg = replace(cfg, **plain)
    sections: dict[str, object] = {
        "paths": Paths(),
        "synth": SynthConfig(),
        "split": SplitSpec(),
        "hparams": HParams(),
        "attribution": AttributionDefaults(),
        "generate": GenerateDefaults(),
        "source_task": SourceTaskDefaults(),
    }
    for name, default in sections.items():
        if name in doc:
            values = dict(doc[name])
            if name == "synth" and "depth_range" in values:
                values["depth_range"] = tuple(values["depth_range"])
            setattr(cfg, name, _merge_section(default, values, name))
    if "model" in doc:
        cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), **doc["model"]})
    # "subcommand" appears in resolved-config copies; harmless on reload
    known = set(sections) | {"schema_version", "seed", "deterministic", "workers",
                             "model", "subcommand"}
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfig(f"unknown config section(s): {sorted(unknown)}")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file {path} does not exist")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(doc)


def write_resolved(cfg: RunConfig, out_dir, subcommand: str) -> Path:
    """Persist the fully resolved configuration next to a run's artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"subcommand": subcommand, **cfg.to_dict()}
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
