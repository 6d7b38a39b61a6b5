"""Typed run configuration: strict YAML parsing, overrides, hashing.

Unknown keys are rejected with the offending dotted path.  The config hash
covers everything except the output directory, so artifacts produced from
the same semantic configuration are interchangeable across run dirs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import yaml

from .errors import ConfigError


@dataclass
class CorpusSection:
    num_entities: int = 40
    num_pos_adjectives: int = 6
    num_neg_adjectives: int = 6
    num_fillers: int = 30
    source_len: list = field(default_factory=lambda: [8, 12])
    target_len: list = field(default_factory=lambda: [3, 4])
    n_train: int = 2000
    n_eval: int = 200


@dataclass
class ModelSection:
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ff: int = 128
    max_len: int = 48
    tied: bool = True
    mode: str = "seq2seq"


@dataclass
class TrainSection:
    steps: int = 1200
    batch_size: int = 16
    lr: float = 0.5
    mask_prob: float = 0.15


@dataclass
class MetaSection:
    d_model: int = 32
    heads: int = 2
    ff: int = 64
    labels: list = field(default_factory=lambda: ["negative", "positive"])
    steps: int = 500
    batch_size: int = 32
    lr: float = 0.5
    neutral_fraction: float = 0.2


@dataclass
class SpinSection:
    alpha: Union[float, str] = 0.9
    c: Union[float, str] = 4.0
    steps: int = 1500
    batch_size: int = 12
    lr: float = 0.5
    mgda_stride: int = 1
    trigger: str = "trig0"
    strategy: str = "smart_replace"
    target_label: str = "positive"
    compensatory_label: Optional[str] = "negative"
    hypothesis: Optional[list] = None


@dataclass
class PoisonSection:
    metric: str = "rouge1"
    main_threshold: float = 30.0
    meta_threshold: float = 0.5
    finetune_steps: int = 800
    finetune_lr: float = 0.5
    max_len: int = 16


@dataclass
class DefenseSection:
    target: str = "theta_star"
    num_decoys: int = 40
    n_inputs: int = 120
    metric: str = "euclidean"
    max_len: int = 16


@dataclass
class EvalSection:
    max_len: int = 16
    n_inputs: int = 0  # 0 = the full eval corpus


@dataclass
class GridSection:
    alphas: list = field(default_factory=lambda: [0.9, "mgda"])
    cs: list = field(default_factory=lambda: [4, "inf"])
    steps: int = 600
    n_train: int = 0   # 0 = full training corpus
    n_eval: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/demo"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    meta: MetaSection = field(default_factory=MetaSection)
    spin: SpinSection = field(default_factory=SpinSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    eval: EvalSection = field(default_factory=EvalSection)
    grid: GridSection = field(default_factory=GridSection)


def _fill_section(cls, data: dict, prefix: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    cfg = config_from_mapping(data)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    validate_config(cfg)
    return cfg


def config_from_mapping(data: dict) -> RunConfig:
    section_types = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in section_types:
            raise ConfigError(f"unknown config key {key}")
        f = section_types[key]
        if f.default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(f.default_factory()):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be a mapping")
            kwargs[key] = _fill_section(type(f.default_factory()), value, f"{key}.")
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    parts = dotted.split(".")
    if len(parts) == 1:
        if not hasattr(cfg, parts[0]) or dataclasses.is_dataclass(getattr(cfg, parts[0])):
            raise ConfigError(f"unknown config key {dotted}")
        setattr(cfg, parts[0], value)
        return cfg
    if len(parts) != 2:
        raise ConfigError(f"override path too deep: {dotted}")
    section_name, key = parts
    if not hasattr(cfg, section_name):
        raise ConfigError(f"unknown config section {section_name}")
    section = getattr(cfg, section_name)
    if not dataclasses.is_dataclass(section) or not hasattr(section, key):
        raise ConfigError(f"unknown config key {dotted}")
    setattr(section, key, value)
    return cfg


def parse_c(raw: Union[float, str, int]) -> float:
    if isinstance(raw, str):
        if raw.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"c must be a number >= 1 or 'inf', got {raw!r}")
    return float(raw)


def parse_alpha(raw: Union[float, str, int]):
    if isinstance(raw, str):
        if raw.lower() == "mgda":
            return "mgda"
        raise ConfigError(f"alpha must be a number in (0,1] or 'mgda', got {raw!r}")
    return float(raw)


def validate_config(cfg: RunConfig) -> None:
    parse_alpha(cfg.spin.alpha)
    parse_c(cfg.spin.c)
    if len(cfg.corpus.source_len) != 2 or len(cfg.corpus.target_len) != 2:
        raise ConfigError("corpus length ranges must be [lo, hi] pairs")
    if cfg.spin.target_label not in cfg.meta.labels:
        raise ConfigError(f"spin.target_label {cfg.spin.target_label!r} not in meta.labels")
    if (cfg.spin.compensatory_label is not None
            and cfg.spin.compensatory_label not in cfg.meta.labels):
        raise ConfigError(f"spin.compensatory_label {cfg.spin.compensatory_label!r} not in meta.labels")
    if cfg.defense.metric not in ("euclidean", "cosine"):
        raise ConfigError("defense.metric must be euclidean or cosine")
    if cfg.corpus.n_train < 1 or cfg.corpus.n_eval < 1:
        raise ConfigError("corpus sizes must be >= 1")


def config_hash(cfg: RunConfig) -> str:
    payload = dataclasses.asdict(cfg)
    payload.pop("out", None)
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)
