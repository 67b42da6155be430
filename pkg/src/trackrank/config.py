"""Run configuration: one JSON document, validated strictly before any work."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .aggregators import HEAD_PRESETS, AggregatorConfig, PoolConfig, head_config_from_dict
from .data import SynthConfig
from .losses import TripletConfig
from .retrieval import DEFAULT_RANKS
from .sampling import SamplerConfig
from .trainer import EvalOptions, TrainConfig


class ConfigError(ValueError):
    """The run configuration is invalid."""


@dataclass
class DatasetPaths:
    train: str | None = None
    test: str | None = None


@dataclass
class TrainSection:
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    eval_interval: int = 0
    clip_norm: float | None = None
    frame_projection: bool = True


@dataclass
class EvalSection:
    ranks: list[int] = field(default_factory=lambda: list(DEFAULT_RANKS))
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3
    drop_padded: bool = False


@dataclass
class CompareSection:
    heads: list[str] = field(default_factory=lambda: list(HEAD_PRESETS))
    baseline: bool = True  # add the T=1 average-pooling image baseline row
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    storage_dtype: str = "float32"
    synth: SynthConfig | None = None
    dataset: DatasetPaths | None = None
    sampler: SamplerConfig = SamplerConfig()
    head: AggregatorConfig = PoolConfig("avg")
    triplet: TripletConfig = TripletConfig()
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    compare: CompareSection = field(default_factory=CompareSection)

    def train_config(self, head: AggregatorConfig | None = None, T: int | None = None,
                     seed: int | None = None) -> TrainConfig:
        seed = self.seed if seed is None else seed
        sampler = dataclasses.replace(self.sampler, seed=seed,
                                      T=self.sampler.T if T is None else T)
        return TrainConfig(head=head or self.head, sampler=sampler, triplet=self.triplet,
                           seed=seed, **dataclasses.asdict(self.train))

    def eval_options(self) -> EvalOptions:
        e = self.eval
        return EvalOptions(tuple(e.ranks), e.rerank, e.k1, e.k2, e.lambda_value, e.drop_padded)

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        base = self.synth or SynthConfig()
        return dataclasses.replace(base, seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval"]["lambda"] = d["eval"].pop("lambda_value")
        d["sampler"].pop("seed")
        if d["synth"] is not None:
            d["synth"].pop("seed")
        return d


def _strict(cls, data: Any, where: str, rename: dict[str, str] | None = None,
            drop: tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    rename = rename or {}
    names = {f.name for f in dataclasses.fields(cls)} - set(drop)
    kwargs = {}
    for key, value in data.items():
        target = rename.get(key, key)
        if target not in names or key in rename.values():
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[target] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_head(data: Any, where: str = "head") -> AggregatorConfig:
    if isinstance(data, str):
        if data not in HEAD_PRESETS:
            raise ConfigError(f"{where}: unknown head preset {data!r}; "
                              f"choose from {sorted(HEAD_PRESETS)}")
        return HEAD_PRESETS[data]
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a preset name or an object")
    try:
        return head_config_from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_TOP_KEYS = {"seed", "out", "storage_dtype", "synth", "dataset", "sampler", "head", "triplet",
             "train", "eval", "compare"}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"config: unknown key(s) {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed: must be an integer")
        cfg.seed = doc["seed"]
    if "out" in doc:
        cfg.out = str(doc["out"])
    if "storage_dtype" in doc:
        if doc["storage_dtype"] not in ("float32", "float64"):
            raise ConfigError("storage_dtype: must be 'float32' or 'float64'")
        cfg.storage_dtype = doc["storage_dtype"]
    if doc.get("synth") is not None:
        synth = dict(doc["synth"]) if isinstance(doc["synth"], dict) else doc["synth"]
        if isinstance(synth, dict) and synth.get("map_shape") is not None:
            synth["map_shape"] = tuple(synth["map_shape"])
        cfg.synth = _strict(SynthConfig, synth, "synth", drop=("seed",))
    if doc.get("dataset") is not None:
        cfg.dataset = _strict(DatasetPaths, doc["dataset"], "dataset")
    if "sampler" in doc:
        cfg.sampler = _strict(SamplerConfig, doc["sampler"], "sampler", drop=("seed",))
    if "head" in doc:
        cfg.head = parse_head(doc["head"])
    if "triplet" in doc:
        cfg.triplet = _strict(TripletConfig, doc["triplet"], "triplet")
    if "train" in doc:
        cfg.train = _strict(TrainSection, doc["train"], "train")
    if "eval" in doc:
        cfg.eval = _strict(EvalSection, doc["eval"], "eval", rename={"lambda": "lambda_value"})
    if "compare" in doc:
        cfg.compare = _strict(CompareSection, doc["compare"], "compare")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; raises ConfigError."""
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    if cfg.train.steps < 1:
        raise ConfigError("train: steps must be >= 1")
    if cfg.train.lr is not None and cfg.train.lr < 0:
        raise ConfigError("train: lr must be >= 0")
    e = cfg.eval
    if not e.ranks or any((not isinstance(r, int)) or r < 1 for r in e.ranks):
        raise ConfigError("eval: ranks must be a non-empty list of positive integers")
    if e.k1 < 1 or e.k2 < 1:
        raise ConfigError("eval: k1 and k2 must be >= 1")
    if not 0.0 <= e.lambda_value <= 1.0:
        raise ConfigError("eval: lambda must lie in [0, 1]")
    for name in cfg.compare.heads:
        if name not in HEAD_PRESETS:
            raise ConfigError(f"compare: unknown head preset {name!r}")
    if not cfg.compare.seeds:
        raise ConfigError("compare: seeds must be non-empty")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(doc)
