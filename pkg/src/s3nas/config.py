"""Run configuration: one JSON document, dotted-path overrides, labeled seeds.

Every random stream derives from the master seed and a label::

    substream(label) = SeedSequence([master_seed, crc32(label)])

with labels ``data``, ``train``, ``sample``, ``search``, ``ablate`` and
``attention``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cost import ModelShape, ResourceBudget
from .evaluator import TabularConfig
from .evolution import EvolutionConfig, SearchConfig
from .space import SearchSpace, SpaceError
from .supernet import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2048
    n_val: int = 512
    side: int = 32
    classes: int = 4
    channels: int = 1
    noise: float = 0.1
    contrast: float = 0.02
    standardize: bool = True  # models see pixels scaled by the training mean and std
    train_path: str | None = None
    val_path: str | None = None


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "supernet"  # or "tabular"
    tabular: dict = field(default_factory=dict)
    retrain: str = "scratch"  # or "finetune"
    eval_batch: int = 256


@dataclass(frozen=True)
class AblationConfig:
    archs: int = 10
    epochs: int = 8


@dataclass(frozen=True)
class AttentionConfig:
    k: int = 5
    images: int = 16


@dataclass(frozen=True)
class RunConfig:
    space: SearchSpace
    data: DataConfig = DataConfig()
    shape: ModelShape = ModelShape()
    evolution: EvolutionConfig = EvolutionConfig()
    search: SearchConfig = SearchConfig()
    budget: ResourceBudget = ResourceBudget()
    train: TrainConfig = TrainConfig()
    oracle: OracleConfig = OracleConfig()
    ablation: AblationConfig = AblationConfig()
    attention: AttentionConfig = AttentionConfig()
    seed: int = 0
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def seed_for(self, label: str) -> int:
        return substream_seed(self.seed, label)

    def rng(self, label: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(label.encode())]))

    @property
    def tabular(self) -> TabularConfig:
        return TabularConfig.from_dict(self.oracle.tabular)

    def config_hash(self) -> str:
        # where results land does not change what they are
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def substream_seed(master: int, label: str) -> int:
    ss = np.random.SeedSequence([master, zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _build(cls, doc: Any, path: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    kwargs = {}
    for k, v in doc.items():
        if isinstance(v, list) and k == "betas":
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = doc
    for i, p in enumerate(parts[:-1]):
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[:i + 1]), "cannot descend into a non-object")
        node = nxt
    node[parts[-1]] = parse_value(value)


def load_config(path: str | Path | None = None, overrides=(), doc: dict | None = None,
                base_dir: Path | None = None) -> RunConfig:
    if doc is None:
        if path is None:
            raise ConfigError("config", "no config given")
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", str(exc)) from None
        base_dir = Path(path).parent
    doc = copy.deepcopy(doc)
    for o in overrides:
        apply_override(doc, o)
    return from_dict(doc, base_dir or Path("."))


def from_dict(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig) if f.name != "raw"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    space_doc = doc.get("space")
    if space_doc is None:
        raise ConfigError("space", "required")
    try:
        if isinstance(space_doc, str):
            space = SearchSpace.load(base_dir / space_doc)
        else:
            space = SearchSpace.from_dict(space_doc)
    except (SpaceError, OSError, KeyError, TypeError) as exc:
        raise ConfigError("space", str(exc)) from None
    budget = doc.get("budget") or {}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a nonnegative integer")
    oracle = _build(OracleConfig, doc.get("oracle"), "oracle")
    if oracle.kind not in ("supernet", "tabular"):
        raise ConfigError("oracle.kind", f"unknown oracle {oracle.kind!r}")
    if oracle.retrain not in ("scratch", "finetune"):
        raise ConfigError("oracle.retrain", f"unknown mode {oracle.retrain!r}")
    if oracle.kind == "tabular":
        try:
            TabularConfig.from_dict(oracle.tabular)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("oracle.tabular", str(exc)) from None
    data = _build(DataConfig, doc.get("data"), "data")
    shape_doc = doc.get("shape") or {}
    shape_doc = {"side": data.side, "channels": data.channels, "classes": data.classes, **shape_doc}
    cfg = RunConfig(
        space=space,
        data=data,
        shape=_build(ModelShape, shape_doc, "shape"),
        evolution=_build(EvolutionConfig, doc.get("evolution"), "evolution"),
        search=_build(SearchConfig, doc.get("search"), "search"),
        budget=_build(ResourceBudget, budget, "budget"),
        train=_build(TrainConfig, doc.get("train"), "train"),
        oracle=oracle,
        ablation=_build(AblationConfig, doc.get("ablation"), "ablation"),
        attention=_build(AttentionConfig, doc.get("attention"), "attention"),
        seed=seed,
        output_dir=str(doc.get("output_dir", "runs/default")),
        raw=doc,
    )
    if cfg.shape.side != data.side or cfg.shape.channels != data.channels or cfg.shape.classes != data.classes:
        raise ConfigError("shape", "side/channels/classes must agree with data")
    return cfg
