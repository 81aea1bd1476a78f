"""Run configuration: JSON file -> nested dataclasses, with unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Tuple

from .align import AlignConfig
from .encoder import AugmentationConfig, EncoderConfig
from .policy import NoiseSchedule, PolicyConfig
from .protodisc import ProtoConfig
from .simgen import CATEGORIES, SimConfig


@dataclass
class DataConfig:
    categories: Tuple[str, ...] = CATEGORIES
    speeds: Tuple[float, ...] = (1.0, 2.0)
    train_scripts: int = 80  # per category and embodiment
    test_scripts: int = 20  # per category
    kselect_scripts: int = 40  # per dataset in the adaptive-K comparison
    kselect_simple_vocab: int = 4

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.speeds = tuple(float(s) for s in self.speeds)
        bad = [c for c in self.categories if c not in CATEGORIES]
        if bad:
            raise ValueError(f"unknown categories {bad}; expected a subset of {CATEGORIES}")
        if not self.categories or not self.speeds:
            raise ValueError("need at least one category and one speed")


@dataclass
class EvalConfig:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    speeds: Tuple[float, ...] = (1.0, 2.0)
    conditions: Tuple[str, ...] = ("same", "cross")
    rho: Optional[float] = None  # None -> world default
    cap_factor: float = 2.0
    cap_extra: int = 20
    conditioning: str = "full"  # or "embedding"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.speeds = tuple(float(s) for s in self.speeds)
        self.conditions = tuple(self.conditions)
        if not set(self.conditions) <= {"same", "cross"}:
            raise ValueError("conditions must be drawn from ('same', 'cross')")
        if self.conditioning not in ("full", "embedding"):
            raise ValueError("conditioning must be 'full' or 'embedding'")
        if len(self.seeds) == 0:
            raise ValueError("need at least one seed")


@dataclass
class PathsConfig:
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        """Content hash of everything that affects results; output locations are excluded."""
        content = {k: v for k, v in self.to_dict().items() if k != "paths"}
        blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_NESTED = {
    (ProtoConfig, "augment"): AugmentationConfig,
    (PolicyConfig, "schedule"): NoiseSchedule,
}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        sub = _NESTED.get((cls, f.name))
        if cls is RunConfig:
            sub = {fl.name: fl.default_factory for fl in dataclasses.fields(RunConfig)}[f.name]().__class__
        kw[f.name] = _build(sub, raw[f.name], f"{where}.{f.name}") if sub else raw[f.name]
    return cls(**kw)


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "config")


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(raw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x
