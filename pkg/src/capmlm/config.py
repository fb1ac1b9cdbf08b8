"""Pipeline configuration loaded from a TOML file.

Every section is optional; omitted keys take their defaults. The config hash
covers every setting that influences artifacts (it excludes ``[paths]`` and
``workers``) and is written into every artifact for provenance.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .fda import Aggregation
from .mlm.config import ModelConfig, TrainConfig
from .representation import DEFAULT_ALLOWLIST, FieldAllowlist, ReprKind
from .sanitize import RedactionRuleSet

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DETECTORS = ("threshold", "elliptic")


@dataclass(frozen=True)
class VocabSettings:
    size: int = 4096
    seed: int = 0
    min_pair_freq: int = 2


@dataclass(frozen=True)
class FdaSettings:
    detector: str = "threshold"
    k: int = 3
    multiplier: float = 3.0
    level: float = 0.997
    aggregation: str = Aggregation.INDEPENDENT.value
    robust: bool = False

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        Aggregation(self.aggregation)


@dataclass(frozen=True)
class Paths:
    corpus: str = "corpus"
    artifacts: str = "artifacts"


@dataclass(frozen=True)
class PipelineConfig:
    repr_kind: str = ReprKind.PCT_DICT.value
    allowlist: tuple[str, ...] = DEFAULT_ALLOWLIST
    redaction: dict = field(default_factory=dict)
    vocab: VocabSettings = VocabSettings()
    chunk_size: int = 64
    mask_rate: float = 0.20
    model_preset: str = "desk"
    model_overrides: dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    fda: FdaSettings = FdaSettings()
    paths: Paths = Paths()
    seed: int = 0
    workers: int = 1
    # train/val/test; only the val:test proportion matters (see synth.split)
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        ReprKind.parse(self.repr_kind)
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.chunk_size < 2:
            raise ValueError("chunk_size must be at least 2")
        RedactionRuleSet.from_config(self.redaction)

    # ------------------------------------------------------------ derived objects

    @property
    def kind(self) -> ReprKind:
        return ReprKind.parse(self.repr_kind)

    def field_allowlist(self) -> FieldAllowlist:
        return FieldAllowlist(tuple(self.allowlist))

    def rules(self) -> RedactionRuleSet:
        return RedactionRuleSet.from_config(self.redaction)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.preset(
            self.model_preset, vocab_size=vocab_size, chunk_size=self.chunk_size, **self.model_overrides
        )

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, mask_rate=self.mask_rate)

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["allowlist"] = list(self.allowlist)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"model"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for key in ("repr_kind", "chunk_size", "mask_rate", "seed", "workers", "redaction"):
            if key in d:
                kw[key] = d[key]
        if "allowlist" in d:
            al = d["allowlist"]
            kw["allowlist"] = () if al in ("*", ["*"]) else tuple(al)
        if "split_ratios" in d:
            kw["split_ratios"] = tuple(float(x) for x in d["split_ratios"])
        if "vocab" in d:
            kw["vocab"] = _sub(VocabSettings, d["vocab"], "vocab")
        if "fda" in d:
            kw["fda"] = _sub(FdaSettings, d["fda"], "fda")
        if "paths" in d:
            kw["paths"] = _sub(Paths, d["paths"], "paths")
        if "train" in d:
            kw["train"] = _sub(TrainConfig, d["train"], "train")
        model = dict(d.get("model", {}))
        if "model_preset" in d:
            model.setdefault("preset", d["model_preset"])
        if "model_overrides" in d:
            model.update(d["model_overrides"])
        if model:
            kw["model_preset"] = model.pop("preset", "desk")
            bad = set(model) - {f.name for f in fields(ModelConfig)}
            if bad:
                raise ValueError(f"unknown [model] keys: {sorted(bad)}")
            kw["model_overrides"] = model
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(tomllib.loads(text))

    def with_overrides(self, **kw) -> "PipelineConfig":
        """Apply command-line overrides; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        fda_keys = {f.name for f in fields(FdaSettings)}
        fda_kw = {k: kw.pop(k) for k in list(kw) if k in fda_keys}
        paths_kw = {k: kw.pop(k) for k in list(kw) if k in ("corpus", "artifacts")}
        cfg = replace(self, **kw) if kw else self
        if fda_kw:
            cfg = replace(cfg, fda=replace(cfg.fda, **fda_kw))
        if paths_kw:
            cfg = replace(cfg, paths=replace(cfg.paths, **paths_kw))
        return cfg


def _sub(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    bad = set(d) - known
    if bad:
        raise ValueError(f"unknown [{section}] keys: {sorted(bad)}")
    return cls(**d)


def resolve(path: str | Path, base: str | Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else Path(base) / p
