from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    hidden_dim: int = 128
    intermediate_dim: int = 512
    dropout: float = 0.1
    max_positions: int = 64
    vocab_size: int = 4096
    chunk_size: int = 64
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.max_positions < self.chunk_size:
            raise ValueError("max_positions must be >= chunk_size")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @classmethod
    def full(cls, vocab_size: int = 30522, chunk_size: int = 64) -> "ModelConfig":
        """6 layers, 12 heads, 768 hidden, 3072 intermediate."""
        return cls(6, 12, 768, 3072, 0.1, max(512, chunk_size), vocab_size, chunk_size)

    @classmethod
    def desk(cls, vocab_size: int = 4096, chunk_size: int = 64) -> "ModelConfig":
        return cls(2, 4, 128, 512, 0.1, chunk_size, vocab_size, chunk_size)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        base = {"full": cls.full, "desk": cls.desk}.get(name)
        if base is None:
            raise ValueError(f"unknown model preset {name!r}")
        known = {f.name for f in fields(cls)}
        vs = overrides.pop("vocab_size", None)
        cs = overrides.pop("chunk_size", None)
        kw = {}
        if vs is not None:
            kw["vocab_size"] = vs
        if cs is not None:
            kw["chunk_size"] = cs
        cfg = base(**kw)
        extra = {k: v for k, v in overrides.items() if k in known}
        return replace(cfg, **extra) if extra else cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 2
    max_epochs: int = 200
    patience: int = 12
    seed: int = 0
    mask_rate: float = 0.20
    dtype: str = "float32"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})
