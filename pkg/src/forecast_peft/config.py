"""Model and fine-tuning configuration objects."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

MODES = ("pretrain", "full_ft", "peft_a", "peft", "head_only", "lora")


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class BackboneConfig:
    """Shapes of the masked-autoencoder backbone.

    ``H``/``T`` are history/future window lengths on the unified grid and ``P``
    is the number of points per lane polyline.
    """

    C: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    K: int = 3
    H: int = 10
    T: int = 12
    P: int = 20

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"BackboneConfig.{f.name} must be positive")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} is not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class PeftConfig:
    """Which additive modules exist and which pretrained groups are unfrozen."""

    prompt_length: int = 8
    cep_depth: int = 2
    mcp_enabled: bool = True
    adapter_rank: int = 8
    adapter_msa: bool = True
    adapter_ffn: bool = True
    unfreeze_bias: bool = True
    unfreeze_layer_norm: bool = True
    unfreeze_head: bool = True
    lora_rank: int = 16
    lora_targets: tuple = ("q", "v")
    lora_layers: str = "encoder"

    def __post_init__(self):
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")
        if self.cep_depth < 0:
            raise ConfigError("cep_depth must be >= 0")
        if self.adapters_enabled and self.adapter_rank < 1:
            raise ConfigError("adapter_rank must be >= 1 when adapters are enabled")
        if self.lora_layers not in ("encoder", "decoder", "all"):
            raise ConfigError(f"lora_layers must be encoder|decoder|all, got {self.lora_layers!r}")
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    @property
    def adapters_enabled(self) -> bool:
        return self.adapter_msa or self.adapter_ffn

    def replace(self, **changes) -> "PeftConfig":
        data = asdict(self)
        data.update(changes)
        return PeftConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lora_targets"] = list(self.lora_targets)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PeftConfig":
        return _from_dict(cls, data)


def large_backbone() -> BackboneConfig:
    """Full-size backbone: C=128, 4+4 layers, six modes, 5 s / 6 s at 10 Hz."""
    return BackboneConfig(C=128, enc_layers=4, dec_layers=4, heads=8, K=6, H=50, T=60, P=20)


def large_peft() -> PeftConfig:
    return PeftConfig(prompt_length=50, cep_depth=4, adapter_rank=64, lora_rank=16)


def desk_backbone(**overrides) -> BackboneConfig:
    return BackboneConfig(**{**asdict(BackboneConfig()), **overrides})


def desk_peft(**overrides) -> PeftConfig:
    return PeftConfig().replace(**overrides) if overrides else PeftConfig()


@dataclass
class LossWeights:
    history: float = 1.0
    future: float = 1.0
    lane: float = 0.35
    huber_delta: float = 1.0
    classification: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return _from_dict(cls, data)


__all__ = [
    "MODES", "BackboneConfig", "PeftConfig", "LossWeights",
    "large_backbone", "large_peft", "desk_backbone", "desk_peft",
]
