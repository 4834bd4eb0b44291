"""Model architecture configuration shared by all network variants."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; presets trade fidelity for CPU speed."""

    input_dims: tuple[int, int, int] = (160, 256, 40)
    in_channels: int = 3
    seg_classes: int = 3
    num_classes: int = 10
    channels: tuple[int, ...] = (16, 32, 64, 128)
    token_dim: int = 128
    num_memory: int = 8
    num_blocks: int = 4
    ffn_expansion: int = 2
    fc_hidden: int = 128
    meta_off: bool = False
    multiscale_fusion: bool = False
    pixel_path_update: bool = False

    @property
    def token_grid(self) -> tuple[int, int, int]:
        f = 2 ** (len(self.channels) - 1)
        return tuple(d // f for d in self.input_dims)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("input_dims", "channels"):
            d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def full_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def desk_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(input_dims=(48, 64, 16), channels=(8, 16, 32, 64),
                      token_dim=32, num_memory=8, fc_hidden=32)
    return dataclasses.replace(cfg, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(input_dims=(32, 32, 8), channels=(4, 8, 16, 32),
                      token_dim=16, num_memory=4, fc_hidden=16)
    return dataclasses.replace(cfg, **overrides)


def gradcheck_config(**overrides) -> ModelConfig:
    """Smallest usable model for finite-difference verification (<1e4 params)."""
    cfg = ModelConfig(input_dims=(8, 8, 16), channels=(2, 3, 4, 4),
                      token_dim=8, num_memory=2, fc_hidden=8)
    return dataclasses.replace(cfg, **overrides)


MODEL_PRESETS = {"full": full_config, "desk": desk_config, "tiny": tiny_config,
                 "gradcheck": gradcheck_config}
