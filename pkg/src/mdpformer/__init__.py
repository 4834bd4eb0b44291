"""Dual-path transformer pipeline for joint 3D lesion segmentation and
meta-information-aware classification, with a synthetic phantom benchmark."""

__version__ = "0.1.0"

from .config import ModelConfig, desk_config, full_config, tiny_config
from .cpath import MDPFormer
from .taxonomy import LesionClass10, MetaInfo, SegClass3, encode_meta, map10to3
from .volumes import BoundingBox3D, LabelVolume, Volume3D

__all__ = [
    "BoundingBox3D", "LabelVolume", "LesionClass10", "MDPFormer", "MetaInfo",
    "ModelConfig", "SegClass3", "Volume3D", "desk_config", "encode_meta",
    "full_config", "map10to3", "tiny_config",
]
