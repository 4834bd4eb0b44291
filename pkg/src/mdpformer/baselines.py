"""Comparison methods: size-based classification over a 10-class segmenter,
and the pooled-feature classifier sharing the segmentation backbone."""

from __future__ import annotations

from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .cpath import MDPFormer
from .spath import FeatureBundle, SPath
from .taxonomy import LESION_CLASSES, LesionClass10
from .unet3d import UNet3D


def s4c_classify(sizes: Mapping[int, int]) -> LesionClass10:
    """Classify by largest lesion segmentation size; all-zero means normal.

    ``sizes`` maps each of the nine lesion class codes to its voxel count.
    Ties break toward the lowest class code.
    """
    missing = [c.value for c in LESION_CLASSES if c.value not in sizes]
    if missing:
        raise ValueError(f"size table must cover all 9 lesion classes, missing {missing}")
    if any(sizes[c.value] < 0 for c in LESION_CLASSES):
        raise ValueError("lesion sizes must be non-negative")
    best = max(LESION_CLASSES, key=lambda c: (sizes[c.value], -c.value))
    if sizes[best.value] == 0:
        return LesionClass10.NORMAL
    return best


def lesion_size_table(seg10: np.ndarray) -> dict[int, int]:
    """Voxel counts per lesion class from a 10-class label grid."""
    return {c.value: int((seg10 == c.value).sum()) for c in LESION_CLASSES}


class Seg10Net(nn.Module):
    """The segmentation backbone with a 10-class head (size-rule baseline)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet3D(cfg.in_channels, cfg.num_classes, cfg.channels)

    def forward(self, x: torch.Tensor, meta: torch.Tensor | None = None) -> torch.Tensor:
        logits, _, _ = self.unet(x)
        return logits


def global_max_pool_concat(bundle: FeatureBundle) -> torch.Tensor:
    """Global max pool each encoder/decoder map and concatenate: (B, 2*sum(C))."""
    pooled = [f.amax(dim=(2, 3, 4)) for f in bundle.enc + bundle.dec]
    return torch.cat(pooled, dim=1)


class SPathFC(nn.Module):
    """Pooled-feature classifier on top of the segmentation path."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.spath = SPath(cfg)
        feat = 2 * sum(cfg.channels)
        self.fc1 = nn.Linear(feat, cfg.fc_hidden)
        self.fc2 = nn.Linear(cfg.fc_hidden, cfg.num_classes)

    def classify_bundle(self, bundle: FeatureBundle) -> torch.Tensor:
        pooled = global_max_pool_concat(bundle)
        logits = self.fc2(torch.relu(self.fc1(pooled)))
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, meta: torch.Tensor | None = None):
        bundle = self.spath(x)
        return self.classify_bundle(bundle), bundle.seg_logits


MODEL_KINDS = ("mdpformer", "dpformer", "spath_fc", "seg10")


def build_model(kind: str, cfg: ModelConfig) -> nn.Module:
    """Instantiate a model variant by name; dpformer is mdpformer with meta off."""
    import dataclasses
    if kind == "mdpformer":
        return MDPFormer(dataclasses.replace(cfg, meta_off=False))
    if kind == "dpformer":
        return MDPFormer(dataclasses.replace(cfg, meta_off=True))
    if kind == "spath_fc":
        return SPathFC(cfg)
    if kind == "seg10":
        return Seg10Net(cfg)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
