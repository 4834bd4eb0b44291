"""Stage-1 pancreas localization: small binary segmenter used only for cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .unet3d import UNet3D
from .volumes import (BINARY_CODES, BoundingBox3D, EmptyForegroundError,
                      LabelVolume, Volume3D, bbox_of_mask, central_box, _resize)


@dataclass(frozen=True)
class LocalizerConfig:
    """Architecture/grid settings for the stage-1 localizer."""

    base_channels: int = 8
    depth: int = 2
    in_channels: int = 3
    downsample_xy: int = 2

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** k for k in range(self.depth))


class LocNet(nn.Module):
    """Binary (background/pancreas) encoder-decoder segmenter."""

    def __init__(self, cfg: LocalizerConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet3D(cfg.in_channels, 2, cfg.channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits, _, _ = self.unet(x)
        return logits


@dataclass
class LocalizationResult:
    mask: LabelVolume            # binary, at input resolution
    box: BoundingBox3D
    fallback: bool               # True when the mask was empty and a central box was used


def coarse_grid(v: Volume3D, cfg: LocalizerConfig) -> np.ndarray:
    """Downsample in-plane by the configured factor (z kept), as float32 (C,y,x,Z)."""
    f = cfg.downsample_xy
    dims = (max(1, v.spatial_shape[0] // f), max(1, v.spatial_shape[1] // f),
            v.spatial_shape[2])
    return np.stack([_resize(v.data[c].astype(np.float32), dims, order=1)
                     for c in range(v.num_channels)])


def _pad_to_divisible(arr: np.ndarray, factor: int):
    pads = [(0, (factor - d % factor) % factor) for d in arr.shape[1:]]
    padded = np.pad(arr, [(0, 0)] + pads, mode="edge")
    return padded, pads


def localize(v: Volume3D, net: LocNet) -> LocalizationResult:
    """Predict a binary pancreas mask and its crop box; total (fallback on empty)."""
    cfg = net.cfg
    coarse = coarse_grid(v, cfg)
    factor = 2 ** (cfg.depth - 1)
    padded, pads = _pad_to_divisible(coarse, factor)
    with torch.no_grad():
        logits = net(torch.from_numpy(padded).unsqueeze(0))
    pred = logits.argmax(dim=1)[0].numpy().astype(np.int64)
    pred = pred[tuple(slice(0, s) for s in coarse.shape[1:])]
    full = _resize(pred, v.spatial_shape, order=0)
    mask = LabelVolume(full, v.spacing, valid_codes=BINARY_CODES, origin=v.origin)
    try:
        box = bbox_of_mask(mask, {1})
        return LocalizationResult(mask=mask, box=box, fallback=False)
    except EmptyForegroundError:
        return LocalizationResult(mask=mask, box=central_box(v.spatial_shape), fallback=True)


def oracle_box(pancreas: LabelVolume) -> BoundingBox3D:
    """Crop box straight from a ground-truth pancreas mask (bypasses the network)."""
    return bbox_of_mask(pancreas, {1})
