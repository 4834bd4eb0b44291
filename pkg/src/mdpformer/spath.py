"""Segmentation path: UNet features, gated encoder/decoder fusion, position embedding.

The fusion step gates decoder features with a sigmoid of the matching encoder
features, refines with a 1x1x1 convolution, and adds a learnable position
embedding, producing the token grid consumed by the classification path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .unet3d import UNet3D


@dataclass
class FeatureBundle:
    """Segmentation logits plus encoder/decoder features at every scale."""

    seg_logits: torch.Tensor                 # (B, 3, Y, X, Z)
    enc: tuple[torch.Tensor, ...]            # shallow -> deep
    dec: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.enc) != len(self.dec):
            raise ValueError("encoder/decoder feature lists must have equal length")
        for k, (e, d) in enumerate(zip(self.enc, self.dec)):
            if e.shape != d.shape:
                raise ValueError(f"scale {k}: encoder {tuple(e.shape)} and decoder "
                                 f"{tuple(d.shape)} features must be shape-matched")


def fuse_features(f_d: torch.Tensor, f_e: torch.Tensor, f_c: nn.Module,
                  q: torch.Tensor) -> torch.Tensor:
    """Gated fusion: conv(decoder * sigmoid(encoder)) + position embedding."""
    if f_d.shape != f_e.shape:
        raise ValueError(f"decoder {tuple(f_d.shape)} and encoder {tuple(f_e.shape)} "
                         "features must be shape-matched")
    fused = f_c(f_d * torch.sigmoid(f_e))
    if q.shape[-4:] != fused.shape[-4:]:
        raise ValueError(f"position embedding {tuple(q.shape)} does not match "
                         f"fused feature {tuple(fused.shape)}")
    return fused + q


class GatedFusion(nn.Module):
    """Eq.-style fusion producing the pixel-token grid for the classification path.

    By default only the deepest encoder/decoder pair is fused (one token per
    deep voxel); with ``multiscale_fusion`` every scale is fused, resized to
    the deepest grid, and summed before the position embedding is added.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.multiscale = cfg.multiscale_fusion
        grid = cfg.token_grid
        scales = range(len(cfg.channels)) if self.multiscale else [len(cfg.channels) - 1]
        self.scale_ids = list(scales)
        self.convs = nn.ModuleDict(
            {str(k): nn.Conv3d(cfg.channels[k], cfg.token_dim, 1) for k in self.scale_ids})
        self.position = nn.Parameter(torch.zeros(cfg.token_dim, *grid))
        nn.init.normal_(self.position, std=0.02)

    def forward(self, bundle: FeatureBundle) -> torch.Tensor:
        deep = len(bundle.dec) - 1
        out = None
        for k in self.scale_ids:
            conv = self.convs[str(k)]
            fused = conv(bundle.dec[k] * torch.sigmoid(bundle.enc[k]))
            if k != deep:
                fused = F.interpolate(fused, size=bundle.dec[deep].shape[2:],
                                      mode="trilinear", align_corners=False)
            out = fused if out is None else out + fused
        return out + self.position


class SPath(nn.Module):
    """3-class segmenter whose multi-scale features feed the classification path."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet3D(cfg.in_channels, cfg.seg_classes, cfg.channels)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        logits, enc, dec = self.unet(x)
        return FeatureBundle(seg_logits=logits, enc=enc, dec=dec)
