"""3D UNet backbone exposing per-scale encoder and decoder feature maps."""

from __future__ import annotations

import torch
import torch.nn as nn


class ConvBlock(nn.Module):
    """Two conv(3x3x3) + instance norm + ReLU layers."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


def check_divisible(shape: tuple[int, ...], depth: int) -> None:
    """Reject spatial dims not divisible by 2^(depth-1), naming the needed padding."""
    f = 2 ** (depth - 1)
    bad = {i: (f - d % f) % f for i, d in enumerate(shape) if d % f}
    if bad:
        pads = ", ".join(f"axis {i}: pad +{p}" for i, p in bad.items())
        raise ValueError(f"spatial dims {shape} must be divisible by {f} "
                         f"({depth} scales); required padding: {pads}")


class UNet3D(nn.Module):
    """Encoder-decoder segmenter returning logits plus all per-scale features.

    ``channels[k]`` is the width at scale k (k=0 shallow/full resolution,
    k=len-1 deepest).  Encoder and decoder features at each scale share
    spatial dims and channel count.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 channels: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("need at least 2 scales")
        self.channels = tuple(channels)
        self.pool = nn.MaxPool3d(2)
        enc = [ConvBlock(in_channels, channels[0])]
        for cin, cout in zip(channels[:-1], channels[1:]):
            enc.append(ConvBlock(cin, cout))
        self.encoders = nn.ModuleList(enc)
        self.bottom = ConvBlock(channels[-1], channels[-1])
        ups, decs = [], []
        for k in range(len(channels) - 2, -1, -1):
            ups.append(nn.ConvTranspose3d(channels[k + 1], channels[k], 2, stride=2))
            decs.append(ConvBlock(2 * channels[k], channels[k]))
        self.ups = nn.ModuleList(ups)
        self.decoders = nn.ModuleList(decs)
        self.head = nn.Conv3d(channels[0], out_channels, 1)

    @property
    def depth(self) -> int:
        return len(self.channels)

    def forward(self, x: torch.Tensor):
        """Return (seg_logits, encoder_feats, decoder_feats), shallow-to-deep tuples."""
        check_divisible(tuple(x.shape[2:]), self.depth)
        enc_feats = []
        h = x
        for k, block in enumerate(self.encoders):
            if k > 0:
                h = self.pool(h)
            h = block(h)
            enc_feats.append(h)
        dec_feats = [None] * self.depth
        d = self.bottom(enc_feats[-1])
        dec_feats[-1] = d
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            k = self.depth - 2 - i
            d = dec(torch.cat([up(d), enc_feats[k]], dim=1))
            dec_feats[k] = d
        return self.head(d), tuple(enc_feats), tuple(dec_feats)
