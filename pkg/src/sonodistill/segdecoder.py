"""Multi-scale segmentation decoder over transformer patch tokens.

Patch-token maps from four evenly spaced encoder blocks are reshaped to
2D, rescaled into a feature pyramid (x4, x2, x1, x0.5 of the patch
grid), fused top-down with a pooled global context on the deepest
level, and decoded to per-pixel class logits at the input resolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .vit import VisionTransformer, evenly_spaced_taps


def _conv_block(in_ch: int, out_ch: int, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
        nn.GroupNorm(8, out_ch),
        nn.GELU(),
    )


class PyramidDecoder(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int, channels: int = 96):
        super().__init__()
        if channels % 8 != 0:
            raise ConfigError(f"decoder channels must be divisible by 8, got {channels}")
        self.adapters = nn.ModuleList([
            nn.Sequential(
                nn.ConvTranspose2d(embed_dim, embed_dim, 2, stride=2),
                nn.GELU(),
                nn.ConvTranspose2d(embed_dim, embed_dim, 2, stride=2),
            ),
            nn.ConvTranspose2d(embed_dim, embed_dim, 2, stride=2),
            nn.Identity(),
            nn.MaxPool2d(2),
        ])
        self.laterals = nn.ModuleList(
            [nn.Conv2d(embed_dim, channels, 1) for _ in range(4)]
        )
        self.pool_scales = (1, 2, 3)
        self.pool_convs = nn.ModuleList(
            [_conv_block(channels, channels, kernel=1) for _ in self.pool_scales]
        )
        self.pool_fuse = _conv_block(channels * (1 + len(self.pool_scales)), channels)
        self.smooth = nn.ModuleList([_conv_block(channels, channels) for _ in range(3)])
        self.fuse = _conv_block(channels * 4, channels)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, taps: list[torch.Tensor], grid: int, out_size: int) -> torch.Tensor:
        if len(taps) != 4:
            raise ConfigError(f"decoder expects 4 tap tensors, got {len(taps)}")
        maps = []
        for tokens, adapter, lateral in zip(taps, self.adapters, self.laterals):
            b, n, d = tokens.shape
            if n != grid * grid:
                raise ConfigError(f"tap has {n} tokens, expected {grid * grid}")
            fmap = tokens.transpose(1, 2).reshape(b, d, grid, grid)
            maps.append(lateral(adapter(fmap)))

        deep = maps[3]
        pooled = [deep]
        for scale, conv in zip(self.pool_scales, self.pool_convs):
            p = F.adaptive_avg_pool2d(deep, scale)
            pooled.append(F.interpolate(conv(p), size=deep.shape[-2:], mode="bilinear",
                                        align_corners=False))
        pyramid = [maps[0], maps[1], maps[2], self.pool_fuse(torch.cat(pooled, dim=1))]

        for level in (2, 1, 0):
            up = F.interpolate(pyramid[level + 1], size=pyramid[level].shape[-2:],
                               mode="bilinear", align_corners=False)
            pyramid[level] = self.smooth[level](pyramid[level] + up)

        top = pyramid[0].shape[-2:]
        stacked = torch.cat(
            [pyramid[0]]
            + [F.interpolate(p, size=top, mode="bilinear", align_corners=False)
               for p in pyramid[1:]],
            dim=1,
        )
        logits = self.classifier(self.fuse(stacked))
        return F.interpolate(logits, size=(out_size, out_size), mode="bilinear",
                             align_corners=False)


class SegmenterModel(nn.Module):
    """Encoder + pyramid decoder; both receive gradients when fine-tuned."""

    def __init__(self, encoder: VisionTransformer, num_classes: int, channels: int = 96):
        super().__init__()
        self.encoder = encoder
        self.taps = evenly_spaced_taps(encoder.config.depth)
        self.decoder = PyramidDecoder(encoder.config.embed_dim, num_classes, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != x.shape[-2]:
            raise ConfigError(f"segmenter expects square inputs, got {tuple(x.shape)}")
        layers = self.encoder.get_intermediate_layers(x, self.taps)
        patch_taps = [t[:, 1:] for t in layers]
        grid = x.shape[-1] // self.encoder.config.patch_size
        return self.decoder(patch_taps, grid, x.shape[-1])
