"""Compact vision transformer encoder with maskable patch tokens.

The encoder exposes everything the self-distillation objective and the
evaluation battery need: a [CLS] summary token, the patch-token grid,
per-head [CLS] attention maps, intermediate layer outputs for probing
and segmentation taps, and prototype projection heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .rng import derive_int


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    prototype_count: int = 1024
    head_hidden_dim: int = 512
    head_bottleneck_dim: int = 128
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "depth", "heads",
                     "prototype_count", "head_hidden_dim", "head_bottleneck_dim", "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"encoder.image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"encoder.embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_count(self) -> int:
        return self.grid_size ** 2


@dataclass
class TokenBundle:
    """Encoder output: one [CLS] embedding plus the patch-token grid."""

    cls: torch.Tensor      # [B, D]
    patches: torch.Tensor  # [B, N, D]

    def __post_init__(self):
        if not (torch.isfinite(self.cls).all() and torch.isfinite(self.patches).all()):
            raise NumericError("encoder produced non-finite token embeddings")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out, None


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        attn_out, weights = self.attn(self.norm1(x), return_weights)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class VisionTransformer(nn.Module):
    """Patch embedding + [CLS] token + pre-norm transformer stack.

    Masked patches are replaced by a learned mask token before the
    transformer stack. Positional embeddings are added to patch tokens.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_proj = nn.Conv2d(
            config.in_channels, d, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.patch_count, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(
            [Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(d)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        with torch.no_grad():
            self.mask_token.normal_(0.0, 1e-3)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def _check_input(self, x: torch.Tensor) -> int:
        """Validate shape; returns the patch-grid side for this input.

        The canonical size is ``config.image_size`` (where positional
        embeddings live); any square input divisible by the patch size
        is accepted, with positions resampled to the smaller/larger grid
        (local crops rely on this).
        """
        size = self.config.image_size
        p = self.config.patch_size
        ok = (
            x.dim() == 4
            and x.shape[1] == self.config.in_channels
            and x.shape[2] == x.shape[3]
            and x.shape[2] % p == 0
            and x.shape[2] > 0
        )
        if not ok:
            raise ConfigError(
                f"encoder expects input [B, {self.config.in_channels}, {size}, {size}] "
                f"(or a square size divisible by patch_size {p}), got {tuple(x.shape)}"
            )
        return x.shape[2] // p

    def _positions(self, grid: int, dtype: torch.dtype) -> torch.Tensor:
        base = self.config.grid_size
        if grid == base:
            return self.pos_embed.to(dtype)
        square = self.pos_embed.reshape(1, base, base, -1).permute(0, 3, 1, 2)
        resized = F.interpolate(square, size=(grid, grid), mode="bicubic", align_corners=False)
        return resized.permute(0, 2, 3, 1).reshape(1, grid * grid, -1).to(dtype)

    def patch_embed(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Token sequence [B, 1+N, D] with positions; CLS prepended."""
        grid = self._check_input(x)
        tokens = self.patch_proj(x).flatten(2).transpose(1, 2)  # [B, N, D]
        if mask is not None:
            flat = mask.reshape(mask.shape[0], -1)
            if flat.shape != tokens.shape[:2]:
                raise ConfigError(
                    f"mask has {tuple(flat.shape)} flags, expected "
                    f"{tuple(tokens.shape[:2])} (one per patch)"
                )
            tokens = torch.where(flat[..., None], self.mask_token.to(tokens.dtype), tokens)
        tokens = tokens + self._positions(grid, tokens.dtype)
        cls = self.cls_token.to(tokens.dtype).expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1)

    def forward_tokens(
        self, x: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        tokens = self.patch_embed(x, mask)
        for block in self.blocks:
            tokens, _ = block(tokens)
        return self.norm(tokens)

    def encode(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> TokenBundle:
        tokens = self.forward_tokens(x, mask)
        return TokenBundle(cls=tokens[:, 0], patches=tokens[:, 1:])

    def get_intermediate_layers(
        self, x: torch.Tensor, indices: list[int]
    ) -> list[torch.Tensor]:
        """Final-norm-applied token sequences after the requested blocks."""
        for i in indices:
            if not (0 <= i < self.config.depth):
                raise ConfigError(f"layer index {i} outside [0, {self.config.depth})")
        wanted = set(indices)
        tokens = self.patch_embed(x)
        collected: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks):
            tokens, _ = block(tokens)
            if i in wanted:
                collected[i] = self.norm(tokens)
        return [collected[i] for i in indices]

    def attention_maps(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        """[CLS] attention over the patch grid, per head: [B, H, g, g].

        Rows are renormalized over patch positions (the CLS-to-CLS mass
        is dropped), so every returned map sums to 1.
        """
        if not (0 <= layer < self.config.depth):
            raise ConfigError(f"layer index {layer} outside [0, {self.config.depth})")
        tokens = self.patch_embed(x)
        weights = None
        for i, block in enumerate(self.blocks):
            tokens, w = block(tokens, return_weights=(i == layer))
            if i == layer:
                weights = w
                break
        cls_row = weights[:, :, 0, 1:]  # [B, H, N]
        cls_row = cls_row / cls_row.sum(dim=-1, keepdim=True).clamp_min(1e-12)
        g = int(math.isqrt(cls_row.shape[-1]))
        return cls_row.reshape(cls_row.shape[0], self.config.heads, g, g)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class ProjectionHead(nn.Module):
    """MLP -> L2-normalized bottleneck -> unit-norm prototype logits.

    The prototype matrix is normalized inside ``forward``, so every
    prototype vector has unit norm by construction. Separate instances
    serve the [CLS] path and the patch path.
    """

    def __init__(self, in_dim: int, hidden_dim: int, bottleneck_dim: int, prototype_count: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Parameter(torch.empty(prototype_count, bottleneck_dim))
        nn.init.trunc_normal_(self.prototypes, std=0.02)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def prototype_vectors(self) -> torch.Tensor:
        return F.normalize(self.prototypes, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("projection head received non-finite embeddings")
        z = self.mlp(x)
        z = F.normalize(z, dim=-1)
        return F.linear(z, self.prototype_vectors())


def build_encoder(config: EncoderConfig, init_seed: int) -> VisionTransformer:
    """Construct with a derived torch seed so init is reproducible."""
    torch.manual_seed(derive_int(init_seed, "encoder-init"))
    return VisionTransformer(config)


def build_head(config: EncoderConfig, init_seed: int, path: str) -> ProjectionHead:
    torch.manual_seed(derive_int(init_seed, "head-init", path))
    return ProjectionHead(
        config.embed_dim,
        config.head_hidden_dim,
        config.head_bottleneck_dim,
        config.prototype_count,
    )


def flip_consistency(encoder: VisionTransformer, image, layer: int) -> float:
    """Rank correlation between an image's attention maps and the
    flipped-back maps of its mirror. Diagnostic output only; semantic
    heads tend to score high, but no threshold is asserted anywhere.
    """
    from .dataset import normalize_image

    x = normalize_image(image, encoder.config.image_size)[None]
    with torch.no_grad():
        maps = encoder.attention_maps(x, layer)[0]
        flipped = encoder.attention_maps(torch.flip(x, dims=(3,)), layer)[0]
    restored = torch.flip(flipped, dims=(2,))
    a = maps.reshape(maps.shape[0], -1).numpy()
    b = restored.reshape(restored.shape[0], -1).numpy()
    corrs = []
    for h in range(a.shape[0]):
        ra = a[h].argsort().argsort().astype(float)
        rb = b[h].argsort().argsort().astype(float)
        ra -= ra.mean()
        rb -= rb.mean()
        denom = float((ra * ra).sum() ** 0.5 * (rb * rb).sum() ** 0.5)
        corrs.append(float((ra * rb).sum()) / denom if denom > 0 else 0.0)
    return float(sum(corrs) / len(corrs))


def evenly_spaced_taps(depth: int, count: int = 4) -> list[int]:
    """Evenly spaced block indices ending at the last block.

    Arithmetic rounding of depth*(i+1)/count, shifted to 0-based; for a
    depth-6 stack this yields [1, 2, 4, 5].
    """
    if depth < count:
        raise ConfigError(f"need depth >= {count} for {count} tap layers, got {depth}")
    return [int(math.floor(depth * (i + 1) / count + 0.5)) - 1 for i in range(count)]
