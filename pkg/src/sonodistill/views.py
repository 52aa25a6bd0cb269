"""Multi-crop view generation and student-side patch masking.

Two global views and L local views per image, each an independent
random-resized crop with flip and intensity jitter (grayscale, so no
color ops). Student-side masks are contiguous blobs on the patch grid
with a realized ratio guaranteed inside the configured bounds. The
whole batch is a pure function of (image, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetStats, _STD_EPS
from .errors import ConfigError


@dataclass(frozen=True)
class AugmentationConfig:
    global_size: int = 64
    local_size: int = 32
    local_count: int = 4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.08, 0.4)
    mask_ratio: tuple[float, float] = (0.1, 0.5)
    patch_size: int = 8
    hflip_prob: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.15
    noise_std: float = 0.01
    channels: int = 3

    def __post_init__(self):
        if self.global_size <= 0 or self.local_size <= 0:
            raise ConfigError("view sizes must be positive")
        if self.local_count < 0:
            raise ConfigError(f"views.local_count must be >= 0, got {self.local_count}")
        if not (0.0 < self.global_scale[0] <= self.global_scale[1] <= 1.0):
            raise ConfigError(f"views.global_scale invalid: {self.global_scale}")
        if not (0.0 < self.local_scale[0] <= self.local_scale[1] <= 1.0):
            raise ConfigError(f"views.local_scale invalid: {self.local_scale}")
        if not (0.0 <= self.mask_ratio[0] <= self.mask_ratio[1] <= 1.0):
            raise ConfigError(f"views.mask_ratio invalid: {self.mask_ratio}")
        if self.global_size % self.patch_size != 0:
            raise ConfigError(
                f"views.global_size {self.global_size} not divisible by "
                f"patch_size {self.patch_size}"
            )

    @property
    def mask_grid(self) -> int:
        return self.global_size // self.patch_size


@dataclass
class ViewBatch:
    """Per-image augmented views and student-side masks.

    ``global_views``: [2, C, G, G]; ``local_views``: [L, C, S, S];
    ``masks``: [2, g, g] boolean patch grids for the global views.
    """

    global_views: torch.Tensor
    local_views: torch.Tensor
    masks: torch.Tensor
    rng_seed: int

    def __post_init__(self):
        if self.global_views.shape[0] != 2:
            raise ConfigError(f"expected exactly 2 global views, got {self.global_views.shape[0]}")


def sample_block_mask(
    grid: int, ratio_range: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Connected blob of patches; realized ratio stays inside the bounds."""
    total = grid * grid
    r_min, r_max = ratio_range
    lo = math.ceil(r_min * total - 1e-9)
    hi = math.floor(r_max * total + 1e-9)
    if hi <= 0:
        return np.zeros((grid, grid), dtype=bool)
    if hi < lo:
        raise ConfigError(
            f"mask ratio range {ratio_range} admits no patch count on a "
            f"{grid}x{grid} grid"
        )
    target = int(rng.integers(max(lo, 1), hi + 1)) if r_min > 0 else int(rng.integers(lo, hi + 1))
    mask = np.zeros((grid, grid), dtype=bool)
    if target == 0:
        return mask
    start = (int(rng.integers(grid)), int(rng.integers(grid)))
    mask[start] = True
    frontier = set()

    def push_neighbors(cell):
        r, c = cell
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < grid and 0 <= nc < grid and not mask[nr, nc]:
                frontier.add((nr, nc))

    push_neighbors(start)
    placed = 1
    while placed < target and frontier:
        candidates = sorted(frontier)
        cell = candidates[int(rng.integers(len(candidates)))]
        frontier.discard(cell)
        mask[cell] = True
        placed += 1
        push_neighbors(cell)
    return mask


def _crop_box(
    h: int, w: int, out_size: int, scale: tuple[float, float], rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random-resized-crop box."""
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w, max(1, int(round(math.sqrt(area * scale[1])))))
    return (h - side) // 2, (w - side) // 2, side, side


def _augment_view(
    image: np.ndarray, out_size: int, scale: tuple[float, float],
    config: AugmentationConfig, rng: np.random.Generator,
) -> torch.Tensor:
    h, w = image.shape
    top, left, ch, cw = _crop_box(h, w, out_size, scale, rng)
    crop = torch.from_numpy(image[top : top + ch, left : left + cw].copy())[None, None]
    view = F.interpolate(crop, size=(out_size, out_size), mode="bilinear", align_corners=False)[0, 0]
    if rng.random() < config.hflip_prob:
        view = torch.flip(view, dims=(1,))
    if config.brightness > 0:
        view = view + float(rng.uniform(-config.brightness, config.brightness))
    if config.contrast > 0:
        factor = 1.0 + float(rng.uniform(-config.contrast, config.contrast))
        view = (view - view.mean()) * factor + view.mean()
    if config.noise_std > 0:
        noise = rng.standard_normal(view.shape).astype(np.float32) * config.noise_std
        view = view + torch.from_numpy(noise)
    return view


def make_views(
    image: np.ndarray,
    config: AugmentationConfig,
    seed: int,
    stats: DatasetStats | None = None,
) -> ViewBatch:
    """Build the per-image ViewBatch; deterministic given ``seed``."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim != 2:
        raise ConfigError(f"make_views expects a 2D grayscale image, got shape {arr.shape}")
    if min(arr.shape) < config.global_size:
        raise ConfigError(
            f"image {arr.shape} smaller than the global crop size {config.global_size}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed & ((1 << 64) - 1))))

    globals_ = [
        _augment_view(arr, config.global_size, config.global_scale, config, rng)
        for _ in range(2)
    ]
    locals_ = [
        _augment_view(arr, config.local_size, config.local_scale, config, rng)
        for _ in range(config.local_count)
    ]
    masks = np.stack(
        [sample_block_mask(config.mask_grid, config.mask_ratio, rng) for _ in range(2)]
    )

    def finish(view: torch.Tensor) -> torch.Tensor:
        if stats is not None:
            view = (view - stats.mean) / (stats.std + _STD_EPS)
        return view[None].repeat(config.channels, 1, 1)

    global_views = torch.stack([finish(v) for v in globals_])
    if locals_:
        local_views = torch.stack([finish(v) for v in locals_])
    else:
        local_views = torch.zeros(0, config.channels, config.local_size, config.local_size)
    return ViewBatch(
        global_views=global_views,
        local_views=local_views,
        masks=torch.from_numpy(masks),
        rng_seed=seed,
    )
