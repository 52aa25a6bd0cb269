import numpy as np
import pytest
import torch

from sonodistill.errors import ConfigError
from sonodistill.views import AugmentationConfig, make_views, sample_block_mask


def _image(size=48, seed=0):
    return np.random.default_rng(seed).integers(0, 255, (size, size), dtype=np.uint8)


def test_same_seed_gives_identical_view_batch():
    cfg = AugmentationConfig(global_size=32, local_size=16, local_count=3, patch_size=8)
    a = make_views(_image(), cfg, seed=42)
    b = make_views(_image(), cfg, seed=42)
    assert torch.equal(a.global_views, b.global_views)
    assert torch.equal(a.local_views, b.local_views)
    assert torch.equal(a.masks, b.masks)


def test_different_seed_differs():
    cfg = AugmentationConfig(global_size=32, local_size=16, local_count=0, patch_size=8)
    a = make_views(_image(), cfg, seed=1)
    b = make_views(_image(), cfg, seed=2)
    assert not torch.equal(a.global_views, b.global_views)


def test_identity_augmentation_gives_two_identical_globals():
    cfg = AugmentationConfig(
        global_size=32, local_size=16, local_count=0, patch_size=8,
        global_scale=(1.0, 1.0), hflip_prob=0.0, brightness=0.0,
        contrast=0.0, noise_std=0.0, mask_ratio=(0.0, 0.0),
    )
    vb = make_views(_image(32), cfg, seed=0)
    assert torch.equal(vb.global_views[0], vb.global_views[1])
    assert not vb.masks.any()
    assert vb.local_views.shape[0] == 0


def test_mask_ratios_within_bounds_over_many_draws():
    # exhaustive check over draws at the configured bounds [0.1, 0.5]
    rng = np.random.default_rng(0)
    grid = 8
    total = grid * grid
    for _ in range(10_000):
        mask = sample_block_mask(grid, (0.1, 0.5), rng)
        ratio = mask.sum() / total
        assert 0.1 <= ratio <= 0.5


def test_masks_are_contiguous_blobs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        mask = sample_block_mask(6, (0.2, 0.5), rng)
        # flood fill from any masked cell must reach all masked cells
        cells = {tuple(c) for c in np.argwhere(mask)}
        start = next(iter(cells))
        seen = {start}
        frontier = [start]
        while frontier:
            r, c = frontier.pop()
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nb in cells and nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        assert seen == cells


def test_image_smaller_than_global_crop_rejected():
    cfg = AugmentationConfig(global_size=64, local_size=32, patch_size=8)
    with pytest.raises(ConfigError, match="smaller"):
        make_views(_image(48), cfg, seed=0)


def test_views_shapes_and_channels():
    cfg = AugmentationConfig(global_size=32, local_size=16, local_count=4, patch_size=8)
    vb = make_views(_image(), cfg, seed=7)
    assert vb.global_views.shape == (2, 3, 32, 32)
    assert vb.local_views.shape == (4, 3, 16, 16)
    assert vb.masks.shape == (2, 4, 4)
    assert vb.masks.dtype == torch.bool


def test_global_crop_area_fraction_at_least_configured():
    from sonodistill.views import _crop_box

    rng = np.random.default_rng(3)
    h = w = 64
    for _ in range(1000):
        top, left, ch, cw = _crop_box(h, w, 32, (0.4, 1.0), rng)
        assert ch * cw >= 0.4 * h * w * 0.95  # rounding slack on box edges
        assert 0 <= top <= h - ch and 0 <= left <= w - cw


def test_invalid_ratio_config_rejected():
    with pytest.raises(ConfigError):
        AugmentationConfig(mask_ratio=(0.6, 0.5))
    with pytest.raises(ConfigError):
        AugmentationConfig(global_scale=(0.0, 1.0))
