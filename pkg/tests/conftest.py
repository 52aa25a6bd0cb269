import pytest

from sonodistill.losses import LossWeights
from sonodistill.phantom import PhantomSpec, build_phantom_index
from sonodistill.schedules import ScheduleSet
from sonodistill.trainer import RunConfig
from sonodistill.views import AugmentationConfig
from sonodistill.vit import EncoderConfig


def tiny_encoder_config(**overrides) -> EncoderConfig:
    base = dict(
        image_size=32,
        patch_size=8,
        embed_dim=32,
        depth=2,
        heads=2,
        prototype_count=64,
        head_hidden_dim=64,
        head_bottleneck_dim=16,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        epochs=1,
        batch_size=4,
        seed=0,
        encoder=tiny_encoder_config(),
        augment=AugmentationConfig(global_size=32, local_size=16, local_count=2, patch_size=8),
        losses=LossWeights(),
        schedules=ScheduleSet(lr_warmup_steps=2, teacher_temp_warmup_steps=2),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_phantom_index():
    return build_phantom_index(PhantomSpec(image_size=48, seed=1), 16)


@pytest.fixture(scope="session")
def small_phantom_index():
    return build_phantom_index(PhantomSpec(image_size=48, seed=2), 120)
