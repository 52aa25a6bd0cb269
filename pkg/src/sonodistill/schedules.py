"""Per-step hyperparameter schedules.

Shapes: warmup-then-cosine for learning rate, cosine ramp for weight
decay and teacher momentum (monotone, endpoint-exact), linear warmup
then constant for the teacher temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class WarmupCosine:
    base: float
    final: float
    warmup_steps: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")

    def value(self, step: int, total_steps: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base * step / self.warmup_steps
        span = total_steps - self.warmup_steps
        if span <= 0:
            return self.final if step >= total_steps else self.base
        progress = (step - self.warmup_steps) / span
        return self.final + (self.base - self.final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class CosineRamp:
    start: float
    end: float

    def value(self, step: int, total_steps: int) -> float:
        progress = step / total_steps if total_steps > 0 else 1.0
        return self.end + (self.start - self.end) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class LinearWarmup:
    start: float
    end: float
    warmup_steps: int = 0

    def value(self, step: int, total_steps: int) -> float:
        if self.warmup_steps <= 0 or step >= self.warmup_steps:
            return self.end
        return self.start + (self.end - self.start) * step / self.warmup_steps


Schedule = WarmupCosine | CosineRamp | LinearWarmup


def schedule_value(schedule: Schedule, step: int, total_steps: int) -> float:
    """Evaluate a schedule; ``step`` must lie in [0, total_steps]."""
    if total_steps < 0:
        raise ConfigError(f"total_steps must be >= 0, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    out = schedule.value(step, total_steps)
    if not math.isfinite(out):
        raise ConfigError(f"schedule produced non-finite value at step {step}")
    return out


@dataclass(frozen=True)
class ScheduleSet:
    """All engine schedules. Learning rate base follows the linear
    batch-size scaling rule from a reference batch of 512."""

    lr_base_ref: float = 2.0e-3
    lr_final: float = 1.0e-6
    lr_warmup_steps: int = 50
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    teacher_momentum_start: float = 0.992
    teacher_momentum_end: float = 1.0
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_steps: int = 50
    reference_batch: int = 512

    def __post_init__(self):
        if not (0.0 <= self.teacher_momentum_start <= self.teacher_momentum_end <= 1.0):
            raise ConfigError(
                f"teacher momentum ramp must satisfy 0 <= start <= end <= 1, got "
                f"({self.teacher_momentum_start}, {self.teacher_momentum_end})"
            )
        if self.teacher_temp_start <= 0 or self.teacher_temp_end <= 0:
            raise ConfigError("teacher temperatures must be positive")
        if self.lr_base_ref < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be >= 0")

    def lr(self, batch_size: int) -> WarmupCosine:
        scaled = self.lr_base_ref * batch_size / self.reference_batch
        return WarmupCosine(base=scaled, final=self.lr_final, warmup_steps=self.lr_warmup_steps)

    def weight_decay(self) -> CosineRamp:
        return CosineRamp(start=self.weight_decay_start, end=self.weight_decay_end)

    def teacher_momentum(self) -> CosineRamp:
        return CosineRamp(start=self.teacher_momentum_start, end=self.teacher_momentum_end)

    def teacher_temp(self) -> LinearWarmup:
        return LinearWarmup(
            start=self.teacher_temp_start,
            end=self.teacher_temp_end,
            warmup_steps=self.teacher_temp_warmup_steps,
        )
