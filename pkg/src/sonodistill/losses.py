"""Self-distillation objectives: global [CLS] loss, masked patch loss,
anti-collapse centering, and the EMA teacher update.

Teacher logits are centered and sharpened (temperature below the
student's) before the cross-entropy; gradients flow only through the
student path. Centering keeps a per-path EMA of the teacher logit mean.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class LossWeights:
    w_dino: float = 1.0
    w_ibot: float = 1.0
    student_temp: float = 0.1
    teacher_temp: float = 0.07

    def __post_init__(self):
        if self.w_dino < 0 or self.w_ibot < 0:
            raise ConfigError(f"loss weights must be >= 0, got ({self.w_dino}, {self.w_ibot})")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigError("temperatures must be positive")
        if self.teacher_temp > self.student_temp:
            raise ConfigError(
                f"teacher temperature {self.teacher_temp} must not exceed "
                f"student temperature {self.student_temp}"
            )

    def at_teacher_temp(self, teacher_temp: float) -> "LossWeights":
        return replace(self, teacher_temp=teacher_temp)


@dataclass(frozen=True)
class CenterState:
    """EMA of teacher logit means; one instance per head path."""

    center: torch.Tensor
    momentum: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.momentum <= 1.0):
            raise ConfigError(f"center momentum must be in [0,1], got {self.momentum}")
        if not torch.isfinite(self.center).all():
            raise NumericError("center state is non-finite")

    @classmethod
    def zeros(cls, prototype_count: int, momentum: float = 0.9) -> "CenterState":
        return cls(center=torch.zeros(prototype_count), momentum=momentum)


def _require_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite logits")


def _teacher_log_probs(logits: torch.Tensor, center: torch.Tensor, temp: float) -> torch.Tensor:
    return F.log_softmax((logits.detach() - center.to(logits.dtype)) / temp, dim=-1)


def dino_loss(
    student_logits: Sequence[torch.Tensor],
    teacher_logits: Sequence[torch.Tensor],
    weights: LossWeights,
    center: CenterState,
) -> torch.Tensor:
    """Mean over (teacher global g, student view v != g) pairs of H(p_t, p_s).

    ``student_logits``: per-view [B, K]; the first two entries are the
    student's global views, aligned with ``teacher_logits``.
    """
    if len(teacher_logits) != 2:
        raise ConfigError(f"expected 2 teacher global views, got {len(teacher_logits)}")
    if len(student_logits) < 2:
        raise ConfigError("student must provide at least the two global views")
    _require_finite("dino_loss(student)", *student_logits)
    _require_finite("dino_loss(teacher)", *teacher_logits)

    student_logp = [F.log_softmax(s / weights.student_temp, dim=-1) for s in student_logits]
    total = None
    pairs = 0
    for g, t_logits in enumerate(teacher_logits):
        p_t = _teacher_log_probs(t_logits, center.center, weights.teacher_temp).exp()
        for v, s_logp in enumerate(student_logp):
            if v == g:
                continue
            pair = -(p_t * s_logp).sum(dim=-1).mean()
            total = pair if total is None else total + pair
            pairs += 1
    return total / pairs


def ibot_loss(
    student_patch_logits: Sequence[torch.Tensor],
    teacher_patch_logits: Sequence[torch.Tensor],
    masks: Sequence[torch.Tensor],
    weights: LossWeights,
    center: CenterState,
) -> torch.Tensor:
    """Masked-position cross-entropy between teacher and student patch
    distributions, averaged over masked positions only.

    Each entry is [B, N, K] for one global view, with ``masks`` entries
    [B, N] (or [B, g, g]) marking the student-masked patches. Zero
    masked positions contribute 0.
    """
    if not (len(student_patch_logits) == len(teacher_patch_logits) == len(masks)):
        raise ConfigError("ibot_loss: per-view sequences must have equal length")
    _require_finite("ibot_loss(student)", *student_patch_logits)
    _require_finite("ibot_loss(teacher)", *teacher_patch_logits)

    total = None
    count = 0
    for s_logits, t_logits, mask in zip(student_patch_logits, teacher_patch_logits, masks):
        flat_mask = mask.reshape(mask.shape[0], -1).bool()
        if flat_mask.shape != s_logits.shape[:2]:
            raise ConfigError(
                f"ibot_loss: mask shape {tuple(mask.shape)} does not match "
                f"patch logits {tuple(s_logits.shape[:2])}"
            )
        n_masked = int(flat_mask.sum())
        if n_masked == 0:
            continue
        p_t = _teacher_log_probs(t_logits, center.center, weights.teacher_temp).exp()
        s_logp = F.log_softmax(s_logits / weights.student_temp, dim=-1)
        ce = -(p_t * s_logp).sum(dim=-1)
        total_view = (ce * flat_mask.to(ce.dtype)).sum()
        total = total_view if total is None else total + total_view
        count += n_masked
    if count == 0:
        ref = student_patch_logits[0] if len(student_patch_logits) else torch.zeros(())
        return torch.zeros((), dtype=ref.dtype)
    return total / count


def total_loss(dino: torch.Tensor, ibot: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    if not (torch.isfinite(torch.as_tensor(dino)) and torch.isfinite(torch.as_tensor(ibot))):
        raise NumericError("total_loss: non-finite loss terms")
    return weights.w_dino * dino + weights.w_ibot * ibot


def update_center(state: CenterState, teacher_logits: torch.Tensor) -> CenterState:
    """c <- m*c + (1-m)*batch_mean; empty batch is a no-op."""
    if teacher_logits.numel() == 0:
        return state
    flat = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1])
    batch_mean = flat.mean(dim=0).to(state.center.dtype)
    new_center = state.momentum * state.center + (1.0 - state.momentum) * batch_mean
    return CenterState(center=new_center, momentum=state.momentum)


def collapse_diagnostic(teacher_logits: torch.Tensor, temp: float) -> float:
    """Std across the batch of teacher softmax outputs (reported, not asserted).

    Approaches 0 when the teacher collapses onto a fixed distribution.
    """
    with torch.no_grad():
        probs = F.softmax(teacher_logits.reshape(-1, teacher_logits.shape[-1]) / temp, dim=-1)
        return float(probs.std(dim=0, unbiased=False).mean())


def named_parameters_of(modules: dict[str, torch.nn.Module]) -> dict[str, torch.nn.Parameter]:
    out = {}
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            out[f"{prefix}.{name}"] = param
    return out


def ema_update(
    teacher_params: dict[str, torch.nn.Parameter] | Iterable[tuple[str, torch.nn.Parameter]],
    student_params: dict[str, torch.nn.Parameter] | Iterable[tuple[str, torch.nn.Parameter]],
    momentum: float,
) -> None:
    """theta_t <- m*theta_t + (1-m)*theta_s for every named parameter.

    Performed under no_grad; the teacher never sees gradients. Raises on
    any name or shape mismatch, naming the parameter.
    """
    if not (0.0 <= momentum <= 1.0):
        raise ConfigError(f"ema momentum must be in [0,1], got {momentum}")
    t_map = dict(teacher_params)
    s_map = dict(student_params)
    if set(t_map) != set(s_map):
        missing = set(t_map).symmetric_difference(s_map)
        raise ConfigError(f"ema_update: parameter sets differ on {sorted(missing)[:4]}")
    with torch.no_grad():
        for name, t_param in t_map.items():
            s_param = s_map[name]
            if t_param.shape != s_param.shape:
                raise ConfigError(
                    f"ema_update: shape mismatch for {name!r}: "
                    f"{tuple(t_param.shape)} vs {tuple(s_param.shape)}"
                )
            t_param.mul_(momentum).add_(s_param.detach(), alpha=1.0 - momentum)


def koleo_regularizer(embeddings: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differential-entropy spread penalty on L2-normalized embeddings.

    Off by default in the training configuration; enable via a positive
    weight to discourage embedding clumping.
    """
    z = F.normalize(embeddings, dim=-1)
    dots = z @ z.t()
    n = z.shape[0]
    if n < 2:
        return torch.zeros((), dtype=embeddings.dtype)
    dots.fill_diagonal_(-2.0)
    nearest = dots.max(dim=1).values
    dist = (2.0 - 2.0 * nearest).clamp_min(eps).sqrt()
    return -dist.log().mean()
