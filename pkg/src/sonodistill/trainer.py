"""Self-distillation pretraining loop.

Per step: multi-crop view batch -> teacher/student forwards -> global
[CLS] loss + masked patch loss -> optimizer step on the student ->
EMA teacher update -> center updates. All schedules advance per step.
The teacher (backbone and heads) is never registered with the
optimizer; this is asserted at engine construction.

Randomness policy: one root seed fans out to named streams (parameter
init, per-epoch batch order, per-sample view augmentation), so training
state is a pure function of (dataset, config, step). Nothing about the
RNG needs checkpointing, which makes resume bit-exact in deterministic
mode.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import DatasetIndex
from .errors import ConfigError, IncompatibleCheckpointError, NumericError
from .losses import (
    CenterState,
    LossWeights,
    collapse_diagnostic,
    dino_loss,
    ema_update,
    ibot_loss,
    koleo_regularizer,
    named_parameters_of,
    total_loss,
    update_center,
)
from .losslog import LossLogWriter, LossRecord
from .rng import derive_int, stream
from .schedules import ScheduleSet, schedule_value
from .views import AugmentationConfig, make_views
from .vit import EncoderConfig, build_encoder, build_head


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int | None = None  # None: once per epoch, plus final
    grad_clip: float = 3.0
    center_momentum: float = 0.9
    koleo_weight: float = 0.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    schedules: ScheduleSet = field(default_factory=ScheduleSet)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"engine.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"engine.batch_size must be >= 2 (centering needs batch statistics), "
                f"got {self.batch_size}"
            )
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("engine.checkpoint_every must be >= 1 when set")
        if self.augment.global_size != self.encoder.image_size:
            raise ConfigError(
                f"views.global_size {self.augment.global_size} must equal "
                f"encoder.image_size {self.encoder.image_size}"
            )
        if self.augment.patch_size != self.encoder.patch_size:
            raise ConfigError(
                f"views.patch_size {self.augment.patch_size} must equal "
                f"encoder.patch_size {self.encoder.patch_size}"
            )
        if self.augment.local_size % self.encoder.patch_size != 0:
            raise ConfigError(
                f"views.local_size {self.augment.local_size} not divisible by "
                f"patch_size {self.encoder.patch_size}"
            )


@dataclass
class TrainResult:
    final_checkpoint: Path
    encoder_checkpoint: Path
    checkpoint_series: list[Path]
    losslog_path: Path
    records: list[LossRecord]


class TrainEngine:
    """Holds live training state; the step loop is a serialized critical
    section, while dataset reads are side-effect free."""

    def __init__(self, dataset: DatasetIndex, config: RunConfig):
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        if len(dataset) < config.batch_size:
            raise ConfigError(
                f"dataset of {len(dataset)} images smaller than one batch "
                f"({config.batch_size})"
            )
        self.dataset = dataset
        self.config = config
        self.ids = sorted(dataset.ids())
        self.steps_per_epoch = len(self.ids) // config.batch_size
        self.total_steps = config.epochs * self.steps_per_epoch
        self.stats = dataset.stats

        seed = config.seed
        self.student = build_encoder(config.encoder, seed)
        self.student_cls_head = build_head(config.encoder, seed, "cls")
        self.student_patch_head = build_head(config.encoder, seed, "patch")
        self.teacher = copy.deepcopy(self.student)
        self.teacher_cls_head = copy.deepcopy(self.student_cls_head)
        self.teacher_patch_head = copy.deepcopy(self.student_patch_head)
        for module in (self.teacher, self.teacher_cls_head, self.teacher_patch_head):
            module.requires_grad_(False)

        self.student_named = named_parameters_of(
            {"backbone": self.student, "cls_head": self.student_cls_head,
             "patch_head": self.student_patch_head}
        )
        self.teacher_named = named_parameters_of(
            {"backbone": self.teacher, "cls_head": self.teacher_cls_head,
             "patch_head": self.teacher_patch_head}
        )
        self.optimizer = torch.optim.AdamW(
            list(self.student_named.values()), lr=0.0, weight_decay=0.0
        )
        opt_ids = {id(p) for g in self.optimizer.param_groups for p in g["params"]}
        teacher_ids = {id(p) for p in self.teacher_named.values()}
        if opt_ids & teacher_ids:
            raise ConfigError("teacher parameters leaked into the optimizer")

        k = config.encoder.prototype_count
        self.cls_center = CenterState.zeros(k, config.center_momentum)
        self.patch_center = CenterState.zeros(k, config.center_momentum)
        self.step = 0
        self._schedule_denom = max(self.total_steps - 1, 0)

    # -- schedules ---------------------------------------------------------

    def schedule_at(self, step: int) -> tuple[float, float, float, float]:
        s = self.config.schedules
        denom = self._schedule_denom
        pos = min(step, denom)
        lr = schedule_value(s.lr(self.config.batch_size), pos, denom)
        wd = schedule_value(s.weight_decay(), pos, denom)
        momentum = schedule_value(s.teacher_momentum(), pos, denom)
        temp = schedule_value(s.teacher_temp(), pos, denom)
        return lr, wd, momentum, temp

    # -- data --------------------------------------------------------------

    def epoch_order(self, epoch: int) -> list[str]:
        perm = stream(self.config.seed, "order", epoch).permutation(len(self.ids))
        return [self.ids[i] for i in perm]

    def batch_views(self, epoch: int, step_in_epoch: int, batch_ids: list[str]):
        cfg = self.config.augment
        globals_, locals_, masks = [], [], []
        for slot, image_id in enumerate(batch_ids):
            image = self.dataset.load_image(image_id)
            seed = derive_int(self.config.seed, "views", epoch, step_in_epoch, slot)
            vb = make_views(image, cfg, seed, stats=self.stats)
            globals_.append(vb.global_views)
            locals_.append(vb.local_views)
            masks.append(vb.masks)
        g = torch.stack(globals_, dim=1)  # [2, B, C, H, W]
        l = torch.stack(locals_, dim=1) if cfg.local_count > 0 else None
        m = torch.stack(masks, dim=1)     # [2, B, g, g]
        return g, l, m

    # -- one step ----------------------------------------------------------

    def run_step(self) -> LossRecord:
        cfg = self.config
        epoch = self.step // self.steps_per_epoch
        i = self.step % self.steps_per_epoch
        order = self.epoch_order(epoch)
        batch_ids = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
        g_views, l_views, masks = self.batch_views(epoch, i, batch_ids)

        lr, wd, momentum, teacher_temp = self.schedule_at(self.step)
        weights = cfg.losses.at_teacher_temp(teacher_temp)

        with torch.no_grad():
            t_cls, t_patch = [], []
            for v in range(2):
                bundle = self.teacher.encode(g_views[v])
                t_cls.append(self.teacher_cls_head(bundle.cls))
                t_patch.append(self.teacher_patch_head(bundle.patches))

        s_cls, s_patch, s_embed = [], [], []
        for v in range(2):
            bundle = self.student.encode(g_views[v], mask=masks[v])
            s_cls.append(self.student_cls_head(bundle.cls))
            s_patch.append(self.student_patch_head(bundle.patches))
            s_embed.append(bundle.cls)
        if l_views is not None:
            for v in range(l_views.shape[0]):
                bundle = self.student.encode(l_views[v])
                s_cls.append(self.student_cls_head(bundle.cls))

        d = dino_loss(s_cls, t_cls, weights, self.cls_center)
        b = ibot_loss(s_patch, t_patch, list(masks), weights, self.patch_center)
        loss = total_loss(d, b, weights)
        if cfg.koleo_weight > 0:
            loss = loss + cfg.koleo_weight * koleo_regularizer(torch.cat(s_embed))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}")

        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["weight_decay"] = wd
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in self.student_named.values()], cfg.grad_clip
            )
        self.optimizer.step()
        ema_update(self.teacher_named, self.student_named, momentum)
        self.cls_center = update_center(self.cls_center, torch.cat(t_cls))
        self.patch_center = update_center(
            self.patch_center, torch.cat([t.reshape(-1, t.shape[-1]) for t in t_patch])
        )

        dino_val = float(d.detach())
        ibot_val = float(b.detach())
        record = LossRecord(
            step=self.step,
            dino=dino_val,
            ibot=ibot_val,
            total=cfg.losses.w_dino * dino_val + cfg.losses.w_ibot * ibot_val,
            lr=lr,
            momentum=momentum,
            teacher_temp=teacher_temp,
        )
        self.collapse_stat = collapse_diagnostic(torch.cat(t_cls), teacher_temp)
        self.step += 1
        return record

    # -- checkpointing -----------------------------------------------------

    def _optimizer_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}
        extra: dict = {}
        name_of = {id(p): n for n, p in self.student_named.items()}
        for param, state in self.optimizer.state.items():
            pname = name_of[id(param)]
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt.{pname}.{key}"] = value.detach().cpu().numpy()
                else:
                    extra[f"{pname}.{key}"] = value
        return arrays, extra

    def _restore_optimizer(self, arrays: dict[str, np.ndarray], extra: dict) -> None:
        for name, param in self.student_named.items():
            state: dict = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr_key = f"opt.{name}.{key}"
                if arr_key in arrays:
                    t = torch.from_numpy(np.ascontiguousarray(arrays[arr_key]))
                    state[key] = t.reshape(()) if t.ndim == 0 else t
                scalar_key = f"{name}.{key}"
                if scalar_key in extra:
                    state[key] = extra[scalar_key]
            if state:
                self.optimizer.state[param] = state

    def save_state(self, path: Path) -> None:
        arrays = {}
        arrays.update(ckpt.state_dict_to_arrays(self.student, "student."))
        arrays.update(ckpt.state_dict_to_arrays(self.teacher, "teacher."))
        arrays.update(ckpt.state_dict_to_arrays(self.student_cls_head, "student_cls_head."))
        arrays.update(ckpt.state_dict_to_arrays(self.student_patch_head, "student_patch_head."))
        arrays.update(ckpt.state_dict_to_arrays(self.teacher_cls_head, "teacher_cls_head."))
        arrays.update(ckpt.state_dict_to_arrays(self.teacher_patch_head, "teacher_patch_head."))
        arrays["center.cls"] = self.cls_center.center.numpy()
        arrays["center.patch"] = self.patch_center.center.numpy()
        opt_arrays, opt_extra = self._optimizer_arrays()
        arrays.update(opt_arrays)
        meta = {
            "kind": "train_state",
            "step": self.step,
            "encoder_config": asdict(self.config.encoder),
            "optimizer_extra": opt_extra,
        }
        ckpt.save_arrays(path, meta, arrays)

    def load_state(self, path: Path) -> None:
        meta, arrays = ckpt.load_arrays(path)
        if meta.get("kind") != "train_state":
            raise IncompatibleCheckpointError(f"{path}: not a train_state checkpoint")
        found = EncoderConfig(**meta["encoder_config"])
        ckpt.check_config_match(found, self.config.encoder, str(path))
        step = int(meta["step"])
        if step > self.total_steps:
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint step {step} beyond configured run of "
                f"{self.total_steps} steps"
            )
        self.student.load_state_dict(ckpt.arrays_to_state_dict(arrays, "student."))
        self.teacher.load_state_dict(ckpt.arrays_to_state_dict(arrays, "teacher."))
        self.student_cls_head.load_state_dict(ckpt.arrays_to_state_dict(arrays, "student_cls_head."))
        self.student_patch_head.load_state_dict(ckpt.arrays_to_state_dict(arrays, "student_patch_head."))
        self.teacher_cls_head.load_state_dict(ckpt.arrays_to_state_dict(arrays, "teacher_cls_head."))
        self.teacher_patch_head.load_state_dict(ckpt.arrays_to_state_dict(arrays, "teacher_patch_head."))
        self.cls_center = CenterState(
            torch.from_numpy(arrays["center.cls"].copy()), self.config.center_momentum
        )
        self.patch_center = CenterState(
            torch.from_numpy(arrays["center.patch"].copy()), self.config.center_momentum
        )
        self._restore_optimizer(arrays, meta.get("optimizer_extra", {}))
        self.step = step


def _deterministic_guard(enabled: bool):
    class _Guard:
        def __enter__(self):
            if enabled:
                self.prev_algorithms = torch.are_deterministic_algorithms_enabled()
                self.prev_threads = torch.get_num_threads()
                torch.use_deterministic_algorithms(True)
                torch.set_num_threads(1)
            return self

        def __exit__(self, *exc):
            if enabled:
                torch.use_deterministic_algorithms(self.prev_algorithms)
                torch.set_num_threads(self.prev_threads)
            return False

    return _Guard()


def train(
    dataset: DatasetIndex,
    config: RunConfig,
    out_dir: Path,
    resume_from: Path | None = None,
    max_steps: int | None = None,
    fingerprint: str = "",
    on_step: Callable[[TrainEngine, LossRecord], None] | None = None,
) -> TrainResult:
    """Run the pretraining loop; writes checkpoints and the loss log.

    The loss log of a resumed run contains the records produced by this
    invocation (steps after the checkpoint); in deterministic mode they
    are identical to the corresponding slice of an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _deterministic_guard(config.deterministic):
        engine = TrainEngine(dataset, config)
        if resume_from is not None:
            engine.load_state(resume_from)
        last_step = engine.total_steps
        if max_steps is not None:
            last_step = min(last_step, engine.step + max_steps)

        writer = LossLogWriter(out_dir / "losslog.csv", fingerprint)
        diag_path = out_dir / "diagnostics.csv"
        diag_fh = diag_path.open("w", encoding="utf-8")
        diag_fh.write("step,teacher_cls_softmax_std\n")
        series: list[Path] = []
        records = []
        last_good: Path | None = None

        def save_numbered() -> Path:
            path = out_dir / f"ckpt_step{engine.step:07d}.sdck"
            engine.save_state(path)
            series.append(path)
            return path

        try:
            while engine.step < last_step:
                try:
                    record = engine.run_step()
                except NumericError as exc:
                    raise NumericError(
                        f"{exc}; last good checkpoint: "
                        f"{last_good if last_good is not None else 'none'}"
                    ) from exc
                writer.append(record)
                records.append(record)
                diag_fh.write(f"{record.step},{repr(engine.collapse_stat)}\n")
                if on_step is not None:
                    on_step(engine, record)
                cadence = config.checkpoint_every
                at_epoch_end = engine.step % engine.steps_per_epoch == 0
                if (cadence is not None and engine.step % cadence == 0) or (
                    cadence is None and at_epoch_end
                ):
                    last_good = save_numbered()
            if not series or series[-1].name != f"ckpt_step{engine.step:07d}.sdck":
                last_good = save_numbered()
        finally:
            writer.close()
            diag_fh.close()

        encoder_path = out_dir / "encoder_final.sdck"
        ckpt.save_encoder_checkpoint(
            encoder_path,
            engine.teacher,
            extra_meta={"role": "teacher", "step": engine.step, "fingerprint": fingerprint},
        )
        return TrainResult(
            final_checkpoint=series[-1],
            encoder_checkpoint=encoder_path,
            checkpoint_series=series,
            losslog_path=out_dir / "losslog.csv",
            records=records,
        )
