"""Fine-tuned downstream evaluation: plane classification, structure
segmentation, and the label-efficiency curve.

Every run trains on the plan's train split, selects the best epoch on
the validation split (F1 for classification, mean Dice for
segmentation), and scores the test split exactly once with the selected
state. Folds and seeds are independent runs merged by aggregate_runs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_encoder_checkpoint
from .dataset import DatasetIndex, normalize_image, resize_mask
from .errors import ConfigError
from .metrics import MetricsReport, dice, f1_macro
from .rng import derive_int, stream
from .segdecoder import SegmenterModel
from .splits import SplitMode, SplitPlan, audit_no_leakage, make_fass_splits
from .vit import EncoderConfig, VisionTransformer, build_encoder


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3.0e-4
    weight_decay: float = 0.01
    eval_every: int = 1
    decoder_channels: int = 96

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("finetune epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("finetune lr must be positive")


def resolve_encoder(
    source: Path | VisionTransformer | None,
    encoder_config: EncoderConfig | None,
    init_seed: int,
) -> VisionTransformer:
    """Checkpoint path, live module, or None for a fresh random init
    (the from-scratch baseline)."""
    if isinstance(source, VisionTransformer):
        return copy.deepcopy(source)
    if source is None:
        if encoder_config is None:
            raise ConfigError("random-init encoder needs an encoder config")
        return build_encoder(encoder_config, derive_int(init_seed, "scratch"))
    encoder, _, _ = load_encoder_checkpoint(source, expected_config=encoder_config)
    return encoder


def _image_tensor(index: DatasetIndex, ids, size: int) -> torch.Tensor:
    return torch.stack([normalize_image(index.load_image(i), size, index.stats) for i in ids])


def _label_tensor(index: DatasetIndex, ids) -> torch.Tensor:
    labels = []
    for image_id in ids:
        label = index.record(image_id).class_label
        if label is None:
            raise ConfigError(f"classification requires labels; {image_id!r} has none")
        labels.append(label)
    return torch.tensor(labels, dtype=torch.int64)


def _mask_tensor(index: DatasetIndex, ids, size: int) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(resize_mask(index.load_mask(i), size).astype(np.int64)) for i in ids]
    )


class ClassifierModel(torch.nn.Module):
    def __init__(self, encoder: VisionTransformer, class_count: int):
        super().__init__()
        self.encoder = encoder
        self.head = torch.nn.Linear(encoder.config.embed_dim, class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder.encode(x).cls)


def _train_epochs(model, x_train, y_train, cfg, seed, loss_fn, score_fn):
    """Shared epoch loop: AdamW, shuffled minibatches, best-epoch state
    by the validation score."""
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = stream(seed, "finetune-shuffle")
    best_score, best_state = -math.inf, None
    for epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(x_train))
        for start in range(0, len(order), cfg.batch_size):
            sel = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            opt.zero_grad()
            loss = loss_fn(model(x_train[sel]), y_train[sel])
            loss.backward()
            opt.step()
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            score = score_fn(model)
            if score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return best_score


def _batched_argmax(model, x, batch: int = 16) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch):
            outs.append(model(x[start : start + batch]).argmax(dim=1))
    return torch.cat(outs)


def finetune_classifier(
    encoder_source: Path | VisionTransformer | None,
    index: DatasetIndex,
    plan: SplitPlan,
    cfg: FinetuneConfig | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    encoder_config: EncoderConfig | None = None,
    method: str = "encoder",
    pretrain_data: str = "-",
    fingerprint: str = "",
) -> MetricsReport:
    """Full fine-tuning with a linear head on [CLS]; test macro F1 per seed."""
    cfg = cfg or FinetuneConfig()
    audit_no_leakage(plan, index)
    size = None
    values = []
    for seed in seeds:
        encoder = resolve_encoder(encoder_source, encoder_config, seed)
        size = encoder.config.image_size
        torch.manual_seed(derive_int(seed, "cls-head"))
        model = ClassifierModel(encoder, index.class_count)
        x_train = _image_tensor(index, plan.train_ids, size)
        y_train = _label_tensor(index, plan.train_ids)
        if len(set(y_train.tolist())) < 2:
            raise ConfigError("degenerate split: training split contains a single class")
        x_val = _image_tensor(index, plan.val_ids, size)
        y_val = _label_tensor(index, plan.val_ids)

        def val_f1(m):
            return f1_macro(_batched_argmax(m, x_val).numpy(), y_val.numpy(), index.class_count)

        _train_epochs(model, x_train, y_train, cfg, seed,
                      torch.nn.functional.cross_entropy, val_f1)
        x_test = _image_tensor(index, plan.test_ids, size)
        y_test = _label_tensor(index, plan.test_ids)
        values.append(f1_macro(_batched_argmax(model, x_test).numpy(), y_test.numpy(),
                               index.class_count))
    return MetricsReport.from_values(
        task_id="cls_finetune_f1", metric="f1", values=values, aggregation="seeds",
        method=method, pretrain_data=pretrain_data, fingerprint=fingerprint,
        extras={"epochs": cfg.epochs, "mode": plan.mode},
    )


def segmentation_mean_dice(pred: torch.Tensor, truth: torch.Tensor, palette) -> float:
    """Mean over images of per-image mean Dice (both-empty classes excluded)."""
    scores = []
    for p, t in zip(pred.numpy(), truth.numpy()):
        _, mean = dice(p, t, tuple(palette))
        if not math.isnan(mean):
            scores.append(mean)
    return float(np.mean(scores)) if scores else math.nan


def _seg_dice_score(model, x, y, palette, batch: int = 8) -> float:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(x), batch):
            preds.append(model(x[start : start + batch]).argmax(dim=1))
    return segmentation_mean_dice(torch.cat(preds), y, palette)


def finetune_segmenter_single(
    encoder_source: Path | VisionTransformer | None,
    index: DatasetIndex,
    plan: SplitPlan,
    cfg: FinetuneConfig,
    seed: int,
    encoder_config: EncoderConfig | None = None,
) -> float:
    """One (plan, seed) segmentation run; returns test mean Dice."""
    audit_no_leakage(plan, index)
    encoder = resolve_encoder(encoder_source, encoder_config, seed)
    size = encoder.config.image_size
    torch.manual_seed(derive_int(seed, "seg-decoder"))
    model = SegmenterModel(encoder, num_classes=max(index.mask_palette) + 1,
                           channels=cfg.decoder_channels)
    palette = index.mask_palette

    x_train = _image_tensor(index, plan.train_ids, size)
    y_train = _mask_tensor(index, plan.train_ids, size)
    x_val = _image_tensor(index, plan.val_ids, size)
    y_val = _mask_tensor(index, plan.val_ids, size)
    if x_train.shape[-2:] != y_train.shape[-2:]:
        raise ConfigError("image and mask sizes disagree after resizing")

    def val_dice(m):
        return _seg_dice_score(m, x_val, y_val, palette)

    _train_epochs(model, x_train, y_train, cfg, seed,
                  torch.nn.functional.cross_entropy, val_dice)
    x_test = _image_tensor(index, plan.test_ids, size)
    y_test = _mask_tensor(index, plan.test_ids, size)
    return _seg_dice_score(model, x_test, y_test, palette)


def finetune_segmenter(
    encoder_source: Path | VisionTransformer | None,
    index: DatasetIndex,
    plans: SplitPlan | list[SplitPlan],
    cfg: FinetuneConfig | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    encoder_config: EncoderConfig | None = None,
    task_id: str = "seg_dice",
    method: str = "encoder",
    pretrain_data: str = "-",
    fingerprint: str = "",
) -> MetricsReport:
    """Segmentation fine-tuning over folds (one seed each) or over seeds
    of a single plan."""
    cfg = cfg or FinetuneConfig()
    if isinstance(plans, SplitPlan):
        runs = [(plans, seed) for seed in seeds]
        aggregation = "seeds"
    else:
        runs = [(plan, plan.fold_seed) for plan in plans]
        aggregation = "folds"
    values = [
        finetune_segmenter_single(encoder_source, index, plan, cfg, seed, encoder_config)
        for plan, seed in runs
    ]
    return MetricsReport.from_values(
        task_id=task_id, metric="dice", values=values, aggregation=aggregation,
        method=method, pretrain_data=pretrain_data, fingerprint=fingerprint,
        extras={"epochs": cfg.epochs, "modes": sorted({p.mode for p, _ in runs})},
    )


@dataclass(frozen=True)
class CurvePoint:
    fraction: float
    mean: float
    std: float
    per_fold: tuple[float, ...]


def label_efficiency_curve(
    encoder_source: Path | VisionTransformer | None,
    index: DatasetIndex,
    fractions=(0.10, 0.25, 0.50, 1.0),
    folds: int = 5,
    cfg: FinetuneConfig | None = None,
    encoder_config: EncoderConfig | None = None,
) -> list[CurvePoint]:
    """Fine-tune per fraction per fold; monotone-x curve records."""
    cfg = cfg or FinetuneConfig()
    fractions = sorted(float(f) for f in fractions)
    if not fractions or not all(0.0 < f <= 1.0 for f in fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {fractions}")
    points = []
    for f in fractions:
        mode = SplitMode.full() if f >= 1.0 else SplitMode.fraction(f)
        per_fold = []
        for fold in range(folds):
            plan = make_fass_splits(index, mode, fold_seed=fold)
            per_fold.append(
                finetune_segmenter_single(encoder_source, index, plan, cfg, fold,
                                          encoder_config)
            )
        arr = np.asarray(per_fold)
        points.append(CurvePoint(
            fraction=f, mean=float(arr.mean()), std=float(arr.std(ddof=0)),
            per_fold=tuple(per_fold),
        ))
    return points
