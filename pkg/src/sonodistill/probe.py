"""Linear probing of frozen encoder features.

A grid of linear classifiers (feature source x learning rate) is
trained on train-split features; the best cell by validation accuracy
is then scored once on the test split with macro F1. Test features are
never touched before selection, and an access log proves it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_encoder_checkpoint
from .dataset import DatasetIndex, normalize_image
from .errors import ConfigError
from .metrics import MetricsReport, f1_macro
from .rng import derive_int, stream
from .splits import SplitPlan, audit_no_leakage
from .vit import VisionTransformer

FEATURE_SOURCES = ("cls_last", "cls_cat4", "patch_mean")


@dataclass(frozen=True)
class ProbeGrid:
    sources: tuple[str, ...] = FEATURE_SOURCES
    learning_rates: tuple[float, ...] = tuple(np.geomspace(1e-4, 1e-1, 7).tolist())
    epochs: int = 25
    batch_size: int = 64

    def __post_init__(self):
        if not self.sources or not self.learning_rates:
            raise ConfigError("probe grid must be non-empty")
        unknown = set(self.sources) - set(FEATURE_SOURCES)
        if unknown:
            raise ConfigError(f"unknown feature sources: {sorted(unknown)}")

    def cells(self) -> list[tuple[str, float]]:
        return [(s, lr) for s in self.sources for lr in self.learning_rates]


class AccessAudit:
    """Ordered log of (image_id, phase) feature reads."""

    def __init__(self):
        self.entries: list[tuple[str, str]] = []

    def record(self, image_id: str, phase: str) -> None:
        self.entries.append((image_id, phase))

    def accesses_outside_phase(self, ids, phase: str) -> int:
        wanted = set(ids)
        return sum(1 for i, p in self.entries if i in wanted and p != phase)


def extract_features(
    encoder: VisionTransformer,
    index: DatasetIndex,
    ids,
    source: str,
    phase: str = "",
    audit: AccessAudit | None = None,
    batch_size: int = 32,
) -> np.ndarray:
    """Frozen-encoder features for one source; encoder left untouched."""
    if source not in FEATURE_SOURCES:
        raise ConfigError(f"unknown feature source {source!r}")
    encoder.eval()
    size = encoder.config.image_size
    taps = list(range(max(encoder.config.depth - 4, 0), encoder.config.depth))
    rows = []
    ids = list(ids)
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            for image_id in chunk:
                if audit is not None:
                    audit.record(image_id, phase)
            x = torch.stack(
                [normalize_image(index.load_image(i), size, index.stats) for i in chunk]
            )
            if source == "cls_last":
                feats = encoder.encode(x).cls
            elif source == "patch_mean":
                feats = encoder.encode(x).patches.mean(dim=1)
            else:  # cls_cat4
                layers = encoder.get_intermediate_layers(x, taps)
                feats = torch.cat([t[:, 0] for t in layers], dim=-1)
            rows.append(feats.numpy())
    return np.concatenate(rows, axis=0)


def train_linear_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    lr: float,
    epochs: int,
    seed: int,
    batch_size: int = 64,
) -> torch.nn.Linear:
    torch.manual_seed(derive_int(seed, "probe-linear"))
    head = torch.nn.Linear(features.shape[1], class_count)
    opt = torch.optim.AdamW(head.parameters(), lr=lr)
    x = torch.from_numpy(features.astype(np.float32))
    y = torch.from_numpy(labels.astype(np.int64))
    order_rng = stream(seed, "probe-shuffle")
    for _ in range(epochs):
        order = order_rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            sel = torch.from_numpy(order[start : start + batch_size].copy())
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(head(x[sel]), y[sel])
            loss.backward()
            opt.step()
    return head


def _predict(head: torch.nn.Linear, features: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return head(torch.from_numpy(features.astype(np.float32))).argmax(dim=1).numpy()


def _labels_of(index: DatasetIndex, ids) -> np.ndarray:
    labels = []
    for image_id in ids:
        label = index.record(image_id).class_label
        if label is None:
            raise ConfigError(f"linear probe requires labels; {image_id!r} has none")
        labels.append(label)
    return np.asarray(labels, dtype=np.int64)


def linear_probe(
    encoder_checkpoint: Path | VisionTransformer,
    index: DatasetIndex,
    plan: SplitPlan,
    grid: ProbeGrid | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    method: str = "encoder",
    pretrain_data: str = "-",
    fingerprint: str = "",
) -> MetricsReport:
    """Grid-selected linear probe; reports test macro F1 per seed."""
    grid = grid or ProbeGrid()
    audit_no_leakage(plan, index)
    if isinstance(encoder_checkpoint, VisionTransformer):
        encoder = encoder_checkpoint
    else:
        encoder, _, _ = load_encoder_checkpoint(encoder_checkpoint)
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)

    y_train = _labels_of(index, plan.train_ids)
    y_val = _labels_of(index, plan.val_ids)
    if len(set(y_train.tolist())) < 2:
        raise ConfigError("degenerate probe: training split contains a single class")

    audit = AccessAudit()
    feats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for source in grid.sources:
        feats[source] = (
            extract_features(encoder, index, plan.train_ids, source, "fit", audit),
            extract_features(encoder, index, plan.val_ids, source, "fit", audit),
        )

    per_seed_f1: list[float] = []
    selected: list[dict] = []
    test_feats: dict[str, np.ndarray] = {}
    heads_by_seed: list[tuple[str, torch.nn.Linear]] = []
    for seed in seeds:
        best = None
        for source, lr in grid.cells():
            tr, va = feats[source]
            head = train_linear_classifier(
                tr, y_train, index.class_count, lr, grid.epochs,
                derive_int(seed, "probe-cell", source, repr(lr)), grid.batch_size,
            )
            acc = float((_predict(head, va) == y_val).mean())
            if best is None or acc > best[0]:
                best = (acc, source, lr, head)
        acc, source, lr, head = best
        selected.append({"seed": seed, "source": source, "lr": lr, "val_accuracy": acc})
        heads_by_seed.append((source, head))

    # selection is complete for every seed; only now touch the test split
    y_test = _labels_of(index, plan.test_ids)
    for source, head in heads_by_seed:
        if source not in test_feats:
            test_feats[source] = extract_features(
                encoder, index, plan.test_ids, source, "final", audit
            )
        per_seed_f1.append(f1_macro(_predict(head, test_feats[source]), y_test,
                                    index.class_count))

    leaked = audit.accesses_outside_phase(plan.test_ids, "final")
    return MetricsReport.from_values(
        task_id="cls_probe_f1",
        metric="f1",
        values=per_seed_f1,
        aggregation="seeds",
        method=method,
        pretrain_data=pretrain_data,
        fingerprint=fingerprint,
        extras={
            "selected_cells": selected,
            "test_accesses_before_final": leaked,
            "grid_cells": len(grid.cells()),
        },
    )
