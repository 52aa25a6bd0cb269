"""Task metrics and seed/fold aggregation.

Dice per structure class with the both-empty exclusion rule, macro F1
from confusion counts, arithmetic mean with population std for run
aggregation, and the MetricsReport record consumed by the report
renderer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, ConfigError


def dice(
    prediction: np.ndarray, truth: np.ndarray, classes: tuple[int, ...] | list[int]
) -> tuple[dict[int, float], float]:
    """Per-class and mean Dice over the given structure classes.

    A class absent from both masks is excluded from the mean; absent
    from the truth only scores 0. Background is never in ``classes``.
    """
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ConfigError(
            f"dice: shape mismatch {prediction.shape} vs {truth.shape}"
        )
    per_class: dict[int, float] = {}
    included: list[float] = []
    for k in classes:
        p = prediction == k
        t = truth == k
        p_count = int(p.sum())
        t_count = int(t.sum())
        if p_count == 0 and t_count == 0:
            per_class[k] = math.nan
            continue
        value = 2.0 * int((p & t).sum()) / (p_count + t_count)
        per_class[k] = value
        included.append(value)
    mean = float(np.mean(included)) if included else math.nan
    return per_class, mean


def f1_macro(predictions, labels, class_count: int) -> float:
    """Unweighted mean over classes of 2TP/(2TP+FP+FN); 0 for a class
    with no true or predicted instances."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise ConfigError("f1_macro: empty input")
    if predictions.shape != labels.shape:
        raise ConfigError(
            f"f1_macro: length mismatch {predictions.shape} vs {labels.shape}"
        )
    scores = []
    for k in range(class_count):
        tp = int(((predictions == k) & (labels == k)).sum())
        fp = int(((predictions == k) & (labels != k)).sum())
        fn = int(((predictions != k) & (labels == k)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def aggregate_runs(values, mode: str = "seeds") -> tuple[float, float]:
    """Arithmetic mean and population std of per-run metric values."""
    if mode not in ("seeds", "folds"):
        raise ConfigError(f"aggregation mode must be 'seeds' or 'folds', got {mode!r}")
    arr = np.sort(np.asarray(list(values), dtype=np.float64))  # order-invariant reduction
    if arr.size == 0:
        raise ConfigError("aggregate_runs needs at least one value")
    return float(arr.mean()), float(arr.std(ddof=0))


@dataclass
class MetricsReport:
    """Per-task metric values with aggregation and provenance."""

    task_id: str
    metric: str  # "dice" | "f1"
    values: list[float]
    mean: float
    std: float
    aggregation: str  # "seeds" | "folds"
    method: str
    pretrain_data: str
    fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in ("dice", "f1"):
            raise ConfigError(f"metric must be 'dice' or 'f1', got {self.metric!r}")
        want_mean, want_std = aggregate_runs(self.values, self.aggregation)
        if not (math.isclose(self.mean, want_mean, abs_tol=1e-12)
                and math.isclose(self.std, want_std, abs_tol=1e-12)):
            raise ConfigError(
                f"report mean/std not recomputable from stored values for {self.task_id}"
            )

    @classmethod
    def from_values(
        cls, task_id: str, metric: str, values, aggregation: str,
        method: str, pretrain_data: str, fingerprint: str = "", extras: dict | None = None,
    ) -> "MetricsReport":
        mean, std = aggregate_runs(values, aggregation)
        return cls(
            task_id=task_id, metric=metric, values=[float(v) for v in values],
            mean=mean, std=std, aggregation=aggregation, method=method,
            pretrain_data=pretrain_data, fingerprint=fingerprint, extras=extras or {},
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def load_report(path: Path) -> MetricsReport:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a metrics report: {exc}") from exc
    return MetricsReport(**payload)
