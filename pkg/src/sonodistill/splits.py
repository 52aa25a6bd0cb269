"""Reproducible split planning for the evaluation protocols.

The test partition is fixed by a deterministic hash of image ids (or
patient ids for patient-level protocols), so it is identical across all
modes of the same dataset and across fold seeds. Fold-to-fold variation
only ever touches the train/validation side.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from dataclasses import dataclass
from pathlib import Path

from .dataset import DatasetIndex
from .errors import ArtifactIOError, ConfigError
from .rng import stream

TEST_FRACTION = 0.2
PLAN_TAG = "splitplan-v1"


@dataclass(frozen=True)
class SplitMode:
    """One of: full(train_frac) | few_shot_images(n) |
    few_shot_patients(p, max_per_patient) | fraction(f)."""

    kind: str
    train_frac: float = 0.8
    n_images: int = 20
    patients: int = 4
    max_per_patient: int = 10
    fraction: float = 1.0

    @classmethod
    def full(cls, train_frac: float = 0.8) -> "SplitMode":
        return cls(kind="full", train_frac=train_frac)

    @classmethod
    def few_shot_images(cls, n: int = 20) -> "SplitMode":
        return cls(kind="few_shot_images", n_images=n)

    @classmethod
    def few_shot_patients(cls, p: int = 4, cap: int = 10) -> "SplitMode":
        return cls(kind="few_shot_patients", patients=p, max_per_patient=cap)

    @classmethod
    def fraction(cls, f: float) -> "SplitMode":
        return cls(kind="fraction", fraction=f)

    def describe(self) -> str:
        if self.kind == "full":
            return f"full train_frac={self.train_frac}"
        if self.kind == "few_shot_images":
            return f"few_shot_images n={self.n_images}"
        if self.kind == "few_shot_patients":
            return f"few_shot_patients p={self.patients} cap={self.max_per_patient}"
        if self.kind == "fraction":
            return f"fraction f={self.fraction}"
        raise ConfigError(f"unknown split mode {self.kind!r}")


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    patient_disjoint: bool
    mode: str
    fold_seed: int
    dataset_hash: str

    def __post_init__(self):
        train, val, test = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if train & val or train & test or val & test:
            raise ConfigError("split partitions must be pairwise disjoint")

    def serialize(self) -> str:
        lines = [
            f"# {PLAN_TAG}",
            f"dataset_hash={self.dataset_hash}",
            f"mode={self.mode}",
            f"fold_seed={self.fold_seed}",
            f"patient_disjoint={'true' if self.patient_disjoint else 'false'}",
        ]
        for section, ids in (
            ("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)
        ):
            lines.append(f"[{section}]")
            lines.extend(ids)
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")


def load_split_plan(path: Path) -> SplitPlan:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read split plan {path}: {exc}") from exc
    if not lines or lines[0] != f"# {PLAN_TAG}":
        raise ConfigError(f"{path}: not a {PLAN_TAG} file")
    header: dict[str, str] = {}
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current: str | None = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise ConfigError(f"{path}: unknown section {current!r}")
        elif current is None:
            key, _, value = line.partition("=")
            header[key] = value
        elif line:
            sections[current].append(line)
    return SplitPlan(
        train_ids=tuple(sections["train"]),
        val_ids=tuple(sections["val"]),
        test_ids=tuple(sections["test"]),
        patient_disjoint=header.get("patient_disjoint") == "true",
        mode=header.get("mode", ""),
        fold_seed=int(header.get("fold_seed", "0")),
        dataset_hash=header.get("dataset_hash", ""),
    )


def _hash_rank(dataset_hash: str, key: str) -> int:
    digest = hashlib.sha256(f"{dataset_hash}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _fixed_test_ids(index: DatasetIndex, dataset_hash: str) -> list[str]:
    ids = sorted(index.ids())
    ranked = sorted(ids, key=lambda i: (_hash_rank(dataset_hash, i), i))
    n_test = max(1, int(len(ids) * TEST_FRACTION))
    return sorted(ranked[:n_test])


def make_fass_splits(index: DatasetIndex, mode: SplitMode, fold_seed: int = 0) -> SplitPlan:
    """Image-level protocol with a shared hash-fixed 20% test set.

    full: 80/20 train/val of the remainder. few_shot_images: exactly n
    training images, rest validation. fraction(f): floor(f * remainder)
    training images, rest validation; f = 1.0 is the full protocol (the
    curve's rightmost point duplicates the full-dataset run).
    """
    if not index.has_masks() and mode.kind != "full":
        raise ConfigError("segmentation split planning requires masks")
    dataset_hash = index.content_hash()
    test_ids = _fixed_test_ids(index, dataset_hash)
    remainder = sorted(set(index.ids()) - set(test_ids))
    order = list(stream(fold_seed, "fass", dataset_hash).permutation(len(remainder)))
    shuffled = [remainder[i] for i in order]

    if mode.kind == "fraction" and mode.fraction >= 1.0:
        mode = SplitMode.full()
    if mode.kind == "full":
        n_train = int(len(shuffled) * mode.train_frac)
        train, val = shuffled[:n_train], shuffled[n_train:]
    elif mode.kind == "few_shot_images":
        if len(shuffled) < mode.n_images:
            raise ConfigError(
                f"remainder of {len(shuffled)} images smaller than the requested "
                f"few-shot n={mode.n_images}"
            )
        train, val = shuffled[: mode.n_images], shuffled[mode.n_images :]
    elif mode.kind == "fraction":
        if not (0.0 < mode.fraction < 1.0):
            raise ConfigError(f"fraction must lie in (0, 1], got {mode.fraction}")
        n_train = int(math.floor(mode.fraction * len(shuffled)))
        if n_train < 1:
            raise ConfigError(f"fraction {mode.fraction} yields an empty training set")
        train, val = shuffled[:n_train], shuffled[n_train:]
    else:
        raise ConfigError(f"mode {mode.kind!r} is not an image-level protocol")

    return SplitPlan(
        train_ids=tuple(sorted(train)),
        val_ids=tuple(sorted(val)),
        test_ids=tuple(test_ids),
        patient_disjoint=False,
        mode=mode.describe(),
        fold_seed=fold_seed,
        dataset_hash=dataset_hash,
    )


def visible_ids(index: DatasetIndex) -> list[str]:
    """Ids whose mask shows every structure class in the palette."""
    required = set(index.mask_palette)
    out = []
    for image_id in sorted(index.ids()):
        rec = index.record(image_id)
        if rec.mask_ref is None:
            continue
        present = set(np.unique(index.load_mask(image_id)).tolist())
        if required <= present:
            out.append(image_id)
    return out


def make_jnu_splits(
    index: DatasetIndex, p: int = 4, cap: int = 10, fold_seed: int = 0
) -> SplitPlan:
    """Patient-level few-shot protocol with visibility filtering.

    Images missing any required structure are dropped up front. Half the
    patients (rounded up, chosen by patient-id hash) are held out for
    test; training takes ``p`` of the remaining patients with at most
    ``cap`` images each; validation gets the images of the other
    non-test patients, keeping every partition patient-disjoint.
    """
    if not index.has_masks():
        raise ConfigError("patient-level segmentation splits require masks")
    dataset_hash = index.content_hash()
    eligible = visible_ids(index)
    by_patient: dict[str, list[str]] = {}
    for image_id in eligible:
        by_patient.setdefault(index.record(image_id).patient_id, []).append(image_id)
    patients = sorted(by_patient)
    n_test_patients = math.ceil(len(patients) / 2)
    ranked = sorted(patients, key=lambda pid: (_hash_rank(dataset_hash, pid), pid))
    test_patients = set(ranked[:n_test_patients])
    pool = [pid for pid in patients if pid not in test_patients]
    if len(pool) < p + 1:
        raise ConfigError(
            f"only {len(pool)} eligible non-test patients, need at least {p} for "
            f"training plus held-out validation"
        )
    rng = stream(fold_seed, "jnu", dataset_hash)
    order = list(rng.permutation(len(pool)))
    train_patients = [pool[i] for i in order[:p]]

    train: list[str] = []
    for pid in train_patients:
        imgs = sorted(by_patient[pid])
        picks = list(stream(fold_seed, "jnu-cap", dataset_hash, pid).permutation(len(imgs)))[:cap]
        train.extend(imgs[i] for i in picks)
    val = [
        i for pid in pool if pid not in train_patients for i in by_patient[pid]
    ]
    test = [i for pid in sorted(test_patients) for i in by_patient[pid]]
    return SplitPlan(
        train_ids=tuple(sorted(train)),
        val_ids=tuple(sorted(val)),
        test_ids=tuple(sorted(test)),
        patient_disjoint=True,
        mode=SplitMode.few_shot_patients(p, cap).describe(),
        fold_seed=fold_seed,
        dataset_hash=dataset_hash,
    )


def make_classification_splits(index: DatasetIndex, fold_seed: int = 0) -> SplitPlan:
    """Hash-fixed 20% test, 80/20 train/val of the rest; labels required."""
    if not index.has_labels():
        raise ConfigError("classification splits require class labels")
    dataset_hash = index.content_hash()
    test_ids = _fixed_test_ids(index, dataset_hash)
    remainder = sorted(set(index.ids()) - set(test_ids))
    order = list(stream(fold_seed, "cls", dataset_hash).permutation(len(remainder)))
    shuffled = [remainder[i] for i in order]
    n_train = int(len(shuffled) * 0.8)
    return SplitPlan(
        train_ids=tuple(sorted(shuffled[:n_train])),
        val_ids=tuple(sorted(shuffled[n_train:])),
        test_ids=tuple(test_ids),
        patient_disjoint=False,
        mode="classification train_frac=0.8",
        fold_seed=fold_seed,
        dataset_hash=dataset_hash,
    )


def audit_no_leakage(plan: SplitPlan, index: DatasetIndex) -> None:
    """Id-set audit: partitions disjoint, ids known, patient constraint held."""
    train, val, test = set(plan.train_ids), set(plan.val_ids), set(plan.test_ids)
    all_ids = set(index.ids())
    if not (train | val | test) <= all_ids:
        raise ConfigError("split plan references unknown image ids")
    if plan.patient_disjoint:
        seen: dict[str, str] = {}
        for part, ids in (("train", train), ("val", val), ("test", test)):
            for image_id in ids:
                pid = index.record(image_id).patient_id
                if seen.setdefault(pid, part) != part:
                    raise ConfigError(
                        f"patient {pid} appears in both {seen[pid]} and {part}"
                    )
