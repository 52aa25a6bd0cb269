"""Dataset index, manifest ingestion, and image normalization.

A :class:`DatasetIndex` is read-only after construction and safe for
concurrent readers. Records reference either files on disk or a
generator key (see :mod:`sonodistill.phantom`).

Manifest format: CSV with header ``image_id,path,patient_id,label,mask_path``
(UTF-8, one record per line). Missing optional fields are empty strings
and are recorded as absent, not defaulted. Per-dataset statistics
(mean/std/class_count/mask_palette) live in a JSON sidecar next to the
manifest, computed once at ingestion.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ArtifactIOError, IngestionError

BACKGROUND = 0
MANIFEST_COLUMNS = ("image_id", "path", "patient_id", "label", "mask_path")
_STD_EPS = 1e-6


@dataclass(frozen=True)
class DatasetStats:
    """Intensity statistics over [0,1]-scaled pixels, fixed at ingestion."""

    mean: float
    std: float


@dataclass(frozen=True)
class DatasetRecord:
    image_id: str
    source: str
    patient_id: str
    class_label: int | None
    mask_ref: str | None


ImageLoader = Callable[[DatasetRecord], np.ndarray]
MaskLoader = Callable[[DatasetRecord], np.ndarray]


def read_image_file(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"image file missing: {path}") from exc


def write_image_file(path: Path, array: np.ndarray) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path, format="PNG")


class DatasetIndex:
    """Immutable image/mask/label index with patient grouping.

    Invariants checked at construction: unique image ids, non-empty
    patient ids, labels below ``class_count``. Mask palette membership is
    asserted on every mask load.
    """

    def __init__(
        self,
        records: list[DatasetRecord],
        class_count: int,
        mask_palette: tuple[int, ...],
        image_loader: ImageLoader,
        mask_loader: MaskLoader | None = None,
        stats: DatasetStats | None = None,
    ):
        seen: set[str] = set()
        for rec in records:
            if rec.image_id in seen:
                raise IngestionError(f"duplicate image_id: {rec.image_id!r}")
            seen.add(rec.image_id)
            if not rec.patient_id:
                raise IngestionError(f"record {rec.image_id!r}: empty patient_id")
            if rec.class_label is not None and not (0 <= rec.class_label < class_count):
                raise IngestionError(
                    f"record {rec.image_id!r}: label {rec.class_label} outside "
                    f"[0, {class_count})"
                )
        if BACKGROUND in mask_palette:
            raise IngestionError("mask palette must not contain the background value 0")
        self._records = list(records)
        self._by_id = {rec.image_id: rec for rec in records}
        self.class_count = int(class_count)
        self.mask_palette = tuple(sorted(int(v) for v in mask_palette))
        self._image_loader = image_loader
        self._mask_loader = mask_loader
        self._stats = stats

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[DatasetRecord]:
        return list(self._records)

    def ids(self) -> list[str]:
        return [rec.image_id for rec in self._records]

    def record(self, image_id: str) -> DatasetRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise IngestionError(f"unknown image_id: {image_id!r}") from None

    def has_masks(self) -> bool:
        return any(rec.mask_ref is not None for rec in self._records)

    def has_labels(self) -> bool:
        return any(rec.class_label is not None for rec in self._records)

    def patients(self) -> dict[str, list[str]]:
        """Patient id -> image ids; a non-overlapping partition of the ids."""
        groups: dict[str, list[str]] = {}
        for rec in self._records:
            groups.setdefault(rec.patient_id, []).append(rec.image_id)
        return groups

    def load_image(self, image_id: str) -> np.ndarray:
        return np.asarray(self._image_loader(self.record(image_id)), dtype=np.uint8)

    def load_mask(self, image_id: str) -> np.ndarray:
        rec = self.record(image_id)
        if rec.mask_ref is None or self._mask_loader is None:
            raise IngestionError(f"record {image_id!r} has no mask")
        mask = np.asarray(self._mask_loader(rec), dtype=np.uint8)
        allowed = set(self.mask_palette) | {BACKGROUND}
        found = set(np.unique(mask).tolist())
        if not found <= allowed:
            raise IngestionError(
                f"mask for {image_id!r} contains labels {sorted(found - allowed)} "
                f"outside palette {list(self.mask_palette)}"
            )
        return mask

    def content_hash(self) -> str:
        """Stable hash of the sorted image ids; keys split generation."""
        joined = "\n".join(sorted(self.ids()))
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]

    @property
    def stats(self) -> DatasetStats:
        if self._stats is None:
            self._stats = compute_stats(self)
        return self._stats


def compute_stats(index: DatasetIndex) -> DatasetStats:
    """One pass over all images; moments accumulated in float64."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for image_id in index.ids():
        img = index.load_image(image_id).astype(np.float64) / 255.0
        total += float(img.sum())
        total_sq += float((img * img).sum())
        count += img.size
    if count == 0:
        raise IngestionError("cannot compute statistics of an empty dataset")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return DatasetStats(mean=mean, std=float(np.sqrt(var)))


def normalize_image(
    image: np.ndarray,
    target_size: int,
    stats: DatasetStats | None = None,
    channels: int = 3,
) -> torch.Tensor:
    """Resize, standardize, and replicate a grayscale image for the encoder.

    Bilinear resample to ``target_size`` square, standardize by dataset
    mean/std (per-image when ``stats`` is None) with an epsilon guard
    against zero variance, and replicate the gray channel.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise IngestionError("cannot normalize an empty image")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    t = torch.from_numpy(arr)[None, None]
    if t.shape[-2:] != (target_size, target_size):
        t = F.interpolate(t, size=(target_size, target_size), mode="bilinear", align_corners=False)
    if stats is None:
        mean = float(t.mean())
        std = float(t.std(unbiased=False))
    else:
        mean, std = stats.mean, stats.std
    t = (t - mean) / (std + _STD_EPS)
    return t[0].repeat(channels, 1, 1)


def resize_mask(mask: np.ndarray, target_size: int) -> np.ndarray:
    """Nearest-neighbor resize; never invents new label values."""
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = mask.shape
    if (h, w) == (target_size, target_size):
        return mask.copy()
    rows = np.minimum((np.arange(target_size) + 0.5) * h / target_size, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(target_size) + 0.5) * w / target_size, w - 1).astype(np.int64)
    return mask[np.ix_(rows, cols)]


def sidecar_path(manifest_path: Path) -> Path:
    return Path(str(manifest_path) + ".stats.json")


def write_manifest(
    manifest_path: Path,
    rows: list[dict],
    class_count: int,
    mask_palette: tuple[int, ...],
    stats: DatasetStats,
) -> None:
    manifest_path = Path(manifest_path)
    with manifest_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in MANIFEST_COLUMNS})
    sidecar = {
        "mean": stats.mean,
        "std": stats.std,
        "class_count": class_count,
        "mask_palette": list(mask_palette),
    }
    sidecar_path(manifest_path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_dataset(root: Path, manifest: Path) -> DatasetIndex:
    """Ingest a manifest of image/mask files under ``root``.

    Statistics come from the sidecar when present; otherwise they are
    computed once and the sidecar is written back next to the manifest.
    """
    root = Path(root)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise ArtifactIOError(f"manifest not found: {manifest}")
    with manifest.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise IngestionError(
                f"manifest header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        raw_rows = list(reader)

    records: list[DatasetRecord] = []
    for i, row in enumerate(raw_rows):
        image_id = (row.get("image_id") or "").strip()
        if not image_id:
            raise IngestionError(f"manifest row {i + 2}: empty image_id")
        path = (row.get("path") or "").strip()
        if not (root / path).is_file():
            raise IngestionError(f"record {image_id!r}: image file missing: {root / path}")
        label_text = (row.get("label") or "").strip()
        label = int(label_text) if label_text else None
        mask_text = (row.get("mask_path") or "").strip()
        mask_ref = mask_text or None
        if mask_ref is not None and not (root / mask_ref).is_file():
            raise IngestionError(f"record {image_id!r}: mask file missing: {root / mask_ref}")
        records.append(
            DatasetRecord(
                image_id=image_id,
                source=path,
                patient_id=(row.get("patient_id") or "").strip(),
                class_label=label,
                mask_ref=mask_ref,
            )
        )

    side = sidecar_path(manifest)
    stats = None
    class_count = 0
    palette: tuple[int, ...] = ()
    if side.is_file():
        meta = json.loads(side.read_text(encoding="utf-8"))
        stats = DatasetStats(mean=float(meta["mean"]), std=float(meta["std"]))
        class_count = int(meta.get("class_count", 0))
        palette = tuple(int(v) for v in meta.get("mask_palette", ()))

    def image_loader(rec: DatasetRecord) -> np.ndarray:
        return read_image_file(root / rec.source)

    def mask_loader(rec: DatasetRecord) -> np.ndarray:
        return read_image_file(root / rec.mask_ref)

    if not side.is_file():
        class_count = max((r.class_label for r in records if r.class_label is not None), default=-1) + 1
        probe = DatasetIndex(records, max(class_count, 1), (), image_loader, mask_loader)
        values: set[int] = set()
        for rec in records:
            if rec.mask_ref is not None:
                values |= set(np.unique(read_image_file(root / rec.mask_ref)).tolist())
        palette = tuple(sorted(values - {BACKGROUND}))
        stats = compute_stats(probe)
        rows = [
            {
                "image_id": r.image_id,
                "path": r.source,
                "patient_id": r.patient_id,
                "label": "" if r.class_label is None else str(r.class_label),
                "mask_path": r.mask_ref or "",
            }
            for r in records
        ]
        write_manifest(manifest, rows, max(class_count, 0), palette, stats)

    return DatasetIndex(
        records,
        class_count=class_count,
        mask_palette=palette,
        image_loader=image_loader,
        mask_loader=mask_loader,
        stats=stats,
    )
