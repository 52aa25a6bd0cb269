"""Deterministic synthetic ultrasound phantom corpus.

Each sample is a speckle-textured grayscale image with a handful of
elliptical hypoechoic structures. The structure layout template rotates
with the class label (a stand-in for standard planes), structure
identity carries a persistent size/eccentricity/contrast signature, and
speckle is a smoothed Rayleigh envelope. Generation is a pure function
of (spec, index): same inputs, byte-identical image and mask.

Patients are fixed blocks of 8 consecutive indices so patient-level
splits have enough groups at desk scale. A small per-structure dropout
probability produces images with missing structures, which downstream
visibility filtering must exclude.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetIndex,
    DatasetRecord,
    DatasetStats,
    compute_stats,
    write_image_file,
    write_manifest,
)
from .errors import ConfigError
from .rng import stream

PATIENT_BLOCK = 8
_STRUCTURE_DROPOUT = 0.06
_SPECKLE_MIX = 0.55


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 96
    structure_count: int = 3
    speckle_scale: float = 1.0
    class_count: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0:
            raise ConfigError(f"phantom.image_size must be positive, got {self.image_size}")
        if self.structure_count < 0:
            raise ConfigError(f"phantom.structure_count must be >= 0, got {self.structure_count}")
        if self.class_count <= 0:
            raise ConfigError(f"phantom.class_count must be positive, got {self.class_count}")
        if self.speckle_scale <= 0:
            raise ConfigError(f"phantom.speckle_scale must be positive, got {self.speckle_scale}")


@dataclass(frozen=True)
class PhantomSample:
    image: np.ndarray
    mask: np.ndarray
    class_label: int
    patient_id: str


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur with reflected borders."""
    radius = max(1, int(round(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(field, radius, mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, out)
    return out


def _structure_signature(k: int, count: int) -> tuple[float, float, float]:
    """Persistent (depth, semi-axis fraction, axis ratio) of structure k."""
    t = k / max(count - 1, 1)
    depth = 0.34 - 0.14 * t
    semi_axis = 0.09 + 0.05 * t
    axis_ratio = 0.95 - 0.45 * t
    return depth, semi_axis, axis_ratio


def generate_phantom(spec: PhantomSpec, index: int) -> PhantomSample:
    """Sample ``index`` of the corpus defined by ``spec``."""
    if index < 0:
        raise ConfigError(f"phantom index must be >= 0, got {index}")
    rng = stream(spec.seed, "phantom", index)
    size = spec.image_size
    class_label = int(rng.integers(spec.class_count))

    reflect = np.full((size, size), 0.52, dtype=np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx0 = cy0 = (size - 1) / 2.0
    base_angle = 2.0 * np.pi * class_label / spec.class_count

    for k in range(spec.structure_count):
        depth, semi_frac, axis_ratio = _structure_signature(k, spec.structure_count)
        angle = base_angle + 2.0 * np.pi * k / max(spec.structure_count, 1)
        angle += rng.uniform(-0.08, 0.08)
        radius = 0.28 * size * rng.uniform(0.88, 1.12)
        cx = cx0 + radius * np.cos(angle) + rng.uniform(-0.03, 0.03) * size
        cy = cy0 + radius * np.sin(angle) + rng.uniform(-0.03, 0.03) * size
        a = semi_frac * size * rng.uniform(0.85, 1.15)
        b = a * axis_ratio * rng.uniform(0.9, 1.1)
        tilt = rng.uniform(0.0, np.pi)
        dropped = rng.random() < _STRUCTURE_DROPOUT
        if dropped:
            continue
        ct, st = np.cos(tilt), np.sin(tilt)
        xr = (xx - cx) * ct + (yy - cy) * st
        yr = -(xx - cx) * st + (yy - cy) * ct
        inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        reflect[inside] = 0.52 - depth
        mask[inside] = k + 1

    sigma = max(spec.speckle_scale, 0.3)
    g1 = _smooth(rng.standard_normal((size, size)), sigma)
    g2 = _smooth(rng.standard_normal((size, size)), sigma)
    envelope = np.sqrt(g1 * g1 + g2 * g2)
    envelope /= envelope.mean()
    attenuation = 1.0 - 0.18 * (yy / max(size - 1, 1))
    image = reflect * ((1.0 - _SPECKLE_MIX) + _SPECKLE_MIX * envelope) * attenuation
    image = np.clip(image, 0.0, 1.0)
    image_u8 = np.round(image * 255.0).astype(np.uint8)

    patient_id = f"pat{index // PATIENT_BLOCK:05d}"
    return PhantomSample(image=image_u8, mask=mask, class_label=class_label, patient_id=patient_id)


def phantom_palette(spec: PhantomSpec) -> tuple[int, ...]:
    return tuple(range(1, spec.structure_count + 1))


def build_phantom_index(spec: PhantomSpec, count: int) -> DatasetIndex:
    """In-memory generator-backed index over the first ``count`` samples."""
    if count <= 0:
        raise ConfigError(f"phantom corpus count must be positive, got {count}")
    records = []
    labels = {}
    for i in range(count):
        sample = generate_phantom(spec, i)
        image_id = f"ph{i:06d}"
        labels[image_id] = sample.class_label
        records.append(
            DatasetRecord(
                image_id=image_id,
                source=f"phantom:{i}",
                patient_id=sample.patient_id,
                class_label=sample.class_label,
                mask_ref=f"phantom:{i}",
            )
        )

    def image_loader(rec: DatasetRecord) -> np.ndarray:
        return generate_phantom(spec, int(rec.source.split(":")[1])).image

    def mask_loader(rec: DatasetRecord) -> np.ndarray:
        return generate_phantom(spec, int(rec.mask_ref.split(":")[1])).mask

    index = DatasetIndex(
        records,
        class_count=spec.class_count,
        mask_palette=phantom_palette(spec),
        image_loader=image_loader,
        mask_loader=mask_loader,
    )
    return index


def materialize_phantom_corpus(spec: PhantomSpec, count: int, out_dir: Path) -> Path:
    """Write images, masks, and a manifest + stats sidecar; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        sample = generate_phantom(spec, i)
        image_id = f"ph{i:06d}"
        image_path = f"images/{image_id}.png"
        mask_path = f"masks/{image_id}.png"
        write_image_file(out_dir / image_path, sample.image)
        write_image_file(out_dir / mask_path, sample.mask)
        rows.append(
            {
                "image_id": image_id,
                "path": image_path,
                "patient_id": sample.patient_id,
                "label": str(sample.class_label),
                "mask_path": mask_path,
            }
        )
    index = build_phantom_index(spec, count)
    stats = compute_stats(index)
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows, spec.class_count, phantom_palette(spec), stats)
    return manifest
