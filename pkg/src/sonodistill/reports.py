"""Result rendering: the comparison table, label-efficiency curve
export, and attention-map overlays."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetIndex, normalize_image
from .errors import ArtifactIOError, ConfigError
from .finetune import CurvePoint
from .metrics import MetricsReport
from .vit import VisionTransformer

TABLE_COLUMNS = (
    ("jnu_fewshot_dice", "JNU p=4 Dice"),
    ("fass_fewshot20_dice", "FASS n=20 Dice"),
    ("fass_full_dice", "FASS full Dice"),
    ("cls_finetune_f1", "Fine-tune F1"),
    ("cls_probe_f1", "Linear-probe F1"),
)
MISSING_CELL = "-"


def render_results_table(reports: list[MetricsReport]) -> str:
    """Fixed-column comparison table; best value per column marked ``*``.

    Rows are (method, pretraining-data) pairs in stable sorted order;
    values render as percentage points with two decimals.
    """
    if not reports:
        raise ConfigError("render_results_table needs at least one report")
    known = {c for c, _ in TABLE_COLUMNS}
    cells: dict[tuple[str, str], dict[str, MetricsReport]] = {}
    for report in reports:
        if report.task_id not in known:
            raise ConfigError(f"report task {report.task_id!r} has no table column")
        row_key = (report.method, report.pretrain_data)
        row = cells.setdefault(row_key, {})
        if report.task_id in row:
            other = row[report.task_id]
            if (other.values, other.fingerprint) != (report.values, report.fingerprint):
                raise ConfigError(
                    f"conflicting duplicate cell for {row_key} / {report.task_id}: "
                    f"fingerprints {other.fingerprint!r} and {report.fingerprint!r}"
                )
        row[report.task_id] = report

    best: dict[str, float] = {}
    for task_id, _ in TABLE_COLUMNS:
        values = [row[task_id].mean for row in cells.values() if task_id in row]
        if values:
            best[task_id] = max(values)

    header = ["Method", "PT Data"] + [label for _, label in TABLE_COLUMNS]
    rows_text = []
    for (method, data) in sorted(cells):
        row = cells[(method, data)]
        rendered = [method, data]
        for task_id, _ in TABLE_COLUMNS:
            if task_id not in row:
                rendered.append(MISSING_CELL)
                continue
            value = row[task_id].mean
            text = f"{100.0 * value:.2f}"
            if math.isclose(value, best[task_id], abs_tol=1e-12):
                text = f"*{text}"
            rendered.append(text)
        rows_text.append(rendered)

    widths = [max(len(h), *(len(r[i]) for r in rows_text)) for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in rows_text:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_table_artifacts(reports: list[MetricsReport], out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    text = render_results_table(reports)
    txt_path = out_dir / "table.txt"
    txt_path.write_text(text, encoding="utf-8")
    csv_path = out_dir / "table.csv"
    lines = text.splitlines()
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["method", "pt_data"] + [c for c, _ in TABLE_COLUMNS]
        writer.writerow(header)
        for line in lines[2:]:
            writer.writerow([cell.strip() for cell in line.split("  ") if cell.strip()])
    return txt_path, csv_path


def export_curves(points: list[CurvePoint], data_path: Path, plot_path: Path) -> None:
    """Delimited curve data plus an error-bar plot."""
    if not points:
        raise ConfigError("export_curves needs at least one record")
    folds = len(points[0].per_fold)
    data_path = Path(data_path)
    with data_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean", "std"] + [f"fold_{k}" for k in range(folds)])
        for p in sorted(points, key=lambda p: p.fraction):
            writer.writerow([repr(p.fraction), repr(p.mean), repr(p.std)]
                            + [repr(v) for v in p.per_fold])

    xs = [p.fraction for p in points]
    ys = [p.mean for p in points]
    errs = [p.std for p in points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3)
    ax.set_xlabel("training fraction")
    ax.set_ylabel("mean Dice")
    ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(plot_path)
    plt.close(fig)


def load_curve(data_path: Path) -> list[CurvePoint]:
    try:
        with Path(data_path).open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read curve data {data_path}: {exc}") from exc
    if header[:3] != ["fraction", "mean", "std"]:
        raise ConfigError(f"{data_path}: not a curve data file")
    points = []
    for row in rows:
        points.append(CurvePoint(
            fraction=float(row[0]), mean=float(row[1]), std=float(row[2]),
            per_fold=tuple(float(v) for v in row[3:]),
        ))
    return points


def export_attention_overlays(
    encoder: VisionTransformer,
    index: DatasetIndex,
    image_ids: list[str],
    layer: int,
    out_dir: Path,
) -> list[Path]:
    """One overlay PNG per (image, head); filenames carry both plus the layer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder.eval()
    size = encoder.config.image_size
    cmap = plt.get_cmap("inferno")
    paths = []
    for image_id in image_ids:
        raw = index.load_image(image_id)
        x = normalize_image(raw, size, index.stats)[None]
        with torch.no_grad():
            maps = encoder.attention_maps(x, layer)[0]  # [H, g, g]
        gray = np.asarray(
            F.interpolate(
                torch.from_numpy(raw.astype(np.float32))[None, None],
                size=(size, size), mode="bilinear", align_corners=False,
            )[0, 0]
        ) / 255.0
        for head in range(maps.shape[0]):
            attn = F.interpolate(maps[head][None, None], size=(size, size),
                                 mode="bilinear", align_corners=False)[0, 0].numpy()
            attn = attn / attn.max() if attn.max() > 0 else attn
            heat = cmap(attn)[..., :3]
            blend = 0.5 * np.repeat(gray[..., None], 3, axis=2) + 0.5 * heat
            out = (np.clip(blend, 0.0, 1.0) * 255).astype(np.uint8)
            path = out_dir / f"{image_id}_layer{layer}_head{head}.png"
            plt.imsave(path, out)
            paths.append(path)
    return paths
