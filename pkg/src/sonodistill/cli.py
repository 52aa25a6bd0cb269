"""Command-line surface.

Every command validates the configuration, runs the corresponding
operation, and writes its artifacts under ``<out>/<command>/<config
fingerprint>/`` together with the resolved config snapshot and a run
manifest. Exit codes: 0 ok, 2 usage/config, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import yaml

from .dataset import DatasetIndex, load_dataset
from .divergence import paired_run_divergence
from .errors import ConfigError, SonodistillError
from .finetune import finetune_classifier, finetune_segmenter, label_efficiency_curve
from .metrics import load_report
from .phantom import build_phantom_index, materialize_phantom_corpus
from .probe import linear_probe
from .reports import export_attention_overlays, export_curves, write_table_artifacts
from .splits import SplitMode, make_classification_splits, make_fass_splits, make_jnu_splits
from .trainer import train
from . import runconfig
from .checkpoint import load_encoder_checkpoint

COMMANDS = (
    "phantom-gen", "pretrain", "probe", "finetune-cls", "finetune-seg",
    "fewshot", "label-eff", "divergence", "attn-export", "report",
)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonodistill",
        description="Self-distillation pretraining and evaluation for compact "
                    "ultrasound encoders",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML config file")
        p.add_argument("--out", type=Path, default=Path("out"), help="artifact root")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--deterministic", type=_parse_bool, default=None,
                       metavar="BOOL", help="override run.deterministic")
        if name == "report":
            p.add_argument("inputs", nargs="*", type=Path, help="metrics report files")
        if name == "attn-export":
            p.add_argument("--layer", type=int, default=None, help="override attn.layer")
    return parser


def _dataset(snapshot: dict) -> DatasetIndex:
    data = snapshot["data"]
    if data["kind"] == "phantom":
        return build_phantom_index(runconfig.phantom_spec(snapshot),
                                   int(data["phantom"]["count"]))
    if data["kind"] == "manifest":
        if not data["manifest"]["path"]:
            raise ConfigError("data.manifest.path is required for kind=manifest")
        return load_dataset(Path(data["manifest"]["root"]), Path(data["manifest"]["path"]))
    raise ConfigError(f"data.kind must be 'phantom' or 'manifest', got {data['kind']!r}")


def _encoder_source(snapshot: dict):
    """Checkpoint path, or None for the random-init baseline."""
    ckpt = snapshot["eval"]["encoder_checkpoint"]
    return Path(ckpt) if ckpt else None


def _eval_common(snapshot: dict):
    return (
        tuple(int(s) for s in snapshot["eval"]["seeds"]),
        str(snapshot["eval"]["method"]),
        str(snapshot["eval"]["pretrain_data"]),
    )


def _write_snapshot(out_dir: Path, snapshot: dict) -> None:
    (out_dir / "config.yaml").write_text(
        yaml.safe_dump(snapshot, sort_keys=True), encoding="utf-8"
    )


def _validate_snapshot(snapshot: dict) -> None:
    """Construct every typed section so field errors surface before any
    artifact directory is created."""
    runconfig.run_config(snapshot)
    runconfig.probe_grid(snapshot)
    runconfig.finetune_config(snapshot)
    if snapshot["data"]["kind"] == "phantom":
        runconfig.phantom_spec(snapshot)


def run_command(args: argparse.Namespace) -> int:
    snapshot = runconfig.load_config(args.config, seed=args.seed,
                                     deterministic=args.deterministic)
    _validate_snapshot(snapshot)
    fingerprint = runconfig.fingerprint_of(snapshot)
    out_dir = runconfig.artifact_dir(args.out, args.command, fingerprint)
    manifest = runconfig.RunManifest(
        command=args.command,
        config_path=str(args.config) if args.config else "",
        fingerprint=fingerprint,
        snapshot=snapshot,
    )
    _write_snapshot(out_dir, snapshot)
    manifest.save(out_dir / "manifest.json")

    try:
        _dispatch(args, snapshot, fingerprint, out_dir)
    finally:
        manifest.finished_utc = time.time()
        manifest.save(out_dir / "manifest.json")
    print(out_dir)
    return 0


def _dispatch(args, snapshot: dict, fingerprint: str, out_dir: Path) -> None:
    command = args.command
    if command == "phantom-gen":
        spec = runconfig.phantom_spec(snapshot)
        count = int(snapshot["data"]["phantom"]["count"])
        materialize_phantom_corpus(spec, count, out_dir)
        return

    if command == "pretrain":
        dataset = _dataset(snapshot)
        config = runconfig.run_config(snapshot)
        train(dataset, config, out_dir, fingerprint=fingerprint)
        return

    if command == "divergence":
        dataset = _dataset(snapshot)
        config = runconfig.run_config(snapshot)
        steps = int(snapshot["divergence"]["steps"])
        report = paired_run_divergence(dataset, config, steps, out_dir / "runs")
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        with (out_dir / "per_step.csv").open("w", encoding="utf-8") as fh:
            fh.write("step," + ",".join(p.label.replace("-", "_") for p in report.pairs) + "\n")
            for step in range(report.steps):
                row = [str(step)] + [repr(p.per_step_abs_delta[step]) for p in report.pairs]
                fh.write(",".join(row) + "\n")
        return

    seeds, method, pretrain_data = _eval_common(snapshot)
    if command == "probe":
        dataset = _dataset(snapshot)
        plan = make_classification_splits(dataset, int(snapshot["eval"]["fold_seed"]))
        plan.save(out_dir / "split.txt")
        report = linear_probe(
            _resolved_encoder(snapshot), dataset, plan, runconfig.probe_grid(snapshot),
            seeds=seeds, method=method, pretrain_data=pretrain_data,
            fingerprint=fingerprint,
        )
        report.save(out_dir / "report.json")
        return

    if command == "finetune-cls":
        dataset = _dataset(snapshot)
        plan = make_classification_splits(dataset, int(snapshot["eval"]["fold_seed"]))
        plan.save(out_dir / "split.txt")
        report = finetune_classifier(
            _encoder_source(snapshot), dataset, plan, runconfig.finetune_config(snapshot),
            seeds=seeds, encoder_config=runconfig.encoder_config(snapshot),
            method=method, pretrain_data=pretrain_data, fingerprint=fingerprint,
        )
        report.save(out_dir / "report.json")
        return

    if command == "finetune-seg":
        dataset = _dataset(snapshot)
        plan = make_fass_splits(dataset, SplitMode.full(),
                                int(snapshot["eval"]["fold_seed"]))
        plan.save(out_dir / "split.txt")
        report = finetune_segmenter(
            _encoder_source(snapshot), dataset, plan, runconfig.finetune_config(snapshot),
            seeds=seeds, encoder_config=runconfig.encoder_config(snapshot),
            task_id="fass_full_dice", method=method, pretrain_data=pretrain_data,
            fingerprint=fingerprint,
        )
        report.save(out_dir / "report.json")
        return

    if command == "fewshot":
        dataset = _dataset(snapshot)
        cfg = snapshot["eval"]["fewshot"]
        folds = int(snapshot["eval"]["folds"])
        if cfg["protocol"] == "jnu":
            plans = [make_jnu_splits(dataset, int(cfg["patients"]), int(cfg["cap"]), k)
                     for k in range(folds)]
            task_id = "jnu_fewshot_dice"
        elif cfg["protocol"] == "fass20":
            plans = [make_fass_splits(dataset, SplitMode.few_shot_images(20), k)
                     for k in range(folds)]
            task_id = "fass_fewshot20_dice"
        else:
            raise ConfigError(
                f"eval.fewshot.protocol must be 'jnu' or 'fass20', got {cfg['protocol']!r}"
            )
        for plan in plans:
            plan.save(out_dir / f"split_fold{plan.fold_seed}.txt")
        report = finetune_segmenter(
            _encoder_source(snapshot), dataset, plans, runconfig.finetune_config(snapshot),
            encoder_config=runconfig.encoder_config(snapshot), task_id=task_id,
            method=method, pretrain_data=pretrain_data, fingerprint=fingerprint,
        )
        report.save(out_dir / "report.json")
        return

    if command == "label-eff":
        dataset = _dataset(snapshot)
        points = label_efficiency_curve(
            _encoder_source(snapshot), dataset,
            fractions=snapshot["eval"]["label_eff"]["fractions"],
            folds=int(snapshot["eval"]["folds"]),
            cfg=runconfig.finetune_config(snapshot),
            encoder_config=runconfig.encoder_config(snapshot),
        )
        export_curves(points, out_dir / "curve.csv", out_dir / "curve.png")
        (out_dir / "curve.json").write_text(
            json.dumps([dataclasses.asdict(p) for p in points], indent=2),
            encoding="utf-8",
        )
        return

    if command == "attn-export":
        dataset = _dataset(snapshot)
        ckpt = snapshot["attn"]["checkpoint"] or snapshot["eval"]["encoder_checkpoint"]
        if not ckpt:
            raise ConfigError("attn.checkpoint (or eval.encoder_checkpoint) is required")
        encoder, _, _ = load_encoder_checkpoint(Path(ckpt))
        layer = args.layer if args.layer is not None else int(snapshot["attn"]["layer"])
        image_ids = list(snapshot["attn"]["images"]) or dataset.ids()[:2]
        export_attention_overlays(encoder, dataset, image_ids, layer,
                                  out_dir / "overlays")
        return

    if command == "report":
        paths = [Path(p) for p in snapshot["report"]["inputs"]] + list(args.inputs)
        if not paths:
            raise ConfigError("report needs input metrics files (config report.inputs "
                              "or positional arguments)")
        reports = [load_report(p) for p in paths]
        write_table_artifacts(reports, out_dir)
        return

    raise ConfigError(f"unknown command {command!r}")


def _resolved_encoder(snapshot: dict):
    """Probe path needs a concrete encoder: checkpoint or seeded random init."""
    source = _encoder_source(snapshot)
    if source is not None:
        return source
    from .vit import build_encoder

    return build_encoder(runconfig.encoder_config(snapshot), snapshot["run"]["seed"])


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run_command(args)
    except SonodistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
