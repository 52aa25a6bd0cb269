"""Run configuration: YAML file + environment overrides + defaults.

The resolved snapshot (every key, post-defaults) is what gets
fingerprinted and written next to each artifact, so a run is auditable
from its snapshot alone. Environment variables override file values
via ``SONODISTILL_<SECTION>__<KEY>`` (values parsed as YAML scalars);
command-line flags override both.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ArtifactIOError, ConfigError
from .finetune import FinetuneConfig
from .losses import LossWeights
from .phantom import PhantomSpec
from .probe import ProbeGrid
from .schedules import ScheduleSet
from .trainer import RunConfig
from .views import AugmentationConfig
from .vit import EncoderConfig

ENV_PREFIX = "SONODISTILL_"

DEFAULTS: dict = {
    "run": {"seed": 0, "deterministic": False},
    "data": {
        "kind": "phantom",
        "phantom": {
            "image_size": 96,
            "structure_count": 3,
            "speckle_scale": 1.0,
            "class_count": 6,
            "seed": 7,
            "count": 384,
        },
        "manifest": {"root": "", "path": ""},
    },
    "encoder": {
        "image_size": 64,
        "patch_size": 8,
        "embed_dim": 192,
        "depth": 6,
        "heads": 3,
        "prototype_count": 1024,
        "head_hidden_dim": 512,
        "head_bottleneck_dim": 128,
        "mlp_ratio": 4.0,
        "in_channels": 3,
    },
    "views": {
        "local_size": 32,
        "local_count": 4,
        "global_scale": [0.4, 1.0],
        "local_scale": [0.08, 0.4],
        "mask_ratio": [0.1, 0.5],
        "hflip_prob": 0.5,
        "brightness": 0.15,
        "contrast": 0.15,
        "noise_std": 0.01,
    },
    "losses": {
        "w_dino": 1.0,
        "w_ibot": 1.0,
        "student_temp": 0.1,
        "center_momentum": 0.9,
        "koleo_weight": 0.0,
    },
    "engine": {
        "epochs": 40,
        "batch_size": 32,
        "checkpoint_every": None,
        "grad_clip": 3.0,
    },
    "schedules": {
        "lr_base_ref": 2.0e-3,
        "lr_final": 1.0e-6,
        "lr_warmup_steps": 50,
        "weight_decay_start": 0.04,
        "weight_decay_end": 0.4,
        "teacher_momentum_start": 0.992,
        "teacher_temp_start": 0.04,
        "teacher_temp_end": 0.07,
        "teacher_temp_warmup_steps": 50,
    },
    "eval": {
        "encoder_checkpoint": None,
        "seeds": [0, 1, 2],
        "folds": 5,
        "fold_seed": 0,
        "method": "encoder",
        "pretrain_data": "-",
        "probe": {
            "sources": ["cls_last", "cls_cat4", "patch_mean"],
            "lr_min": 1.0e-4,
            "lr_max": 1.0e-1,
            "lr_points": 7,
            "epochs": 25,
            "batch_size": 64,
        },
        "finetune": {
            "epochs": 20,
            "batch_size": 8,
            "lr": 3.0e-4,
            "weight_decay": 0.01,
            "eval_every": 1,
            "decoder_channels": 96,
        },
        "fewshot": {"protocol": "jnu", "patients": 4, "cap": 10},
        "label_eff": {"fractions": [0.10, 0.25, 0.50, 1.0]},
    },
    "divergence": {"steps": 50},
    "attn": {"checkpoint": None, "layer": 5, "images": []},
    "report": {"inputs": []},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config key {here} must be a mapping")
        else:
            out[key] = value
    return out


def _env_overrides(environ: dict[str, str]) -> dict:
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key_path = [part.lower() for part in name[len(ENV_PREFIX):].split("__") if part]
        if not key_path:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"environment override {name}: unparseable value: {exc}")
        node = tree
        for part in key_path[:-1]:
            node = node.setdefault(part, {})
        node[key_path[-1]] = value
    return tree


def load_config(
    config_path: Path | None,
    seed: int | None = None,
    deterministic: bool | None = None,
    environ: dict[str, str] | None = None,
) -> dict:
    """Resolved snapshot: defaults <- file <- env <- explicit flags."""
    snapshot = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ArtifactIOError(f"cannot read config {config_path}: {exc}") from exc
        try:
            file_tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{config_path}: invalid YAML: {exc}") from exc
        if not isinstance(file_tree, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        snapshot = _merge(snapshot, file_tree)
    env_tree = _env_overrides(environ if environ is not None else dict(os.environ))
    if env_tree:
        snapshot = _merge(snapshot, env_tree)
    if seed is not None:
        snapshot["run"]["seed"] = int(seed)
    if deterministic is not None:
        snapshot["run"]["deterministic"] = bool(deterministic)
    return snapshot


def fingerprint_of(snapshot: dict) -> str:
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _build(section: str, cls, payload: dict, **extra):
    try:
        return cls(**payload, **extra)
    except TypeError as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from exc


def phantom_spec(snapshot: dict) -> PhantomSpec:
    payload = {k: v for k, v in snapshot["data"]["phantom"].items() if k != "count"}
    return _build("data.phantom", PhantomSpec, payload)


def encoder_config(snapshot: dict) -> EncoderConfig:
    return _build("encoder", EncoderConfig, snapshot["encoder"])


def augmentation_config(snapshot: dict) -> AugmentationConfig:
    views = dict(snapshot["views"])
    for key in ("global_scale", "local_scale", "mask_ratio"):
        views[key] = tuple(views[key])
    return _build(
        "views", AugmentationConfig, views,
        global_size=snapshot["encoder"]["image_size"],
        patch_size=snapshot["encoder"]["patch_size"],
        channels=snapshot["encoder"]["in_channels"],
    )


def loss_weights(snapshot: dict) -> LossWeights:
    payload = {k: v for k, v in snapshot["losses"].items()
               if k in ("w_dino", "w_ibot", "student_temp")}
    return _build(
        "losses", LossWeights, payload,
        teacher_temp=snapshot["schedules"]["teacher_temp_start"],
    )


def schedule_set(snapshot: dict) -> ScheduleSet:
    return _build("schedules", ScheduleSet, snapshot["schedules"])


def run_config(snapshot: dict) -> RunConfig:
    return _build(
        "engine", RunConfig, snapshot["engine"],
        seed=snapshot["run"]["seed"],
        deterministic=snapshot["run"]["deterministic"],
        center_momentum=snapshot["losses"]["center_momentum"],
        koleo_weight=snapshot["losses"]["koleo_weight"],
        encoder=encoder_config(snapshot),
        losses=loss_weights(snapshot),
        schedules=schedule_set(snapshot),
        augment=augmentation_config(snapshot),
    )


def probe_grid(snapshot: dict) -> ProbeGrid:
    cfg = snapshot["eval"]["probe"]
    lrs = tuple(np.geomspace(cfg["lr_min"], cfg["lr_max"], int(cfg["lr_points"])).tolist())
    return ProbeGrid(
        sources=tuple(cfg["sources"]),
        learning_rates=lrs,
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
    )


def finetune_config(snapshot: dict) -> FinetuneConfig:
    return _build("eval.finetune", FinetuneConfig, snapshot["eval"]["finetune"])


@dataclass
class RunManifest:
    command: str
    config_path: str
    fingerprint: str
    snapshot: dict
    created_utc: float = field(default_factory=time.time)
    finished_utc: float | None = None

    def save(self, path: Path) -> None:
        payload = {
            "command": self.command,
            "config_path": self.config_path,
            "fingerprint": self.fingerprint,
            "snapshot": self.snapshot,
            "created_utc": self.created_utc,
            "finished_utc": self.finished_utc,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True),
                              encoding="utf-8")


def artifact_dir(out_root: Path, command: str, fingerprint: str) -> Path:
    """Fingerprint-keyed artifact directory; refuses to overwrite."""
    path = Path(out_root) / command / fingerprint
    if path.exists():
        raise ArtifactIOError(
            f"artifact directory already exists: {path} (identical config "
            f"reproduces identical artifacts; pick a fresh --out to rerun)"
        )
    path.mkdir(parents=True)
    return path
