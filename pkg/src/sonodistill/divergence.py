"""Paired-run loss divergence diagnostic.

Trains the same configuration and seed twice in deterministic mode and
twice as configured, then compares the per-step masked-patch loss of
each pair. The deterministic pair is the reproducibility guarantee (its
divergence is zero unless the backend cannot honor determinism, which
the report marks as best-effort); the as-configured pair measures the
run-to-run spread of the default kernels, reported but never asserted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .dataset import DatasetIndex
from .errors import ConfigError
from .losslog import read_losslog
from .trainer import RunConfig, train


@dataclass(frozen=True)
class PairDivergence:
    label: str
    deterministic: bool
    per_step_abs_delta: list[float]
    max_abs_delta: float
    mean_abs_delta: float
    first_divergence_step: int | None
    best_effort_reason: str | None = None


@dataclass(frozen=True)
class DivergenceReport:
    steps: int
    pairs: list[PairDivergence]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _compare(label: str, a, b, deterministic: bool, reason: str | None) -> PairDivergence:
    deltas = [abs(ra.ibot - rb.ibot) for ra, rb in zip(a, b)]
    first = next((i for i, d in enumerate(deltas) if d != 0.0), None)
    return PairDivergence(
        label=label,
        deterministic=deterministic,
        per_step_abs_delta=deltas,
        max_abs_delta=max(deltas) if deltas else 0.0,
        mean_abs_delta=sum(deltas) / len(deltas) if deltas else 0.0,
        first_divergence_step=first,
        best_effort_reason=reason,
    )


def paired_run_divergence(
    dataset: DatasetIndex, config: RunConfig, steps: int, work_dir: Path
) -> DivergenceReport:
    """Run the two paired comparisons for ``steps`` training steps each."""
    if steps < 1:
        raise ConfigError(f"divergence needs steps >= 1, got {steps}")
    work_dir = Path(work_dir)

    def run(tag: str, deterministic: bool):
        cfg = dataclasses.replace(config, deterministic=deterministic)
        result = train(dataset, cfg, work_dir / tag, max_steps=steps)
        records, _ = read_losslog(result.losslog_path)
        return records[:steps]

    det_a = run("det_a", True)
    det_b = run("det_b", True)
    cfg_a = run("cfg_a", config.deterministic)
    cfg_b = run("cfg_b", config.deterministic)

    det_reason = None
    if torch.cuda.is_available():
        det_reason = (
            "CUDA backend present; deterministic kernels are requested but "
            "device-side reductions are only best-effort"
        )
    det_pair = _compare("deterministic", det_a, det_b, True, det_reason)
    if det_pair.max_abs_delta != 0.0 and det_reason is None:
        det_pair = dataclasses.replace(
            det_pair,
            best_effort_reason="backend failed to reproduce identical losses "
            "despite deterministic mode",
        )
    cfg_pair = _compare("as-configured", cfg_a, cfg_b, config.deterministic, None)
    return DivergenceReport(steps=len(det_pair.per_step_abs_delta), pairs=[det_pair, cfg_pair])
