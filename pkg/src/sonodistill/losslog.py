"""Append-only per-step loss log.

External format (consumed by the divergence tool): a version header
line, a CSV column header, then one record per step. Floats are written
with shortest round-trip repr, so deterministic runs produce
byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ArtifactIOError, ConfigError, NumericError

FORMAT_TAG = "losslog-v1"
_COLUMNS = ("step", "dino", "ibot", "total", "lr", "momentum", "teacher_temp")


@dataclass(frozen=True)
class LossRecord:
    step: int
    dino: float
    ibot: float
    total: float
    lr: float
    momentum: float
    teacher_temp: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise NumericError(f"loss log field {f.name} non-finite at step {self.step}")

    def line(self) -> str:
        return ",".join([str(self.step)] + [repr(float(getattr(self, c))) for c in _COLUMNS[1:]])


class LossLogWriter:
    """Streams records to disk as they arrive; one line per step."""

    def __init__(self, path: Path, fingerprint: str = ""):
        self.path = Path(path)
        self._last_step = -1
        try:
            self._fh = self.path.open("w", encoding="utf-8", newline="\n")
            self._fh.write(f"# {FORMAT_TAG} fingerprint={fingerprint}\n")
            self._fh.write(",".join(_COLUMNS) + "\n")
            self._fh.flush()
        except OSError as exc:
            raise ArtifactIOError(f"cannot open loss log {path}: {exc}") from exc

    def append(self, record: LossRecord) -> None:
        if record.step <= self._last_step:
            raise ConfigError(
                f"loss log steps must be strictly increasing: {record.step} after {self._last_step}"
            )
        self._last_step = record.step
        try:
            self._fh.write(record.line() + "\n")
            self._fh.flush()
        except OSError as exc:
            raise ArtifactIOError(f"cannot append to loss log {self.path}: {exc}") from exc

    def close(self) -> None:
        self._fh.close()


def read_losslog(path: Path) -> tuple[list[LossRecord], str]:
    """Parse a loss log; returns (records, fingerprint)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read loss log {path}: {exc}") from exc
    if not lines or not lines[0].startswith(f"# {FORMAT_TAG}"):
        raise ConfigError(f"{path}: not a {FORMAT_TAG} file")
    fingerprint = ""
    if "fingerprint=" in lines[0]:
        fingerprint = lines[0].split("fingerprint=", 1)[1].strip()
    if len(lines) < 2 or lines[1] != ",".join(_COLUMNS):
        raise ConfigError(f"{path}: missing column header")
    records = []
    last = -1
    for line in lines[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(_COLUMNS):
            raise ConfigError(f"{path}: malformed record: {line!r}")
        rec = LossRecord(
            step=int(parts[0]),
            **{name: float(v) for name, v in zip(_COLUMNS[1:], parts[1:])},
        )
        if rec.step <= last:
            raise ConfigError(f"{path}: steps not strictly increasing at {rec.step}")
        last = rec.step
        records.append(rec)
    return records, fingerprint
