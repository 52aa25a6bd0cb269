"""Self-describing checkpoint container.

Layout: magic ``SDCP`` + u32 format version + u64 header length + a
canonical-JSON header + concatenated little-endian raw tensor buffers.
The header carries a free-form ``meta`` block (config snapshot, kind,
step, ...) plus per-tensor dtype/shape/offset. Serialization is
deterministic, so identical state yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactIOError, CheckpointReadError, IncompatibleCheckpointError
from .vit import EncoderConfig, VisionTransformer, build_encoder

MAGIC = b"SDCP"
FORMAT_VERSION = 1


def save_arrays(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = {}
    offset = 0
    ordered = sorted(arrays)
    for name in ordered:
        arr = np.asarray(arrays[name])
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = json.dumps(
        {"meta": meta, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    ).encode("utf-8")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for name in ordered:
                fh.write(np.asarray(arrays[name]).tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"failed to write checkpoint {path}: {exc}") from exc


def load_arrays(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"failed to read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointReadError(f"{path}: not a checkpoint container (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: container format version {version}, expected {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointReadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointReadError(f"{path}: corrupt header: {exc}") from exc
    base = 16 + header_len
    arrays = {}
    for name, entry in header["tensors"].items():
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointReadError(f"{path}: truncated tensor data for {name!r}")
        arrays[name] = np.frombuffer(
            blob[start:end], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def state_dict_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        prefix + name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def arrays_to_state_dict(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in arrays.items():
        if name.startswith(prefix):
            out[name[len(prefix):]] = torch.from_numpy(np.ascontiguousarray(arr))
    return out


def save_encoder_checkpoint(
    path: Path,
    encoder: VisionTransformer,
    extra_meta: dict | None = None,
) -> None:
    meta = {"kind": "encoder", "encoder_config": asdict(encoder.config)}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, meta, state_dict_to_arrays(encoder))


def load_encoder_checkpoint(
    path: Path, expected_config: EncoderConfig | None = None
) -> tuple[VisionTransformer, EncoderConfig, dict]:
    meta, arrays = load_arrays(path)
    if "encoder_config" not in meta:
        raise IncompatibleCheckpointError(f"{path}: no encoder config block")
    config = EncoderConfig(**meta["encoder_config"])
    if expected_config is not None:
        check_config_match(config, expected_config, str(path))
    encoder = build_encoder(config, init_seed=0)
    encoder.load_state_dict(arrays_to_state_dict(arrays))
    return encoder, config, meta


def check_config_match(found: EncoderConfig, expected: EncoderConfig, source: str) -> None:
    for name, want in asdict(expected).items():
        got = getattr(found, name)
        if got != want:
            raise IncompatibleCheckpointError(
                f"{source}: encoder config field {name!r} is {got}, expected {want}"
            )
