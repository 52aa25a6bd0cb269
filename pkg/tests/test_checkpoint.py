import numpy as np
import pytest
import torch

from conftest import tiny_encoder_config
from sonodistill.checkpoint import (
    load_arrays,
    load_encoder_checkpoint,
    save_arrays,
    save_encoder_checkpoint,
)
from sonodistill.errors import CheckpointReadError, IncompatibleCheckpointError
from sonodistill.vit import build_encoder


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "w": rng.standard_normal((4, 3)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float64),
        "n": np.array(5, dtype=np.int64),
    }


def test_round_trip_exact(tmp_path):
    path = tmp_path / "c.sdck"
    arrays = _sample_arrays()
    save_arrays(path, {"kind": "test", "x": 1}, arrays)
    meta, loaded = load_arrays(path)
    assert meta == {"kind": "test", "x": 1}
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert np.array_equal(loaded[name], arrays[name])


def test_byte_stable_serialization(tmp_path):
    a, b = tmp_path / "a.sdck", tmp_path / "b.sdck"
    arrays = _sample_arrays()
    save_arrays(a, {"k": [1, 2]}, arrays)
    save_arrays(b, {"k": [1, 2]}, arrays)
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file_fails_cleanly(tmp_path):
    path = tmp_path / "c.sdck"
    save_arrays(path, {}, _sample_arrays())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 10])
    with pytest.raises(CheckpointReadError, match="truncated"):
        load_arrays(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "c.sdck"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(CheckpointReadError, match="magic"):
        load_arrays(path)


def test_future_version_rejected(tmp_path):
    path = tmp_path / "c.sdck"
    save_arrays(path, {}, _sample_arrays())
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(IncompatibleCheckpointError, match="version 99"):
        load_arrays(path)


def test_encoder_round_trip_restores_outputs(tmp_path):
    cfg = tiny_encoder_config()
    model = build_encoder(cfg, 3)
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    before = model.encode(x)
    path = tmp_path / "enc.sdck"
    save_encoder_checkpoint(path, model)
    restored, loaded_cfg, meta = load_encoder_checkpoint(path)
    after = restored.encode(x)
    assert loaded_cfg == cfg
    assert torch.equal(before.cls, after.cls)
    assert torch.equal(before.patches, after.patches)


def test_config_mismatch_names_field(tmp_path):
    model = build_encoder(tiny_encoder_config(), 0)
    path = tmp_path / "enc.sdck"
    save_encoder_checkpoint(path, model)
    other = tiny_encoder_config(depth=3)
    with pytest.raises(IncompatibleCheckpointError, match="depth"):
        load_encoder_checkpoint(path, expected_config=other)
