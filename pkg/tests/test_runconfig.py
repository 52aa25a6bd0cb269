import pytest

from sonodistill import runconfig
from sonodistill.errors import ArtifactIOError, ConfigError


def test_defaults_resolve_to_valid_configs():
    snapshot = runconfig.load_config(None, environ={})
    cfg = runconfig.run_config(snapshot)
    assert cfg.epochs == 40
    assert cfg.encoder.embed_dim == 192
    assert cfg.augment.global_size == cfg.encoder.image_size
    grid = runconfig.probe_grid(snapshot)
    assert len(grid.cells()) == 3 * 7


def test_file_overrides_defaults(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("engine:\n  epochs: 3\n  batch_size: 4\n", encoding="utf-8")
    snapshot = runconfig.load_config(cfg_file, environ={})
    assert snapshot["engine"]["epochs"] == 3
    assert snapshot["engine"]["batch_size"] == 4
    assert snapshot["engine"]["grad_clip"] == 3.0  # untouched default


def test_unknown_key_rejected_with_path(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("engine:\n  bogus_key: 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="engine.bogus_key"):
        runconfig.load_config(cfg_file, environ={})


def test_env_overrides_file(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("engine:\n  epochs: 3\n", encoding="utf-8")
    env = {"SONODISTILL_ENGINE__EPOCHS": "7", "SONODISTILL_RUN__DETERMINISTIC": "true"}
    snapshot = runconfig.load_config(cfg_file, environ=env)
    assert snapshot["engine"]["epochs"] == 7
    assert snapshot["run"]["deterministic"] is True


def test_explicit_flags_override_everything(tmp_path):
    env = {"SONODISTILL_RUN__SEED": "5"}
    snapshot = runconfig.load_config(None, seed=9, deterministic=True, environ=env)
    assert snapshot["run"]["seed"] == 9
    assert snapshot["run"]["deterministic"] is True


def test_fingerprint_stable_and_sensitive():
    a = runconfig.load_config(None, environ={})
    b = runconfig.load_config(None, environ={})
    assert runconfig.fingerprint_of(a) == runconfig.fingerprint_of(b)
    c = runconfig.load_config(None, seed=1, environ={})
    assert runconfig.fingerprint_of(a) != runconfig.fingerprint_of(c)


def test_artifact_dir_refuses_overwrite(tmp_path):
    first = runconfig.artifact_dir(tmp_path, "pretrain", "abc")
    assert first.is_dir()
    with pytest.raises(ArtifactIOError, match="already exists"):
        runconfig.artifact_dir(tmp_path, "pretrain", "abc")


def test_invalid_section_value_names_field(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("encoder:\n  image_size: 63\n", encoding="utf-8")
    snapshot = runconfig.load_config(cfg_file, environ={})
    with pytest.raises(ConfigError, match="image_size"):
        runconfig.encoder_config(snapshot)
