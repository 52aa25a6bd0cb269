import numpy as np
import pytest
import torch

from conftest import tiny_encoder_config
from sonodistill.checkpoint import save_encoder_checkpoint
from sonodistill.errors import ConfigError
from sonodistill.metrics import f1_macro
from sonodistill.phantom import PhantomSpec, build_phantom_index
from sonodistill.probe import (
    AccessAudit,
    ProbeGrid,
    extract_features,
    linear_probe,
    train_linear_classifier,
)
from sonodistill.splits import make_classification_splits
from sonodistill.vit import build_encoder


@pytest.fixture(scope="module")
def probe_setup(tmp_path_factory):
    index = build_phantom_index(PhantomSpec(image_size=48, seed=6), 80)
    plan = make_classification_splits(index, fold_seed=0)
    encoder = build_encoder(tiny_encoder_config(), 0)
    path = tmp_path_factory.mktemp("enc") / "enc.sdck"
    save_encoder_checkpoint(path, encoder)
    return index, plan, encoder, path


def test_feature_shapes(probe_setup):
    index, plan, encoder, _ = probe_setup
    ids = plan.train_ids[:6]
    d = encoder.config.embed_dim
    assert extract_features(encoder, index, ids, "cls_last").shape == (6, d)
    assert extract_features(encoder, index, ids, "patch_mean").shape == (6, d)
    cat = extract_features(encoder, index, ids, "cls_cat4")
    assert cat.shape == (6, d * min(4, encoder.config.depth))


def test_one_hot_features_probe_to_perfect_f1():
    # separable-by-construction oracle for the classifier path
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 120)
    feats = np.eye(4, dtype=np.float32)[labels] * 5.0
    head = train_linear_classifier(feats, labels, 4, lr=0.05, epochs=30, seed=0)
    with torch.no_grad():
        pred = head(torch.from_numpy(feats)).argmax(dim=1).numpy()
    assert f1_macro(pred, labels, 4) == 1.0


def test_probe_reports_per_seed_values_and_audit(probe_setup):
    index, plan, _, path = probe_setup
    grid = ProbeGrid(sources=("cls_last",), learning_rates=(1e-2,), epochs=4)
    report = linear_probe(path, index, plan, grid, seeds=(0, 1))
    assert report.task_id == "cls_probe_f1"
    assert len(report.values) == 2
    assert report.extras["test_accesses_before_final"] == 0
    assert report.extras["grid_cells"] == 1
    assert all(0.0 <= v <= 1.0 for v in report.values)


def test_probe_leaves_checkpoint_bytes_identical(probe_setup):
    index, plan, _, path = probe_setup
    before = path.read_bytes()
    grid = ProbeGrid(sources=("patch_mean",), learning_rates=(1e-2, 1e-3), epochs=3)
    linear_probe(path, index, plan, grid, seeds=(0,))
    assert path.read_bytes() == before


def test_probe_single_cell_selection_is_identity(probe_setup):
    index, plan, _, path = probe_setup
    grid = ProbeGrid(sources=("cls_last",), learning_rates=(5e-3,), epochs=3)
    report = linear_probe(path, index, plan, grid, seeds=(0,))
    cell = report.extras["selected_cells"][0]
    assert cell["source"] == "cls_last"
    assert cell["lr"] == 5e-3


def test_probe_rejects_single_class_train_split(probe_setup):
    index, plan, encoder, _ = probe_setup
    single = build_phantom_index(PhantomSpec(image_size=48, seed=6, class_count=1), 40)
    cls_plan = make_classification_splits(single, fold_seed=0)
    with pytest.raises(ConfigError, match="single class"):
        linear_probe(encoder, single, cls_plan,
                     ProbeGrid(sources=("cls_last",), learning_rates=(1e-2,), epochs=2))


def test_grid_validation():
    with pytest.raises(ConfigError):
        ProbeGrid(sources=())
    with pytest.raises(ConfigError):
        ProbeGrid(sources=("bogus",))


def test_access_audit_counts():
    audit = AccessAudit()
    audit.record("a", "fit")
    audit.record("t", "fit")
    audit.record("t", "final")
    assert audit.accesses_outside_phase(["t"], "final") == 1
    assert audit.accesses_outside_phase(["a"], "fit") == 0
