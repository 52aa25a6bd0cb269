import pytest
from PIL import Image

from conftest import tiny_encoder_config
from sonodistill.errors import ConfigError
from sonodistill.finetune import CurvePoint
from sonodistill.metrics import MetricsReport
from sonodistill.phantom import PhantomSpec, build_phantom_index
from sonodistill.reports import (
    export_attention_overlays,
    export_curves,
    load_curve,
    render_results_table,
)
from sonodistill.vit import build_encoder


def _report(task_id, mean, method="ssl-vit-b", data="phantom-2m", fp="fp0"):
    return MetricsReport.from_values(
        task_id, "dice" if "dice" in task_id else "f1", [mean], "seeds",
        method=method, pretrain_data=data, fingerprint=fp,
    )


def test_reference_row_renders_stored_values():
    # rendering fixture only; the stored values are inputs, not results
    values = {
        "jnu_fewshot_dice": 0.8601,
        "fass_fewshot20_dice": 0.7424,
        "fass_full_dice": 0.7951,
        "cls_finetune_f1": 0.9454,
        "cls_probe_f1": 0.9506,
    }
    reports = [_report(task, v) for task, v in values.items()]
    table = render_results_table(reports)
    row = [line for line in table.splitlines() if "ssl-vit-b" in line][0]
    for cell in ("86.01", "74.24", "79.51", "94.54", "95.06"):
        assert cell in row


def test_single_report_gives_one_row_table():
    table = render_results_table([_report("fass_full_dice", 0.5)])
    lines = [l for l in table.splitlines() if l.strip()]
    assert len(lines) == 3  # header, rule, one row


def test_missing_cells_render_as_dash():
    table = render_results_table([_report("fass_full_dice", 0.5)])
    row = table.splitlines()[2]
    assert row.count("-") >= 4


def test_column_best_marked_with_ties():
    reports = [
        _report("fass_full_dice", 0.70, method="a", fp="f1"),
        _report("fass_full_dice", 0.70, method="b", fp="f2"),
        _report("fass_full_dice", 0.60, method="c", fp="f3"),
    ]
    table = render_results_table(reports)
    assert table.count("*70.00") == 2
    assert "*60.00" not in table


def test_conflicting_duplicate_cells_error_lists_fingerprints():
    a = _report("fass_full_dice", 0.70, fp="fp_a")
    b = _report("fass_full_dice", 0.75, fp="fp_b")
    with pytest.raises(ConfigError, match="fp_a.*fp_b"):
        render_results_table([a, b])


def test_identical_duplicate_cells_are_tolerated():
    a = _report("fass_full_dice", 0.70, fp="same")
    table = render_results_table([a, a])
    assert "*70.00" in table


def test_table_is_pure_function_of_inputs():
    reports = [
        _report("fass_full_dice", 0.7, method="zeta", fp="f1"),
        _report("cls_probe_f1", 0.9, method="alpha", fp="f2"),
    ]
    assert render_results_table(reports) == render_results_table(list(reversed(reports)))


def test_unknown_task_rejected():
    import dataclasses

    bogus = dataclasses.replace(_report("fass_full_dice", 0.5, fp="x"), task_id="bogus")
    with pytest.raises(ConfigError, match="column"):
        render_results_table([bogus])


def test_export_curves_round_trip(tmp_path):
    points = [
        CurvePoint(0.10, 0.5, 0.05, (0.45, 0.55)),
        CurvePoint(0.25, 0.6, 0.02, (0.58, 0.62)),
        CurvePoint(0.50, 0.7, 0.01, (0.69, 0.71)),
        CurvePoint(1.00, 0.75, 0.00, (0.75, 0.75)),
    ]
    data, plot = tmp_path / "curve.csv", tmp_path / "curve.png"
    export_curves(points, data, plot)
    assert load_curve(data) == points
    with Image.open(plot) as img:  # plot parseable by its format
        assert img.size[0] > 0
    with pytest.raises(ConfigError):
        export_curves([], data, plot)
    assert len(data.read_text().splitlines()) == 5  # header + 4 rows


def test_attention_overlay_count_and_size(tmp_path):
    index = build_phantom_index(PhantomSpec(image_size=48, seed=9), 8)
    encoder = build_encoder(tiny_encoder_config(heads=4, depth=3), 0)
    ids = index.ids()[:2]
    paths = export_attention_overlays(encoder, index, ids, layer=1, out_dir=tmp_path)
    assert len(paths) == 4 * 2  # heads x images
    names = {p.name for p in paths}
    assert len(names) == 8  # per-head maps are distinct files
    for p in paths:
        with Image.open(p) as img:
            assert img.size == (32, 32)
        assert "_layer1_head" in p.name
