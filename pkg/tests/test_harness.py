import csv
import json
import os

import pytest

from uqshift.errors import ConfigError
from uqshift.harness import (
    METRIC_COLUMNS,
    ExperimentConfig,
    emit_report,
    markdown_summary,
    run_experiment,
    variant_name,
)

TINY_GRID = {
    "mlp": {"hidden_dim": [8], "n_hidden_layers": [1], "dropout_rate": [0.0, 0.25], "weight_decay": [0.0],
            "decreasing_dims": [False], "scheduler_factor": [0.5]},
    "rf": {"n_estimators": [5], "max_depth": [4]},
}


def tiny_doc(**over):
    doc = {
        "assays": [{"name": "toy", "synth": {"fp_len": 64, "records_per_span": 40, "weight_scale": 3.0,
                                              "drift": 0.3, "seed": 1}}],
        "settings": [3],
        "models": ["mlp"],
        "calibrators": ["none"],
        "n_repetitions": 2,
        "fp_len": 64,
        "mlp": {"max_epochs": 3, "learning_rate": 1e-2},
        "grid": TINY_GRID,
        "uq": {"n_members": 2, "n_passes": 5, "n_infer_samples": 5},
    }
    doc.update(over)
    return doc


def tiny_config(**over):
    return ExperimentConfig.from_mapping(tiny_doc(**over))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_cell_counts(tmp_path):
    report = run_experiment(tiny_config())
    assert report.complete
    assert len(report.metric_rows) == 3
    assert {r["metric"] for r in report.metric_rows} == {"auc", "bce", "ace"}
    assert len(report.shift_rows) == 1 and len(report.calibration_shift_rows) == 1
    assert len(report.rep_rows) == 2 * 3
    assert all(r["n_reps"] == 2 for r in report.metric_rows)


def test_full_variant_grid():
    cfg = tiny_config(models=["rf", "mlp", "mlpe", "mlpmc", "bnn"], calibrators=["none", "platt", "va"],
                      settings=[1, 3])
    report = run_experiment(cfg)
    cells = {(r["setting"], r["model"], r["calibrator"]) for r in report.metric_rows}
    failed = {(f["setting"], f["model"], f["calibrator"]) for f in report.failures if f["stage"] == "aggregate"}
    assert len(cells) + len(failed) == 2 * 5 * 3
    assert len(report.shift_rows) == 2


def test_rerun_is_byte_identical(tmp_path):
    cfg = tiny_config(models=["mlp", "rf"], calibrators=["none", "platt"])
    a = emit_report(run_experiment(cfg), tmp_path / "a")
    b = emit_report(run_experiment(cfg), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read(), os.path.basename(pa)


def test_metrics_header_and_markdown(tmp_path):
    report = run_experiment(tiny_config(calibrators=["none", "platt", "va"]))
    emit_report(report, tmp_path)
    header = (tmp_path / "metrics.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    rows = read_csv(tmp_path / "metrics.csv")
    md = (tmp_path / "report.md").read_text(encoding="utf-8")
    assert md.count("**") // 2 == sum(r["best_group"] == "true" or r["best_group"] == "True" for r in rows)
    for name in ("shift.csv", "calibration_shift.csv", "repetitions.csv", "tuning.csv",
                 "failures.csv", "provenance.json"):
        assert (tmp_path / name).exists()
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["config_sha256"] == tiny_config(calibrators=["none", "platt", "va"]).digest()
    assert markdown_summary(report) == md


def test_best_group_flags_present():
    report = run_experiment(tiny_config(calibrators=["none", "platt"]))
    for metric in ("auc", "bce", "ace"):
        assert any(r["best_group"] for r in report.metric_rows if r["metric"] == metric)


@pytest.mark.parametrize("bad", [
    {"models": []},
    {"models": ["svm"]},
    {"calibrators": ["isotonic"]},
    {"settings": [4]},
    {"n_repetitions": 0},
    {"models": ["mlp", "mlp"]},
    {"uq": {"n_member": 3}},
    {"mlp": {"hidden": 3}},
    {"ttest": "paired"},
    {"assays": []},
    {"colour": "blue"},
    {"version": 2},
])
def test_config_rejected_before_any_output(tmp_path, bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({**tiny_doc(), **bad, "output_dir": str(tmp_path / "out")})
    assert not (tmp_path / "out").exists()


def test_config_toml_roundtrip(tmp_path):
    text = """
version = 1
settings = [2]
models = ["rf"]
calibrators = ["none", "va"]
n_repetitions = 3
master_seed = 9
output_dir = "res"

[[assays]]
name = "a1"
[assays.synth]
fp_len = 64
records_per_span = 30
seed = 4

[rf]
max_features = "sqrt"

[grid.rf]
n_estimators = [3]
max_depth = [2]
"""
    path = tmp_path / "exp.toml"
    path.write_text(text, encoding="utf-8")
    cfg = ExperimentConfig.from_toml(path)
    assert cfg.settings == (2,) and cfg.models == ("rf",) and cfg.master_seed == 9
    assert cfg.output_dir == os.path.join(str(tmp_path), "res")
    assert cfg.assays[0].synth_seed == 4
    # the digest ignores where results go
    assert cfg.digest() == cfg.replace(output_dir="elsewhere").digest()
    assert cfg.digest() != cfg.replace(master_seed=10).digest()


def test_config_from_csv_path(tmp_path):
    from uqshift.synth import SynthParams, synth_generate
    from uqshift.dataio import write_dataset
    data = synth_generate(SynthParams(fp_len=64, records_per_span=30, weight_scale=3.0), 2)
    write_dataset(tmp_path / "a.csv", data)
    doc = tiny_doc(assays=[{"name": "csvassay", "path": "a.csv", "transform": "identity",
                            "threshold": 6.0, "direction": "above"}])
    cfg = ExperimentConfig.from_mapping(doc, base_dir=str(tmp_path))
    report = run_experiment(cfg)
    assert report.shift_rows[0]["n_test"] == 30


@pytest.mark.filterwarnings("ignore:training set has a single class")
def test_failures_are_recorded_not_fatal():
    # a single-class synthetic assay makes every calibrator fail
    doc = tiny_doc(calibrators=["none", "platt"], models=["rf"])
    doc["assays"][0]["synth"]["intercept"] = 40.0
    report = run_experiment(ExperimentConfig.from_mapping(doc))
    assert report.failures
    assert report.provenance["n_failures"] == len(report.failures)


def test_variant_names():
    assert variant_name("mlpe", "none") == "MLPE"
    assert variant_name("rf", "platt") == "RF-P"
    assert variant_name("bnn", "va") == "BNN-VA"


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(run_experiment(tiny_config()), tmp_path, formats=("xml",))
