"""End-to-end experiment runs on desk-scale datasets."""

import json

import numpy as np
import pytest

from dualdyn.config import config_from_dict
from dualdyn.data import inject_missingness, split, take
from dualdyn.experiment import (
    ablation_summary,
    load_dataset,
    run_ablation_suite,
    run_experiment,
)
from dualdyn.model import DualModel, evaluate, load_checkpoint, prepare_batch
from dualdyn.data import as_model_inputs


def _tiny_classify(**overrides):
    raw = {
        "task": "classify", "epochs": 2, "batch_size": 8, "d_z": 4,
        "n_h": 16, "n_l": 1, "seed": 5,
        "dataset": {"kind": "spirals", "n": 20, "length": 10, "noise_std": 0.1},
    }
    raw.update(overrides)
    return config_from_dict(raw)


def _strip_clock(report):
    return {k: v for k, v in report.items() if k != "wall_clock_seconds"}


def test_report_shape_and_splits():
    cfg = _tiny_classify()
    report = run_experiment(cfg)
    assert report["status"] == "ok"
    assert report["epochs_run"] == 2
    assert len(report["val_loss"]) == 2 and len(report["train_loss"]) == 2
    assert report["best_epoch"] == int(np.argmin(report["val_loss"]))
    assert set(report["test_metrics"]) == {"loss", "accuracy", "auroc"}
    assert report["parameter_count"] > 0
    assert len(report["checkpoint_hash"]) == 64
    sizes = {k: len(v) for k, v in report["split_indices"].items()}
    assert sizes == {"train": 14, "val": 3, "test": 3}
    assert report["config"] == cfg.to_dict()


def test_identical_config_reproduces_everything():
    cfg = _tiny_classify(seed=11)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert _strip_clock(a) == _strip_clock(b)


def test_outputs_written_and_checkpoint_loads(tmp_path):
    cfg = _tiny_classify()
    report = run_experiment(cfg, out_dir=tmp_path)
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert _strip_clock(on_disk) == _strip_clock(report)
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 1 + report["epochs_run"]

    model = DualModel(d_x=2, d_z=cfg.d_z, task="classify", backbone=cfg.backbone,
                      flow_kind=cfg.flow, n_l=cfg.n_l, n_h=cfg.n_h)
    meta = load_checkpoint(model, tmp_path / "checkpoint.npz")
    assert meta["sha256"] == report["checkpoint_hash"]

    # the restored parameters reproduce the reported test metrics
    batch = inject_missingness(load_dataset(cfg), cfg.missing_rate, cfg.seed) \
        if cfg.missing_rate else load_dataset(cfg)
    _, _, test_b = split(batch, seed=cfg.seed)
    pb = prepare_batch(task="classify", **as_model_inputs(test_b, "classify"))
    again = evaluate(model, pb)
    assert again == pytest.approx(report["test_metrics"])


def test_epochs_zero_reports_untrained_metrics():
    cfg = _tiny_classify(epochs=0)
    report = run_experiment(cfg)
    assert report["status"] == "ok"
    assert report["epochs_run"] == 0
    assert report["val_loss"] == [] and report["best_epoch"] is None
    assert "accuracy" in report["test_metrics"]


def test_divergence_reports_status():
    cfg = _tiny_classify(lr=1e12, epochs=3, seed=0)
    with np.errstate(all="ignore"):
        report = run_experiment(cfg)
    assert report["status"] == "diverged"
    assert report["epochs_run"] == len(report["val_loss"])
    text = json.dumps(report, allow_nan=False)  # strict JSON survives
    assert "diverged" in text


def test_forecast_and_interpolate_run():
    forecast = config_from_dict({
        "task": "forecast", "backbone": "sde", "flow": "resnet", "epochs": 1,
        "batch_size": 8, "d_z": 4, "n_h": 16, "n_l": 1, "seed": 2,
        "dataset": {"kind": "oscillator", "n": 12, "length": 12, "horizon": 3},
    })
    report = run_experiment(forecast)
    assert report["status"] == "ok" and "mse" in report["test_metrics"]

    interp = config_from_dict({
        "task": "interpolate", "backbone": "ode", "flow": "gru", "epochs": 1,
        "batch_size": 8, "d_z": 4, "n_h": 16, "n_l": 1, "seed": 3,
        "missing_rate": 0.5,
        "dataset": {"kind": "spirals", "n": 16, "length": 12, "noise_std": 0.1},
    })
    report = run_experiment(interp)
    assert report["status"] == "ok" and "mse" in report["test_metrics"]


def test_ablation_suite_shares_partitions(tmp_path):
    cfg = _tiny_classify(seed=7, epochs=1)
    modes = ["dual", "mlp-decoder", "primary-latent"]
    reports = run_ablation_suite(cfg, modes, out_dir=tmp_path)
    assert [r["mode"] for r in reports] == modes
    for report in reports[1:]:
        assert report["split_indices"] == reports[0]["split_indices"]
    # primary-latent re-evaluates the dual training run's parameters
    by_mode = {r["mode"]: r for r in reports}
    assert by_mode["primary-latent"]["checkpoint_hash"] == by_mode["dual"]["checkpoint_hash"]
    assert by_mode["mlp-decoder"]["checkpoint_hash"] != by_mode["dual"]["checkpoint_hash"]

    summary = json.loads((tmp_path / "summary.json").read_text())
    values = [row["value"] for row in summary]
    assert values == sorted(values, reverse=True)
    assert {row["mode"] for row in summary} == set(modes)
    for mode in modes:
        assert (tmp_path / mode / "report.json").exists()


def test_ablation_suite_validates_modes():
    cfg = _tiny_classify()
    with pytest.raises(ValueError, match="at least one"):
        run_ablation_suite(cfg, [])
    with pytest.raises(ValueError, match="unknown mode"):
        run_ablation_suite(cfg, ["dual", "half-flow"])
    with pytest.raises(ValueError, match="duplicate"):
        run_ablation_suite(cfg, ["dual", "dual"])


def test_ablation_summary_mse_sorts_ascending():
    reports = [
        {"mode": "a", "status": "ok", "test_metrics": {"mse": 0.5}},
        {"mode": "b", "status": "ok", "test_metrics": {"mse": 0.2}},
        {"mode": "c", "status": "diverged", "test_metrics": {}},
    ]
    rows = ablation_summary(reports)
    assert [r["mode"] for r in rows] == ["b", "a", "c"]
