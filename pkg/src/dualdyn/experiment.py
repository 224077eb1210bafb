"""Config-driven runs: data, training with per-epoch validation, best-val
checkpoint restoration, test evaluation, and machine-readable reports.

A run is fully determined by its config (one integer seed drives data
generation, missingness, splitting, initialization, shuffling, and noise),
so identical configs reproduce bit-identical checkpoints.  The
primary-latent mode trains the ordinary dual objective and only switches
the evaluation wiring to read the backbone state directly, so its
checkpoint hash matches a dual run of the same config.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from dualdyn.backbones import SolverError
from dualdyn.flows import FlowError
from dualdyn.data import (
    as_model_inputs,
    extract_horizon,
    gen_damped_oscillator,
    gen_spirals,
    inject_missingness,
    load_csv,
    split,
    take,
)
from dualdyn.model import (
    MODES,
    DualModel,
    OptimizerState,
    TrainingDiverged,
    ablation_variant,
    content_hash,
    evaluate,
    make_noise,
    prepare_batch,
    save_checkpoint,
    train_step,
)


def load_dataset(config):
    """Materialize the config's dataset entry into a target-carrying batch."""
    entry = config.dataset
    if entry["kind"] == "spirals":
        return gen_spirals(entry["n"], entry["length"], entry["noise_std"],
                           seed=config.seed)
    if entry["kind"] == "oscillator":
        return gen_damped_oscillator(entry["n"], length=entry["length"],
                                     horizon=entry["horizon"], seed=config.seed)
    batch = load_csv(entry["path"])
    if config.task == "forecast":
        batch = extract_horizon(batch, entry["horizon"])
    if config.task == "classify" and batch.targets is None:
        raise ValueError(f"{entry['path']} has no label column; cannot classify")
    return batch


def _prepared(batch, task):
    return prepare_batch(task=task, **as_model_inputs(batch, task))


def _val_loss(metrics):
    return metrics["loss"] if "loss" in metrics else metrics["mse"]


def _finite(x):
    # reports must stay strict JSON: non-finite metrics become null
    return x if x is None or np.isfinite(x) else None


def run_experiment(config, out_dir=None, mode="dual"):
    """Train (or for primary-latent, train dual and rewire the readout),
    restore the lowest-validation-loss parameters, and evaluate on test.

    Returns the report dict; when out_dir is given also writes report.json,
    checkpoint.npz, and metrics.csv there.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    t_start = time.perf_counter()

    batch = load_dataset(config)
    if config.missing_rate > 0:
        batch = inject_missingness(batch, config.missing_rate, config.seed)
    train_b, val_b, test_b = split(batch, seed=config.seed)

    labels = batch.targets if config.task == "classify" else None
    init_ss, loop_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    train_mode = "dual" if mode == "primary-latent" else mode
    model = DualModel(
        d_x=batch.channels, d_z=config.d_z, task=config.task,
        backbone=config.backbone, flow_kind=config.flow, n_l=config.n_l,
        n_h=config.n_h, n_classes=len(np.unique(labels)) if labels is not None else 2,
        rng=np.random.default_rng(init_ss), mode=train_mode,
    )
    opt = OptimizerState()
    loop_rng = np.random.default_rng(loop_ss)
    noise_rng = np.random.default_rng(noise_ss)
    sde = config.backbone == "sde"

    pb_val = _prepared(val_b, config.task)
    pb_test = _prepared(test_b, config.task)
    val_noise = make_noise(model, pb_val, int(noise_rng.integers(2 ** 63))) if sde else None
    test_noise = make_noise(model, pb_test, int(noise_rng.integers(2 ** 63))) if sde else None

    status = "ok"
    train_loss, val_loss = [], []
    best_epoch, best_state = None, None
    n_train = train_b.series_count
    for epoch in range(config.epochs):
        order = loop_rng.permutation(n_train)
        epoch_loss = 0.0
        try:
            for start in range(0, n_train, config.batch_size):
                sel = order[start:start + config.batch_size]
                pb = _prepared(take(train_b, sel), config.task)
                noise = (make_noise(model, pb, int(noise_rng.integers(2 ** 63)))
                         if sde else None)
                stats = train_step(model, pb, opt, lr=config.lr, noise=noise)
                epoch_loss += stats["loss"] * sel.size
        except TrainingDiverged:
            status = "diverged"
            break
        train_loss.append(epoch_loss / n_train)
        val_loss.append(_val_loss(evaluate(model, pb_val, noise=val_noise)))
        if best_epoch is None or val_loss[-1] < val_loss[best_epoch]:
            best_epoch = epoch
            best_state = {n: t.data.copy() for n, t in model._params.items()}

    if best_state is not None:
        for name, arr in best_state.items():
            model._params[name].data[...] = arr
    eval_model = ablation_variant(model, mode) if mode != train_mode else model
    try:
        with np.errstate(all="ignore"):
            test_metrics = evaluate(eval_model, pb_test, noise=test_noise)
    except (SolverError, FlowError):
        # a diverged run can leave parameters the forward refuses outright
        test_metrics = {}

    report = {
        "config": config.to_dict(),
        "mode": mode,
        "status": status,
        "epochs_run": len(val_loss),
        "train_loss": [_finite(x) for x in train_loss],
        "val_loss": [_finite(x) for x in val_loss],
        "best_epoch": best_epoch,
        "test_metrics": {k: _finite(v) for k, v in test_metrics.items()},
        "parameter_count": int(sum(t.data.size for t in model._params.values())),
        "checkpoint_hash": content_hash(model),
        "split_indices": {
            "train": train_b.indices.tolist(),
            "val": val_b.indices.tolist(),
            "test": test_b.indices.tolist(),
        },
        "wall_clock_seconds": round(time.perf_counter() - t_start, 3),
    }

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(eval_model, out / "checkpoint.npz",
                        extra={"mode": mode, "best_epoch": best_epoch})
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, (tl, vl) in enumerate(zip(train_loss, val_loss)):
                writer.writerow([epoch, repr(tl), repr(vl)])
    return report


def ablation_summary(reports):
    """Comparative rows sorted best first by the shared test metric."""
    key = "accuracy" if "accuracy" in reports[0]["test_metrics"] else "mse"
    rows = [
        {"mode": r["mode"], "metric": key,
         "value": r["test_metrics"].get(key), "status": r["status"]}
        for r in reports
    ]
    missing = [r for r in rows if r["value"] is None]
    scored = [r for r in rows if r["value"] is not None]
    scored.sort(key=lambda r: (-r["value"] if key == "accuracy" else r["value"],
                               r["mode"]))
    return scored + missing


def run_ablation_suite(config, modes, out_dir=None):
    """One run per requested mode with the shared config/seed, plus a
    sorted comparative summary (written to summary.json under out_dir)."""
    if not modes:
        raise ValueError("need at least one ablation mode")
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ValueError(f"unknown mode(s) {unknown}, expected a subset of {MODES}")
    if len(set(modes)) != len(modes):
        raise ValueError(f"duplicate modes in {modes}")
    reports = [
        run_experiment(config, mode=mode,
                       out_dir=None if out_dir is None else Path(out_dir) / mode)
        for mode in modes
    ]
    summary = ablation_summary(reports)
    if out_dir is not None:
        with open(Path(out_dir) / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return reports
