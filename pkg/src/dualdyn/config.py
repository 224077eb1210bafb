"""Experiment configuration: JSON in, validated fields out, round-trippable.

Unknown keys fail loudly with the valid key list, and grid-valued fields
(n_l, n_h, missing_rate) reject values outside their grids rather than
silently accepting them.
"""

from __future__ import annotations

import dataclasses
import json

from dualdyn.model import MODES, TASKS

BACKBONES = ("ode", "cde", "sde")
FLOWS = ("resnet", "gru", "coupling", "mlp")
MISSING_RATES = (0.0, 0.3, 0.5, 0.7)
LAYER_GRID = (1, 2, 3, 4)
WIDTH_GRID = (16, 32, 64, 128)

_DATASET_DEFAULTS = {
    "spirals": {"n": 400, "length": 50, "noise_std": 0.05},
    "oscillator": {"n": 200, "length": 50, "horizon": 10},
    "csv": {"path": None, "horizon": None},
}


class ConfigError(ValueError):
    """Configuration file or dict violates the schema."""


@dataclasses.dataclass
class ExperimentConfig:
    task: str
    backbone: str = "cde"
    flow: str = "coupling"
    missing_rate: float = 0.0
    n_l: int = 2
    n_h: int = 32
    d_z: int = 16
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    dataset: dict = None

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def _as_int(value, key):
    _require(isinstance(value, int) and not isinstance(value, bool),
             f"{key} must be an integer, got {value!r}")
    return value


def _as_real(value, key):
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             f"{key} must be a number, got {value!r}")
    return float(value)


def _check_dataset(entry, task):
    _require(isinstance(entry, dict), f"dataset must be an object, got {entry!r}")
    kind = entry.get("kind")
    _require(kind in _DATASET_DEFAULTS,
             f"dataset kind must be one of {sorted(_DATASET_DEFAULTS)}, got {kind!r}")
    defaults = _DATASET_DEFAULTS[kind]
    unknown = set(entry) - set(defaults) - {"kind"}
    _require(not unknown,
             f"unknown dataset key(s) {sorted(unknown)}; valid keys for {kind}: "
             f"{sorted(defaults) + ['kind']}")
    out = {"kind": kind, **defaults, **entry}
    if kind == "spirals":
        _require(_as_int(out["n"], "dataset.n") >= 10, "dataset.n must be >= 10")
        _require(_as_int(out["length"], "dataset.length") >= 10,
                 "dataset.length must be >= 10")
        _require(_as_real(out["noise_std"], "dataset.noise_std") >= 0,
                 "dataset.noise_std must be >= 0")
        _require(task != "forecast", "spirals carry no forecast horizon")
    elif kind == "oscillator":
        _require(_as_int(out["n"], "dataset.n") >= 10, "dataset.n must be >= 10")
        _require(_as_int(out["length"], "dataset.length") >= 10,
                 "dataset.length must be >= 10")
        _require(_as_int(out["horizon"], "dataset.horizon") >= 1,
                 "dataset.horizon must be >= 1")
    else:
        _require(isinstance(out["path"], str) and out["path"],
                 "dataset.path must name a CSV file")
        if task == "forecast":
            _require(out["horizon"] is not None,
                     "forecasting from CSV needs dataset.horizon")
            _as_int(out["horizon"], "dataset.horizon")
        else:
            _require(out["horizon"] is None,
                     "dataset.horizon only applies to forecasting")
    return out


def config_from_dict(raw):
    """Validate a plain dict (parsed JSON) into an ExperimentConfig."""
    _require(isinstance(raw, dict), f"config must be a JSON object, got {raw!r}")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - fields
    _require(not unknown,
             f"unknown config key(s) {sorted(unknown)}; valid keys: {sorted(fields)}")
    _require("task" in raw, "config needs a task")

    cfg = ExperimentConfig(**raw)
    _require(cfg.task in TASKS, f"task must be one of {TASKS}, got {cfg.task!r}")
    _require(cfg.backbone in BACKBONES,
             f"backbone must be one of {BACKBONES}, got {cfg.backbone!r}")
    _require(cfg.flow in FLOWS, f"flow must be one of {FLOWS}, got {cfg.flow!r}")
    cfg.missing_rate = _as_real(cfg.missing_rate, "missing_rate")
    _require(cfg.missing_rate in MISSING_RATES,
             f"missing_rate must be one of {MISSING_RATES}, got {cfg.missing_rate}")
    _require(_as_int(cfg.n_l, "n_l") in LAYER_GRID,
             f"n_l must be one of {LAYER_GRID}, got {cfg.n_l}")
    _require(_as_int(cfg.n_h, "n_h") in WIDTH_GRID,
             f"n_h must be one of {WIDTH_GRID}, got {cfg.n_h}")
    _require(_as_int(cfg.d_z, "d_z") >= 1, f"d_z must be >= 1, got {cfg.d_z}")
    cfg.lr = _as_real(cfg.lr, "lr")
    _require(0 < cfg.lr < float("inf"), f"lr must be positive, got {cfg.lr}")
    _require(_as_int(cfg.batch_size, "batch_size") >= 1,
             f"batch_size must be >= 1, got {cfg.batch_size}")
    _require(_as_int(cfg.epochs, "epochs") >= 0,
             f"epochs must be >= 0, got {cfg.epochs}")
    _as_int(cfg.seed, "seed")

    if cfg.dataset is None:
        kind = "oscillator" if cfg.task == "forecast" else "spirals"
        cfg.dataset = {"kind": kind}
    cfg.dataset = _check_dataset(cfg.dataset, cfg.task)
    if cfg.task == "interpolate":
        _require(cfg.missing_rate > 0,
                 "interpolation reconstructs hidden points; missing_rate must be > 0")
    return cfg


def parse_config(path):
    """Load and validate a JSON config file."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


# re-exported so callers validating mode lists need only this module
ABLATION_MODES = MODES
