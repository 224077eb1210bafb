"""Synthetic generators, missingness injection, splitting, and CSV round-trip.

Batches hold per-series irregular observations channel-major (channels x L)
plus task targets: an integer label per series (classification) or a
channels x horizon continuation matrix on a shared future grid (forecasting).
Interpolation has no stored target; the positions hidden by
inject_missingness are the reconstruction queries and the (unmodified)
values under them the ground truth.  Batches are immutable once built.
"""

from __future__ import annotations

import csv

import numpy as np


class CsvSchemaError(ValueError):
    """CSV file violates the series_id,time,ch0,...[,label] schema."""


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


class TimeSeriesBatch:
    """Immutable per-series observations plus targets and split metadata."""

    __slots__ = ("times", "values", "masks", "targets", "target_times",
                 "hidden", "norm_mean", "norm_std", "indices")

    def __init__(self, times, values, masks, targets=None, target_times=None,
                 hidden=None, norm_mean=None, norm_std=None, indices=None):
        if not times or not (len(times) == len(values) == len(masks)):
            raise ValueError("times/values/masks must be equal-length, non-empty lists")
        self.times = [_frozen(t, np.float64) for t in times]
        self.values = [_frozen(v, np.float64) for v in values]
        self.masks = [_frozen(m, bool) for m in masks]
        channels = self.values[0].shape[0]
        for i, (t, v, m) in enumerate(zip(self.times, self.values, self.masks)):
            if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
                raise ValueError(f"series {i}: times must be >=2 strictly increasing points")
            if v.shape != (channels, t.size) or m.shape != v.shape:
                raise ValueError(
                    f"series {i}: values/mask must be {channels} x {t.size}, "
                    f"got {v.shape} and {m.shape}"
                )
            if not np.all(m[:, 0]):
                raise ValueError(f"series {i}: first time point must be observed on every channel")
            if np.any(m.sum(axis=1) < 2):
                raise ValueError(f"series {i}: every channel needs >=2 observed points")

        if hidden is None:
            self.hidden = None
        else:
            self.hidden = [_frozen(h, bool) for h in hidden]
            for i, (h, v, m) in enumerate(zip(self.hidden, self.values, self.masks)):
                if h.shape != v.shape:
                    raise ValueError(f"series {i}: hidden mask shape {h.shape} != {v.shape}")
                if np.any(h & m):
                    raise ValueError(f"series {i}: hidden positions must be unobserved")

        self.target_times = None
        if targets is None:
            self.targets = None
        elif isinstance(targets, np.ndarray) or np.isscalar(targets[0]):
            self.targets = _frozen(targets, np.int64)
            if self.targets.shape != (self.series_count,):
                raise ValueError("labels must be one class id per series")
        else:
            if target_times is None:
                raise ValueError("forecast targets need target_times")
            self.target_times = _frozen(target_times, np.float64)
            horizon = self.target_times.size
            if horizon < 1 or np.any(np.diff(self.target_times) <= 0):
                raise ValueError("target_times must be >=1 strictly increasing points")
            self.targets = [_frozen(y, np.float64) for y in targets]
            if len(self.targets) != self.series_count:
                raise ValueError("one target matrix per series required")
            for i, (y, t) in enumerate(zip(self.targets, self.times)):
                if y.shape != (channels, horizon):
                    raise ValueError(
                        f"series {i}: target must be {channels} x {horizon}, got {y.shape}"
                    )
                if self.target_times[0] <= t[-1]:
                    raise ValueError(f"series {i}: targets must lie beyond the last observation")

        self.norm_mean = None if norm_mean is None else _frozen(norm_mean, np.float64)
        self.norm_std = None if norm_std is None else _frozen(norm_std, np.float64)
        self.indices = None if indices is None else _frozen(indices, np.int64)

    @property
    def series_count(self):
        return len(self.times)

    @property
    def channels(self):
        return self.values[0].shape[0]


def _spiral(t, chirality, phase, turns=2.0, r0=0.25, r1=1.0):
    theta = phase + chirality * 2.0 * np.pi * turns * t
    r = r0 + r1 * t
    return np.stack([r * np.cos(theta), r * np.sin(theta)])


def gen_spirals(n, length, noise_std, seed):
    """Two-class planar spirals on a regular [0,1] grid, labels by chirality.

    Half the series wind counterclockwise (label 1), half clockwise
    (label 0), each from a random start angle so the initial point carries
    no class signal; Gaussian noise is added to both channels.
    """
    if n % 2:
        raise ValueError(f"n must be even to balance the classes, got {n}")
    if length < 10:
        raise ValueError(f"length must be >=10, got {length}")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, length)
    times, values, masks, labels = [], [], [], np.arange(n) % 2
    for label in labels:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        clean = _spiral(t, 1.0 if label else -1.0, phase)
        times.append(t)
        values.append(clean + noise_std * rng.standard_normal(clean.shape))
        masks.append(np.ones(clean.shape, dtype=bool))
    return TimeSeriesBatch(times, values, masks, targets=labels)


def _oscillator(t, gamma, omega, phase):
    envelope = np.exp(-gamma * t)
    angle = omega * t + phase
    return np.stack([envelope * np.cos(angle), envelope * np.sin(angle)])


def gen_damped_oscillator(n, length=50, horizon=10, seed=0):
    """Damped rotations e^{-gamma t}(cos, sin)(omega t + phase) with the
    next `horizon` grid points of the same curve as forecast targets.

    Per-series gamma ~ U[0.8, 1.6], omega ~ U[3, 6], phase ~ U[0, 2pi); the
    observed window covers [0, 1] on a regular grid and the target grid
    continues it at the same spacing.
    """
    if length < 2 or horizon < 1:
        raise ValueError(f"need length >=2 and horizon >=1, got {length}, {horizon}")
    rng = np.random.default_rng(seed)
    dt = 1.0 / (length - 1)
    t_full = dt * np.arange(length + horizon)
    times, values, masks, targets = [], [], [], []
    for _ in range(n):
        gamma = rng.uniform(0.8, 1.6)
        omega = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        curve = _oscillator(t_full, gamma, omega, phase)
        times.append(t_full[:length])
        values.append(curve[:, :length])
        masks.append(np.ones((2, length), dtype=bool))
        targets.append(curve[:, length:])
    return TimeSeriesBatch(times, values, masks, targets=targets,
                           target_times=t_full[length:])


def inject_missingness(batch, rate, seed):
    """Mask floor(rate*(L-1)) non-initial observed points per channel.

    Channels draw independently (seeded by (seed, series, channel)); the
    first observation always survives.  Newly hidden positions are recorded
    so interpolation can score reconstructions there.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return batch
    masks, hidden = [], []
    for i, mask in enumerate(batch.masks):
        new_mask = np.array(mask)
        new_hidden = (np.zeros_like(new_mask) if batch.hidden is None
                      else np.array(batch.hidden[i]))
        n_drop = int(rate * (mask.shape[1] - 1))
        for c in range(mask.shape[0]):
            observed = np.flatnonzero(mask[c, 1:]) + 1
            if n_drop > observed.size:
                raise ValueError(
                    f"series {i} channel {c}: cannot hide {n_drop} of "
                    f"{observed.size} non-initial observed points"
                )
            rs = np.random.default_rng(np.random.SeedSequence((seed, i, c)))
            chosen = rs.choice(observed, size=n_drop, replace=False)
            new_mask[c, chosen] = False
            new_hidden[c, chosen] = True
        masks.append(new_mask)
        hidden.append(new_hidden)
    return TimeSeriesBatch(batch.times, batch.values, masks, targets=batch.targets,
                           target_times=batch.target_times, hidden=hidden,
                           norm_mean=batch.norm_mean, norm_std=batch.norm_std,
                           indices=batch.indices)


def _apportion(counts, total):
    # largest-remainder allocation of `total` slots proportional to counts
    quota = counts * (total / counts.sum())
    base = np.floor(quota).astype(np.int64)
    order = np.argsort(base - quota, kind="stable")
    base[order[:total - base.sum()]] += 1
    return base


def take(batch, sel):
    """Subset (or reorder) of the series in `sel`, metadata carried along."""
    sel = np.asarray(sel, dtype=np.int64)
    targets = batch.targets
    if isinstance(targets, np.ndarray):
        targets = targets[sel]
    elif targets is not None:
        targets = [targets[i] for i in sel]
    return TimeSeriesBatch(
        [batch.times[i] for i in sel], [batch.values[i] for i in sel],
        [batch.masks[i] for i in sel],
        targets=targets, target_times=batch.target_times,
        hidden=None if batch.hidden is None else [batch.hidden[i] for i in sel],
        norm_mean=batch.norm_mean, norm_std=batch.norm_std,
        indices=sel if batch.indices is None else batch.indices[sel],
    )


def _normalized(batch, norm_mean, norm_std):
    scale = norm_std[:, None]
    offset = norm_mean[:, None]
    targets = batch.targets
    if targets is not None and not isinstance(targets, np.ndarray):
        targets = [(y - offset) / scale for y in targets]
    return TimeSeriesBatch(
        batch.times, [(v - offset) / scale for v in batch.values], batch.masks,
        targets=targets, target_times=batch.target_times, hidden=batch.hidden,
        norm_mean=norm_mean, norm_std=norm_std, indices=batch.indices,
    )


def split(batch, ratios=(0.70, 0.15, 0.15), seed=0):
    """Shuffle into train/val/test (floor sizes, remainder to train),
    stratified by class when labels are present; normalize every split with
    per-channel statistics of the training split's observed entries."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    n = batch.series_count
    if n < 10:
        raise ValueError(f"need >=10 series to split, got {n}")
    n_val = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    rng = np.random.default_rng(seed)

    labels = batch.targets if isinstance(batch.targets, np.ndarray) else None
    if labels is None:
        perm = rng.permutation(n)
        parts = [perm[:n_val], perm[n_val:n_val + n_test], perm[n_val + n_test:]]
    else:
        classes, counts = np.unique(labels, return_counts=True)
        if counts.min() < 3:
            worst = classes[counts.argmin()]
            raise ValueError(
                f"class {worst} has {counts.min()} series; stratification needs >=3"
            )
        per_val = _apportion(counts, n_val)
        # apportion test on what val left so remainders counterbalance and
        # every split stays within +-1 of class balance
        per_test = _apportion(counts - per_val, n_test)
        parts = [[], [], []]
        for c, k_val, k_test in zip(classes, per_val, per_test):
            perm = rng.permutation(np.flatnonzero(labels == c))
            parts[0].append(perm[:k_val])
            parts[1].append(perm[k_val:k_val + k_test])
            parts[2].append(perm[k_val + k_test:])
        parts = [np.concatenate(p) for p in parts]
    val_idx, test_idx, train_idx = (np.sort(p) for p in parts)

    pooled = [np.concatenate([batch.values[i][c][batch.masks[i][c]] for i in train_idx])
              for c in range(batch.channels)]
    norm_mean = np.array([p.mean() for p in pooled])
    norm_std = np.array([p.std() for p in pooled])
    # constant channels normalize by 1 to stay finite
    norm_std[norm_std < 1e-12] = 1.0
    whole = _normalized(batch, norm_mean, norm_std)
    return tuple(take(whole, sel) for sel in (train_idx, val_idx, test_idx))


def extract_horizon(batch, horizon):
    """Move the last `horizon` fully-observed points of each series into
    forecast targets on their (shared) time grid."""
    min_len = min(t.size for t in batch.times)
    if not 1 <= horizon <= min_len - 2:
        raise ValueError(f"horizon must be in [1, {min_len - 2}], got {horizon}")
    target_times = batch.times[0][-horizon:]
    times, values, masks, targets = [], [], [], []
    for i, (t, v, m) in enumerate(zip(batch.times, batch.values, batch.masks)):
        if not np.allclose(t[-horizon:], target_times, atol=1e-12):
            raise ValueError(f"series {i}: target times differ from series 0")
        if not np.all(m[:, -horizon:]):
            raise ValueError(f"series {i}: forecast targets must be fully observed")
        times.append(t[:-horizon])
        values.append(v[:, :-horizon])
        masks.append(m[:, :-horizon])
        targets.append(v[:, -horizon:])
    return TimeSeriesBatch(times, values, masks, targets=targets,
                           target_times=target_times, indices=batch.indices)


def as_model_inputs(batch, task):
    """Kwargs for the model's batch preparation: row-major series plus the
    task's queries (labels; hidden-position reconstructions; horizon grid)."""
    out = {
        "times": list(batch.times),
        "values": [v.T for v in batch.values],
        "masks": [m.T for m in batch.masks],
    }
    if task == "classify":
        if not isinstance(batch.targets, np.ndarray):
            raise ValueError("classification needs integer labels")
        out["labels"] = batch.targets
    elif task == "forecast":
        if batch.target_times is None:
            raise ValueError("forecasting needs horizon targets")
        out["query_times"] = batch.target_times
        out["query_targets"] = np.stack([y.T for y in batch.targets])
    elif task == "interpolate":
        if batch.hidden is None or not any(h.any() for h in batch.hidden):
            raise ValueError("interpolation needs positions hidden by inject_missingness")
        query_times = np.unique(np.concatenate(
            [t[h.any(axis=0)] for t, h in zip(batch.times, batch.hidden)]
        ))
        n, c = batch.series_count, batch.channels
        targets = np.zeros((n, query_times.size, c))
        mask = np.zeros((n, query_times.size, c), dtype=bool)
        for i, (t, v, h) in enumerate(zip(batch.times, batch.values, batch.hidden)):
            pos = np.searchsorted(query_times, t)
            hit = np.abs(query_times[np.minimum(pos, query_times.size - 1)] - t) < 1e-12
            targets[i, pos[hit]] = v[:, hit].T
            mask[i, pos[hit]] = h[:, hit].T
        out["query_times"] = query_times
        out["query_targets"] = targets
        out["query_mask"] = mask
    else:
        raise ValueError(f"unknown task {task!r}")
    return out


def save_csv(batch, path):
    """Write series_id,time,ch0,...[,label]; unobserved cells are empty and
    forecast target rows follow the observed rows of each series."""
    classify = isinstance(batch.targets, np.ndarray)
    header = ["series_id", "time"] + [f"ch{c}" for c in range(batch.channels)]
    if classify:
        header.append("label")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(batch.series_count):
            for j, t in enumerate(batch.times[i]):
                cells = [repr(float(batch.values[i][c, j])) if batch.masks[i][c, j]
                         else "" for c in range(batch.channels)]
                row = [i, repr(float(t))] + cells
                if classify:
                    row.append(int(batch.targets[i]))
                writer.writerow(row)
            if batch.target_times is not None:
                for j, t in enumerate(batch.target_times):
                    row = [i, repr(float(t))]
                    row += [repr(float(batch.targets[i][c, j]))
                            for c in range(batch.channels)]
                    writer.writerow(row)


def _parse_cell(text, row_num, what):
    try:
        out = float(text)
    except ValueError:
        raise CsvSchemaError(f"row {row_num}: non-numeric {what} {text!r}") from None
    if not np.isfinite(out):
        raise CsvSchemaError(f"row {row_num}: non-finite {what} {text!r}")
    return out


def load_csv(path):
    """Read the schema above back into a batch; rows may arrive unsorted.

    Duplicate (series_id, time) pairs and non-numeric cells fail with the
    offending 1-based row number.  Forecast files need extract_horizon to
    peel their trailing target rows off afterwards.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvSchemaError("empty file: header row required")
    header = [h.strip() for h in rows[0]]
    has_label = header and header[-1] == "label"
    channels = len(header) - 2 - has_label
    want = ["series_id", "time"] + [f"ch{c}" for c in range(channels)]
    if channels < 1 or header[:len(want)] != want:
        raise CsvSchemaError(f"header must be series_id,time,ch0,...[,label], got {header}")

    series = {}
    for row_num, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvSchemaError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")
        sid = row[0].strip()
        if not sid.lstrip("-").isdigit():
            raise CsvSchemaError(f"row {row_num}: non-numeric series_id {sid!r}")
        t = _parse_cell(row[1], row_num, "time")
        cells = [None if cell.strip() == "" else _parse_cell(cell, row_num, f"ch{c}")
                 for c, cell in enumerate(row[2:2 + channels])]
        label = None
        if has_label:
            try:
                label = int(row[-1])
            except ValueError:
                raise CsvSchemaError(
                    f"row {row_num}: non-integer label {row[-1]!r}"
                ) from None
        rec = series.setdefault(int(sid), {"t": {}, "label": label})
        if t in rec["t"]:
            raise CsvSchemaError(f"row {row_num}: duplicate time {t} for series {sid}")
        if rec["label"] != label:
            raise CsvSchemaError(f"row {row_num}: label changed within series {sid}")
        rec["t"][t] = cells

    times, values, masks, labels = [], [], [], []
    for sid in sorted(series):
        rec = series[sid]
        t = np.array(sorted(rec["t"]))
        cols = [rec["t"][ti] for ti in t]
        mask = np.array([[cell is not None for cell in col] for col in cols]).T
        vals = np.array([[0.0 if cell is None else cell for cell in col] for col in cols]).T
        times.append(t)
        values.append(vals)
        masks.append(mask)
        labels.append(rec["label"])
    return TimeSeriesBatch(times, values, masks,
                           targets=np.array(labels) if has_label else None)
