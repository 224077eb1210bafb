"""Generators, missingness, splits, and CSV round-trips."""

import numpy as np
import pytest

from dualdyn.data import (
    CsvSchemaError,
    TimeSeriesBatch,
    _oscillator,
    as_model_inputs,
    extract_horizon,
    gen_damped_oscillator,
    gen_spirals,
    inject_missingness,
    load_csv,
    save_csv,
    split,
)
from dualdyn.model import prepare_batch


def _flat_batch(n=1, channels=2, length=30, value=0.0):
    t = np.linspace(0.0, 1.0, length)
    return TimeSeriesBatch(
        [t] * n, [np.full((channels, length), value)] * n,
        [np.ones((channels, length), dtype=bool)] * n,
    )


# ---------------------------------------------------------------- batch type

def test_batch_validation():
    t = np.linspace(0.0, 1.0, 5)
    v = np.zeros((2, 5))
    m = np.ones((2, 5), dtype=bool)
    with pytest.raises(ValueError, match="strictly increasing"):
        TimeSeriesBatch([t[::-1]], [v], [m])
    bad = m.copy()
    bad[0, 0] = False
    with pytest.raises(ValueError, match="first time point"):
        TimeSeriesBatch([t], [v], [bad])
    sparse = m.copy()
    sparse[1, 1:] = False
    with pytest.raises(ValueError, match=">=2 observed"):
        TimeSeriesBatch([t], [v], [sparse])
    with pytest.raises(ValueError, match="hidden positions"):
        TimeSeriesBatch([t], [v], [m], hidden=[m])
    with pytest.raises(ValueError, match="one class id per series"):
        TimeSeriesBatch([t], [v], [m], targets=[0, 1])


def test_batch_is_immutable():
    batch = _flat_batch()
    with pytest.raises(ValueError):
        batch.values[0][0, 0] = 1.0
    with pytest.raises(ValueError):
        batch.masks[0][0, 0] = False


# ---------------------------------------------------------------- generators

def test_spirals_counts_and_grid():
    batch = gen_spirals(100, 20, 0.05, seed=0)
    assert batch.series_count == 100
    assert int(batch.targets.sum()) == 50
    for t, v, m in zip(batch.times, batch.values, batch.masks):
        np.testing.assert_allclose(t, np.linspace(0.0, 1.0, 20), atol=1e-15)
        assert v.shape == (2, 20) and m.all()


def test_spirals_chirality_matches_label():
    # x_i dy - y_i dx = r_i r_{i+1} sin(dtheta): its sign is the winding
    # direction, exactly recoverable from noiseless curves
    batch = gen_spirals(20, 30, 0.0, seed=1)
    for v, label in zip(batch.values, batch.targets):
        x, y = v
        cross = x[:-1] * np.diff(y) - y[:-1] * np.diff(x)
        assert np.all(np.sign(cross) == (1.0 if label else -1.0))


def test_spirals_start_angle_uninformative():
    # all series begin on the same circle, so x0 alone cannot classify
    batch = gen_spirals(40, 12, 0.0, seed=2)
    radii = np.array([np.hypot(*v[:, 0]) for v in batch.values])
    np.testing.assert_allclose(radii, 0.25, atol=1e-12)


def test_spirals_deterministic_and_validated():
    a = gen_spirals(6, 10, 0.1, seed=7)
    b = gen_spirals(6, 10, 0.1, seed=7)
    for va, vb in zip(a.values, b.values):
        assert np.array_equal(va, vb)
    with pytest.raises(ValueError, match="even"):
        gen_spirals(7, 10, 0.1, seed=0)
    with pytest.raises(ValueError, match=">=10"):
        gen_spirals(6, 9, 0.1, seed=0)


def test_oscillator_undamped_energy():
    t = np.linspace(0.0, 2.0, 40)
    curve = _oscillator(t, 0.0, 4.5, 1.2)
    np.testing.assert_allclose(curve[0] ** 2 + curve[1] ** 2, 1.0, atol=1e-12)


def test_oscillator_targets_continue_the_curve():
    # recover (gamma, omega, phase) from the first two clean samples and
    # extrapolate; targets must match the closed form
    batch = gen_damped_oscillator(5, length=50, horizon=10, seed=3)
    assert batch.target_times.shape == (10,) and batch.target_times[0] > 1.0
    for t, v, y in zip(batch.times, batch.values, batch.targets):
        dt = t[1] - t[0]
        r = np.hypot(v[0], v[1])
        gamma = -np.log(r[1] / r[0]) / dt
        ang = np.unwrap(np.arctan2(v[1], v[0]))
        omega = (ang[1] - ang[0]) / dt
        expect = _oscillator(batch.target_times, gamma, omega, ang[0])
        np.testing.assert_allclose(y, expect, atol=1e-8)
        assert 0.8 <= gamma <= 1.6 and 3.0 <= omega <= 6.0


def test_oscillator_reproducible():
    a = gen_damped_oscillator(4, seed=11)
    b = gen_damped_oscillator(4, seed=11)
    for ya, yb in zip(a.targets, b.targets):
        assert np.array_equal(ya, yb)
    assert a.times[0].size == 50 and a.targets[0].shape == (2, 10)


# --------------------------------------------------------------- missingness

def test_missingness_counts_and_first_point():
    batch = _flat_batch(n=3, length=51)
    out = inject_missingness(batch, 0.5, seed=0)
    for mask, hid in zip(out.masks, out.hidden):
        assert np.all(mask[:, 0])
        np.testing.assert_array_equal((~mask).sum(axis=1), 25)
        np.testing.assert_array_equal(hid.sum(axis=1), 25)
        assert not np.any(hid & mask)
    for va, vb in zip(batch.values, out.values):
        assert np.array_equal(va, vb)


def test_missingness_rate_zero_and_errors():
    batch = _flat_batch()
    assert inject_missingness(batch, 0.0, seed=0) is batch
    with pytest.raises(ValueError, match=r"rate must be in \[0, 1\)"):
        inject_missingness(batch, 1.0, seed=0)
    with pytest.raises(ValueError, match=r"rate must be in \[0, 1\)"):
        inject_missingness(batch, -0.1, seed=0)


def test_missingness_channels_draw_independently():
    batch = _flat_batch(channels=100, length=30)
    out = inject_missingness(batch, 0.5, seed=5)
    patterns = {tuple(row) for row in out.hidden[0]}
    assert len(patterns) >= 95
    again = inject_missingness(batch, 0.5, seed=5)
    assert np.array_equal(out.masks[0], again.masks[0])
    other = inject_missingness(batch, 0.5, seed=6)
    assert not np.array_equal(out.masks[0], other.masks[0])


def test_missingness_exhausted_channel_fails():
    batch = _flat_batch(length=11)
    once = inject_missingness(batch, 0.9, seed=0)
    assert int((~once.masks[0]).sum(axis=1)[0]) == 9
    with pytest.raises(ValueError, match="cannot hide"):
        inject_missingness(once, 0.9, seed=1)


# -------------------------------------------------------------------- splits

def test_split_sizes_and_stratification():
    batch = gen_spirals(100, 10, 0.05, seed=0)
    train, val, test = split(batch, seed=1)
    sizes = (train.series_count, val.series_count, test.series_count)
    assert sizes == (70, 15, 15)
    everything = np.concatenate([train.indices, val.indices, test.indices])
    assert np.array_equal(np.sort(everything), np.arange(100))
    for part in (train, val, test):
        ones = int(part.targets.sum())
        assert abs(2 * ones - part.series_count) <= 1


def test_split_remainder_goes_to_train():
    t = np.linspace(0.0, 1.0, 10)
    n = 101
    batch = TimeSeriesBatch(
        [t] * n, [np.full((1, 10), float(i)) for i in range(n)],
        [np.ones((1, 10), dtype=bool)] * n,
    )
    train, val, test = split(batch, seed=0)
    assert (train.series_count, val.series_count, test.series_count) == (71, 15, 15)


def test_split_deterministic_and_validated():
    batch = gen_spirals(40, 10, 0.05, seed=2)
    a = split(batch, seed=3)
    b = split(batch, seed=3)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.indices, pb.indices)
    with pytest.raises(ValueError, match="summing to 1"):
        split(batch, ratios=(0.8, 0.1, 0.2), seed=0)
    with pytest.raises(ValueError, match=">=10 series"):
        split(gen_spirals(8, 10, 0.0, seed=0), seed=0)
    lopsided = TimeSeriesBatch(
        batch.times, batch.values, batch.masks,
        targets=np.array([1, 1] + [0] * 38),
    )
    with pytest.raises(ValueError, match="stratification needs >=3"):
        split(lopsided, seed=0)


def test_split_normalizes_with_train_statistics():
    batch = inject_missingness(gen_spirals(60, 15, 0.1, seed=4), 0.3, seed=5)
    train, val, test = split(batch, seed=6)
    pooled = [np.concatenate([v[c][m[c]] for v, m in zip(train.values, train.masks)])
              for c in range(2)]
    for c in range(2):
        assert abs(pooled[c].mean()) < 1e-10
        assert abs(pooled[c].std() - 1.0) < 1e-10
    assert np.array_equal(train.norm_mean, val.norm_mean)
    assert np.array_equal(train.norm_std, test.norm_std)
    # val series are the originals under the train transform
    i = int(val.indices[0])
    expect = (batch.values[i] - train.norm_mean[:, None]) / train.norm_std[:, None]
    np.testing.assert_allclose(val.values[0], expect, atol=1e-15)
    # hidden positions ride along
    assert np.array_equal(val.hidden[0], batch.hidden[i])


def test_split_forecast_normalizes_targets():
    batch = gen_damped_oscillator(20, length=12, horizon=3, seed=7)
    train, _, test = split(batch, seed=8)
    i = int(test.indices[1])
    expect = (batch.targets[i] - train.norm_mean[:, None]) / train.norm_std[:, None]
    np.testing.assert_allclose(test.targets[1], expect, atol=1e-15)
    assert np.array_equal(test.target_times, batch.target_times)


# ----------------------------------------------------------------------- csv

def test_csv_minimal_file(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("series_id,time,ch0\n0,0.0,1.5\n0,1.0,2.5\n")
    batch = load_csv(path)
    assert batch.series_count == 1 and batch.times[0].size == 2
    assert batch.masks[0].all()
    np.testing.assert_allclose(batch.values[0], [[1.5, 2.5]], atol=1e-15)
    assert batch.targets is None


def test_csv_empty_cell_is_missing(tmp_path):
    path = tmp_path / "holes.csv"
    path.write_text(
        "series_id,time,ch0,ch1\n"
        "0,0.0,1.0,2.0\n0,0.5,,3.0\n0,1.0,4.0,\n0,1.5,5.0,6.0\n"
    )
    batch = load_csv(path)
    np.testing.assert_array_equal(
        batch.masks[0], [[True, False, True, True], [True, True, False, True]]
    )


def test_csv_sorts_rows(tmp_path):
    path = tmp_path / "shuffled.csv"
    path.write_text(
        "series_id,time,ch0\n0,1.0,3.0\n0,0.0,1.0\n0,0.5,2.0\n"
    )
    batch = load_csv(path)
    np.testing.assert_allclose(batch.times[0], [0.0, 0.5, 1.0], atol=1e-15)
    np.testing.assert_allclose(batch.values[0], [[1.0, 2.0, 3.0]], atol=1e-15)


def test_csv_rejects_bad_rows(tmp_path):
    dup = tmp_path / "dup.csv"
    dup.write_text("series_id,time,ch0\n0,0.0,1.0\n0,1.0,2.0\n0,1.0,3.0\n")
    with pytest.raises(CsvSchemaError, match="row 4: duplicate time"):
        load_csv(dup)
    alpha = tmp_path / "alpha.csv"
    alpha.write_text("series_id,time,ch0\n0,0.0,1.0\n0,1.0,abc\n")
    with pytest.raises(CsvSchemaError, match="row 3: non-numeric ch0"):
        load_csv(alpha)
    header = tmp_path / "header.csv"
    header.write_text("sid,time,ch0\n0,0.0,1.0\n")
    with pytest.raises(CsvSchemaError, match="header"):
        load_csv(header)
    flip = tmp_path / "flip.csv"
    flip.write_text(
        "series_id,time,ch0,label\n0,0.0,1.0,0\n0,1.0,2.0,1\n"
    )
    with pytest.raises(CsvSchemaError, match="row 3: label changed"):
        load_csv(flip)
    frac = tmp_path / "frac.csv"
    frac.write_text("series_id,time,ch0,label\n0,0.0,1.0,0.5\n")
    with pytest.raises(CsvSchemaError, match="row 2: non-integer label"):
        load_csv(frac)


def test_csv_classification_round_trip(tmp_path):
    batch = inject_missingness(gen_spirals(6, 12, 0.2, seed=9), 0.3, seed=10)
    path = tmp_path / "spirals.csv"
    save_csv(batch, path)
    again = load_csv(path)
    assert np.array_equal(again.targets, batch.targets)
    for a, b in zip(again.times, batch.times):
        assert np.array_equal(a, b)
    for va, ma, vb, mb in zip(again.values, again.masks, batch.values, batch.masks):
        assert np.array_equal(ma, mb)
        assert np.array_equal(va[ma], vb[mb])


def test_csv_forecast_round_trip(tmp_path):
    batch = gen_damped_oscillator(4, length=12, horizon=3, seed=12)
    path = tmp_path / "osc.csv"
    save_csv(batch, path)
    again = extract_horizon(load_csv(path), 3)
    assert np.array_equal(again.target_times, batch.target_times)
    for ya, yb in zip(again.targets, batch.targets):
        assert np.array_equal(ya, yb)
    for va, vb in zip(again.values, batch.values):
        assert np.array_equal(va, vb)


def test_extract_horizon_validation():
    batch = _flat_batch(n=2, length=12)
    with pytest.raises(ValueError, match="horizon must be in"):
        extract_horizon(batch, 11)
    ragged = TimeSeriesBatch(
        [np.linspace(0.0, 1.0, 12), np.linspace(0.0, 2.0, 12)],
        [np.zeros((2, 12))] * 2, [np.ones((2, 12), dtype=bool)] * 2,
    )
    with pytest.raises(ValueError, match="target times differ"):
        extract_horizon(ragged, 3)
    holey = inject_missingness(_flat_batch(n=1, length=12), 0.4, seed=0)
    with pytest.raises(ValueError, match="fully observed"):
        extract_horizon(holey, 3)


# ------------------------------------------------------------- model adapter

def test_model_inputs_classify():
    batch = gen_spirals(6, 10, 0.05, seed=13)
    kwargs = as_model_inputs(batch, "classify")
    assert kwargs["values"][0].shape == (10, 2)
    assert np.array_equal(kwargs["labels"], batch.targets)
    pb = prepare_batch(task="classify", **kwargs)
    assert pb.batch == 6 and pb.d_x == 2


def test_model_inputs_forecast():
    batch = gen_damped_oscillator(4, length=12, horizon=3, seed=14)
    kwargs = as_model_inputs(batch, "forecast")
    assert kwargs["query_targets"].shape == (4, 3, 2)
    assert np.array_equal(kwargs["query_targets"][2], batch.targets[2].T)
    pb = prepare_batch(task="forecast", **kwargs)
    assert pb.grid_ext[-1] == pytest.approx(batch.target_times[-1])


def test_model_inputs_interpolate():
    batch = inject_missingness(gen_spirals(4, 15, 0.05, seed=15), 0.4, seed=16)
    kwargs = as_model_inputs(batch, "interpolate")
    mask = kwargs["query_mask"]
    assert int(mask.sum()) == sum(int(h.sum()) for h in batch.hidden)
    i, j, c = np.argwhere(mask)[0]
    col = int(np.searchsorted(batch.times[i], kwargs["query_times"][j]))
    assert batch.hidden[i][c, col]
    assert kwargs["query_targets"][i, j, c] == batch.values[i][c, col]
    pb = prepare_batch(task="interpolate", **kwargs)
    assert pb.query_mask.sum() == mask.sum()
    clean = gen_spirals(4, 15, 0.05, seed=15)
    with pytest.raises(ValueError, match="hidden"):
        as_model_inputs(clean, "interpolate")
