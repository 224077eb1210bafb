"""Hermite cubic control paths over irregular, partially observed channels.

A path interpolates each channel through its observed knots only.  Knot
slopes use backward differences, m_i = (x_i - x_{i-1}) / (t_i - t_{i-1}),
with the forward difference at the first knot, so every segment's right
endpoint slope equals that segment's secant and the curve is C1 across
observed knots.  A time channel X_time(t) = t is appended last.  Between a
channel's final observed knot and the series end the value is held constant
(derivative 0); nothing extrapolates beyond the series range.
"""

from __future__ import annotations

import numpy as np


class PathError(ValueError):
    """Bad fit input or evaluation outside the fitted range."""


_EDGE_TOL = 1e-9


class ControlPath:
    """Immutable fitted path; use the eval_* functions to read it."""

    __slots__ = ("knot_times", "channel_knots", "channel_values", "channel_slopes", "channel_count")

    def __init__(self, knot_times, channel_knots, channel_values, channel_slopes):
        self.knot_times = knot_times
        self.channel_knots = channel_knots
        self.channel_values = channel_values
        self.channel_slopes = channel_slopes
        self.channel_count = len(channel_knots) + 1

    @property
    def t_start(self):
        return self.knot_times[0]

    @property
    def t_end(self):
        return self.knot_times[-1]


def fit_control_path(times, values, mask=None):
    """Fit per-channel cubics through observed points.

    times: (L,) strictly increasing; values: (C, L); mask: boolean (C, L),
    default fully observed.  Every channel needs >=2 observed points and an
    observation at the first timestamp.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if times.ndim != 1 or values.shape[1] != times.shape[0]:
        raise PathError(f"times {times.shape} and values {values.shape} disagree")
    if times.shape[0] < 2 or not np.all(np.diff(times) > 0):
        raise PathError("times must be strictly increasing with at least 2 points")
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise PathError(f"mask {mask.shape} does not match values {values.shape}")

    knots, vals, slopes = [], [], []
    for c in range(values.shape[0]):
        kt = times[mask[c]]
        kv = values[c, mask[c]]
        if kt.size < 2:
            raise PathError(f"channel {c} has {kt.size} observed points, need at least 2")
        if kt[0] != times[0]:
            raise PathError(f"channel {c} is not observed at the initial timestamp")
        m = np.empty_like(kv)
        m[1:] = np.diff(kv) / np.diff(kt)
        m[0] = m[1]
        knots.append(kt)
        vals.append(kv)
        slopes.append(m)
    return ControlPath(times.copy(), knots, vals, slopes)


def _check_range(path, ts):
    lo, hi = path.t_start, path.t_end
    if np.any(ts < lo - _EDGE_TOL) or np.any(ts > hi + _EDGE_TOL):
        bad = ts[(ts < lo - _EDGE_TOL) | (ts > hi + _EDGE_TOL)]
        raise PathError(f"t={bad.flat[0]} outside fitted range [{lo}, {hi}]")
    return np.clip(ts, lo, hi)


def _channel_eval(kt, kv, m, ts, derivative):
    idx = np.searchsorted(kt, ts, side="right") - 1
    idx = np.clip(idx, 0, kt.size - 2)
    held = ts > kt[-1]
    t0, t1 = kt[idx], kt[idx + 1]
    dt = t1 - t0
    u = (ts - t0) / dt
    y0, y1 = kv[idx], kv[idx + 1]
    m0, m1 = m[idx], m[idx + 1]
    u2 = u * u
    u3 = u2 * u
    if derivative:
        out = (
            (6 * u2 - 6 * u) * y0
            + (3 * u2 - 4 * u + 1) * dt * m0
            + (-6 * u2 + 6 * u) * y1
            + (3 * u2 - 2 * u) * dt * m1
        ) / dt
        out[held] = 0.0
    else:
        out = (
            (2 * u3 - 3 * u2 + 1) * y0
            + (u3 - 2 * u2 + u) * dt * m0
            + (-2 * u3 + 3 * u2) * y1
            + (u3 - u2) * dt * m1
        )
        out[held] = kv[-1]
    return out


def eval_path_many(path, ts):
    """Path values at each t in ts; returns (len(ts), channel_count)."""
    ts = _check_range(path, np.asarray(ts, dtype=np.float64))
    out = np.empty((ts.shape[0], path.channel_count))
    for c in range(path.channel_count - 1):
        out[:, c] = _channel_eval(
            path.channel_knots[c], path.channel_values[c], path.channel_slopes[c], ts, False
        )
    out[:, -1] = ts
    return out


def eval_path_derivative_many(path, ts):
    """dX/dt at each t in ts (right-segment rule at knots, left at the end)."""
    ts = _check_range(path, np.asarray(ts, dtype=np.float64))
    out = np.empty((ts.shape[0], path.channel_count))
    for c in range(path.channel_count - 1):
        out[:, c] = _channel_eval(
            path.channel_knots[c], path.channel_values[c], path.channel_slopes[c], ts, True
        )
    out[:, -1] = 1.0
    return out


def eval_path(path, t):
    return eval_path_many(path, np.array([float(t)]))[0]


def eval_path_derivative(path, t):
    return eval_path_derivative_many(path, np.array([float(t)]))[0]
