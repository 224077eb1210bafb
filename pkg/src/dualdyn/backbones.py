"""Implicit backbones: vector fields and fixed-step Euler(-Maruyama) solves.

States are batched row-wise, shape (B, d_z); a field is called as
``field(ops, t, z)`` and everything it records lands on the caller's ops
context, so the same solver code runs traced (training) or plain numpy
(inference).
"""

from __future__ import annotations

import numpy as np

from dualdyn.nets import Mlp
from dualdyn.splines import eval_path_derivative_many

BACKBONE_KINDS = ("ode", "cde", "sde")


class SolverError(RuntimeError):
    """Non-finite state or mismatched solver inputs."""


class VectorField:
    """MLP over concat(t, z) with n_hidden=depth tanh layers of width ``width``.

    Output dim is d_z for ode/sde drift and diffusion, d_z*channels for the
    cde matrix field (channel-major column blocks).  The final affine starts
    at zero so initial dynamics are the identity map.
    """

    def __init__(self, name, latent_dim, width, depth, rng, channels=None):
        self.latent_dim = latent_dim
        self.channels = channels
        out_dim = latent_dim if channels is None else latent_dim * channels
        self.net = Mlp(name, 1 + latent_dim, width, depth, out_dim, rng, zero_out=True)

    def __call__(self, ops, t, z, step=None):
        batch = ops.value(z).shape[0]
        tcol = ops.const(np.full((batch, 1), float(t)))
        return self.net.apply(ops, ops.concat([tcol, z], axis=1))

    def params(self):
        return self.net.params()


class BrownianSample:
    """Seeded Gaussian increments, one (B, d_z) draw per grid step."""

    def __init__(self, seed, grid, batch, dim):
        grid = np.asarray(grid, dtype=np.float64)
        dts = np.diff(grid)
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.grid = grid
        self.increments = rng.normal(size=(dts.size, batch, dim)) * np.sqrt(dts)[:, None, None]


class LatentTrajectory:
    """z on the solver grid: per-step handles plus their concrete values."""

    def __init__(self, grid, states, values):
        self.grid = grid
        self.states = states
        self.values = values

    @property
    def final(self):
        return self.states[-1]

    def stacked(self):
        return np.stack(self.values)


def build_grid(knots, min_substeps=2):
    """Refine each knot gap into at least ``min_substeps`` Euler steps."""
    knots = np.asarray(knots, dtype=np.float64)
    if knots.size < 2 or not np.all(np.diff(knots) > 0):
        raise SolverError("grid knots must be strictly increasing, length >= 2")
    if min_substeps < 1:
        raise SolverError("min_substeps must be >= 1")
    parts = [knots[:1]]
    for a, b in zip(knots[:-1], knots[1:]):
        parts.append(np.linspace(a, b, min_substeps + 1)[1:])
    return np.concatenate(parts)


def _step_check(value, i, t):
    if not np.all(np.isfinite(value)):
        raise SolverError(f"non-finite state at solver step {i} (t={t:.6g})")


def euler_solve(field, z0, grid, ops):
    """z_{i+1} = z_i + dt_i * field(t_i, z_i) over the supplied grid.

    The field is called as field(ops, t, z, step) so step-indexed data such
    as precomputed path derivatives can be looked up without re-evaluation.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise SolverError("solver grid needs at least 2 points")
    z = z0
    states = [z]
    values = [np.asarray(ops.value(z))]
    for i in range(grid.size - 1):
        dt = grid[i + 1] - grid[i]
        f = field(ops, grid[i], z, i)
        z = ops.add(z, ops.scale(f, dt))
        v = np.asarray(ops.value(z))
        _step_check(v, i + 1, grid[i + 1])
        states.append(z)
        values.append(v)
    return LatentTrajectory(grid, states, values)


def euler_maruyama_solve(drift, diffusion, z0, grid, noise, ops):
    """Adds diffusion(t_i, z_i) * dW_i on top of the Euler drift step.

    Increments come from a pre-drawn BrownianSample, so gradients are
    pathwise with the noise held fixed.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise SolverError("solver grid needs at least 2 points")
    if noise.increments.shape[0] != grid.size - 1:
        raise SolverError(
            f"noise has {noise.increments.shape[0]} increments for {grid.size - 1} steps"
        )
    z = z0
    states = [z]
    values = [np.asarray(ops.value(z))]
    for i in range(grid.size - 1):
        dt = grid[i + 1] - grid[i]
        f = drift(ops, grid[i], z, i)
        g = diffusion(ops, grid[i], z, i)
        kick = ops.mul(g, ops.const(noise.increments[i]))
        z = ops.add(ops.add(z, ops.scale(f, dt)), kick)
        v = np.asarray(ops.value(z))
        _step_check(v, i + 1, grid[i + 1])
        states.append(z)
        values.append(v)
    return LatentTrajectory(grid, states, values)


def cde_effective_field(field, path, t, z, ops, dxdt=None):
    """f*(t) = f(t, z) @ dX/dt with the matrix read in channel-major blocks.

    ``dxdt`` overrides the path derivative with a per-sample (B, channels)
    matrix; otherwise the single fitted path drives every row.
    """
    d = field.latent_dim
    channels = field.channels
    if channels is None:
        raise SolverError("cde_effective_field needs a matrix-valued field (channels set)")
    if dxdt is None:
        if path is None:
            raise SolverError("cde backbone needs a fitted control path")
        if path.channel_count != channels:
            raise SolverError(
                f"field expects {channels} channels, path provides {path.channel_count}"
            )
        dxdt = np.broadcast_to(
            eval_path_derivative_many(path, np.array([float(t)]))[0],
            (ops.value(z).shape[0], channels),
        )
    elif dxdt.shape[1] != channels:
        raise SolverError(f"field expects {channels} channels, dxdt has {dxdt.shape[1]}")
    flat = field(ops, t, z)
    acc = None
    for c in range(channels):
        block = ops.slice_cols(flat, c * d, (c + 1) * d)
        term = ops.mul(block, ops.const(np.ascontiguousarray(dxdt[:, c : c + 1])))
        acc = term if acc is None else ops.add(acc, term)
    return acc


def run_backbone(kind, field, z0, grid, ops, *, path=None, dxdt_grid=None,
                 diffusion=None, noise=None):
    """Dispatch one latent solve.

    cde needs ``path`` (or per-step ``dxdt_grid``, a (steps, B, channels)
    array); sde needs ``diffusion`` and ``noise``.
    """
    if kind == "ode":
        return euler_solve(field, z0, grid, ops)
    if kind == "cde":
        if dxdt_grid is None and path is None:
            raise SolverError("cde backbone needs a fitted control path")

        def eff(o, t, z, step):
            dxdt = None if dxdt_grid is None else dxdt_grid[step]
            return cde_effective_field(field, path, t, z, o, dxdt=dxdt)

        return euler_solve(eff, z0, grid, ops)
    if kind == "sde":
        if diffusion is None or noise is None:
            raise SolverError("sde backbone needs diffusion field and noise sample")
        return euler_maruyama_solve(field, diffusion, z0, grid, noise, ops)
    raise SolverError(f"unknown backbone kind {kind!r}")
