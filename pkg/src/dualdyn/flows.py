"""Explicit decoders: invertible flows evaluated at arbitrary times.

Three invertible kinds plus a deliberately non-invertible ablation:

* resnet   - z + phi(t) * g(t, z), g spectrally normalized so the residual
             is a contraction and the fixed-point inverse converges;
* gru      - z + phi(t) * (1 - g1) * (g2 - z) with gates g1 = a*sigmoid(f1),
             g3 = b*sigmoid(f3), g2 = tanh(f2(t, g3*z)); a = 2/5, b = 4/5
             keep the update contractive;
* coupling - scale-and-shift of one index partition conditioned on the
             other, with analytic inverse and log-determinant;
* mlp      - a plain network in (t, z) with no structure (ablation only).

All kinds share phi(t) = tanh(w * t) time embeddings, so every invertible
kind is exactly the identity at t = 0.
"""

from __future__ import annotations

import numpy as np

from dualdyn.nets import Mlp
from dualdyn.tape import ArrayOps, Tensor

FLOW_KINDS = ("resnet", "gru", "coupling", "mlp-ablation")

ALPHA = 2.0 / 5.0
BETA = 4.0 / 5.0
LIPSCHITZ_BUDGET = 0.97
# The gated update z + phi*(1-g1)*(g2-z) has leading contraction factor
# phi*(1-g1), close to 1 when f1 is very negative, so its sub-networks get a
# much tighter spectral budget than the resnet residual to keep the
# fixed-point inverse converging briskly.
GRU_NET_BUDGET = 0.5


class FlowError(RuntimeError):
    """Non-finite flow output."""


class NotInvertible(RuntimeError):
    """Inverse requested from a flow kind without one."""


class ConvergenceError(RuntimeError):
    """Fixed-point inverse failed to reach tolerance."""


class TimeEmbedding:
    """phi(t) = tanh(w*t) elementwise; w positive at init so phi(0) = 0."""

    def __init__(self, name, dim, rng):
        self.name = name
        self.w = Tensor(rng.uniform(0.5, 1.5, size=dim), requires_grad=True)

    def apply(self, ops, t):
        return ops.tanh(ops.scale(ops.param(self.name + ".w", self.w), float(t)))

    def params(self):
        yield self.name + ".w", self.w


def spectral_normalize(w, n_power_iters=5, target=1.0, rng=None, state=None):
    """Rescale w so its power-iteration largest singular value is <= target.

    ``state`` (a dict) keeps the u/v iteration vectors warm across calls;
    pass the same dict per weight matrix.  A zero matrix is returned as is.
    """
    if n_power_iters < 1:
        raise ValueError("n_power_iters must be >= 1")
    if not 0.0 < target <= 1.0:
        raise ValueError("target must be in (0, 1]")
    w = np.asarray(w, dtype=np.float64)
    if not w.any():
        return w
    if state is None:
        state = {}
    u = state.get("u")
    if u is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.normal(size=w.shape[0])
        u /= np.linalg.norm(u)
    v = None
    for _ in range(n_power_iters):
        v = w.T @ u
        v /= max(np.linalg.norm(v), 1e-300)
        u = w @ v
        u /= max(np.linalg.norm(u), 1e-300)
    state["u"], state["v"] = u, v
    sigma = float(u @ w @ v)
    if sigma <= target:
        return w
    return w * (target / sigma)


def hutchinson_trace(mvp, dim, n_probes, rng):
    """Rademacher estimate of Tr(A) given only the matvec v -> A v.

    Returns (estimate, standard error).  If mvp maps a (dim, k) block
    column-wise (any linear matvec under @ does), probes run in one block;
    otherwise they fall back to a per-vector loop.
    """
    if n_probes < 2:
        raise ValueError("need at least 2 probes for a standard error")
    probes = rng.integers(0, 2, size=(dim, n_probes)).astype(np.float64) * 2.0 - 1.0
    try:
        av = np.asarray(mvp(probes))
        block_ok = av.shape == probes.shape
        if block_ok:
            # guard against closures that broadcast rows instead of columns
            single = np.asarray(mvp(probes[:, 0]))
            block_ok = single.shape == (dim,) and np.allclose(av[:, 0], single, atol=1e-12)
    except Exception:
        block_ok = False
    if block_ok:
        quad = np.einsum("ij,ij->j", probes, av)
    else:
        quad = np.array([probes[:, j] @ np.asarray(mvp(probes[:, j])) for j in range(n_probes)])
    est = float(quad.mean())
    se = float(quad.std(ddof=1) / np.sqrt(n_probes))
    return est, se


class DensityLedger:
    """Per-layer log|det J| contributions (coupling only) and their sum."""

    def __init__(self, batch, per_layer=None):
        self.batch = batch
        self.per_layer = list(per_layer) if per_layer else []

    @property
    def log_det(self):
        if not self.per_layer:
            return np.zeros(self.batch)
        return np.sum(self.per_layer, axis=0)


class _ResnetLayer:
    def __init__(self, name, dim, width, rng):
        self.g = Mlp(name + ".g", 1 + dim, width, 1, dim, rng)
        self.phi = TimeEmbedding(name + ".phi", dim, rng)
        self._sn_state = [{} for _ in self.g.weights]

    def forward(self, ops, t, z):
        batch = ops.value(z).shape[0]
        tcol = ops.const(np.full((batch, 1), float(t)))
        g_out = self.g.apply(ops, ops.concat([tcol, z], axis=1))
        return ops.add(z, ops.mul(self.phi.apply(ops, t), g_out)), None

    def normalize(self, n_power_iters, rng):
        target = LIPSCHITZ_BUDGET ** (1.0 / self.g.n_layers)
        for w, state in zip(self.g.weights, self._sn_state):
            w.data[:] = spectral_normalize(w.data, n_power_iters, target, rng, state)

    def params(self):
        yield from self.g.params()
        yield from self.phi.params()


class _GruLayer:
    def __init__(self, name, dim, width, rng):
        self.f1 = Mlp(name + ".f1", 1 + dim, width, 1, dim, rng)
        self.f2 = Mlp(name + ".f2", 1 + dim, width, 1, dim, rng)
        self.f3 = Mlp(name + ".f3", 1 + dim, width, 1, dim, rng)
        self.phi = TimeEmbedding(name + ".phi", dim, rng)
        self._sn_state = [[{} for _ in net.weights] for net in (self.f1, self.f2, self.f3)]

    def forward(self, ops, t, z):
        batch = ops.value(z).shape[0]
        tcol = ops.const(np.full((batch, 1), float(t)))
        tz = ops.concat([tcol, z], axis=1)
        g1 = ops.scale(ops.sigmoid(self.f1.apply(ops, tz)), ALPHA)
        g3 = ops.scale(ops.sigmoid(self.f3.apply(ops, tz)), BETA)
        gated = ops.concat([tcol, ops.mul(g3, z)], axis=1)
        g2 = ops.tanh(self.f2.apply(ops, gated))
        one_minus = ops.sub(ops.const(1.0), g1)
        delta = ops.mul(one_minus, ops.sub(g2, z))
        return ops.add(z, ops.mul(self.phi.apply(ops, t), delta)), None

    def normalize(self, n_power_iters, rng):
        for net, states in zip((self.f1, self.f2, self.f3), self._sn_state):
            target = GRU_NET_BUDGET ** (1.0 / net.n_layers)
            for w, state in zip(net.weights, states):
                w.data[:] = spectral_normalize(w.data, n_power_iters, target, rng, state)

    def params(self):
        for net in (self.f1, self.f2, self.f3):
            yield from net.params()
        yield from self.phi.params()


class _CouplingLayer:
    """Transforms the kept partition, conditioned on the masked complement.

    The conditioner sees z with the kept partition zeroed, so the Jacobian
    stays triangular and log|det| is the sum of the kept scale exponents.
    """

    def __init__(self, name, dim, width, rng, keep_even):
        self.u = Mlp(name + ".u", 1 + dim, width, 1, dim, rng)
        self.v = Mlp(name + ".v", 1 + dim, width, 1, dim, rng)
        self.phi_u = TimeEmbedding(name + ".phi_u", dim, rng)
        self.phi_v = TimeEmbedding(name + ".phi_v", dim, rng)
        idx = np.arange(dim)
        self.mask_keep = ((idx % 2 == 0) if keep_even else (idx % 2 == 1)).astype(np.float64)
        self.mask_cond = 1.0 - self.mask_keep

    def _scale_shift(self, ops, t, z):
        batch = ops.value(z).shape[0]
        tcol = ops.const(np.full((batch, 1), float(t)))
        cond = ops.mul(z, ops.const(self.mask_cond))
        tz = ops.concat([tcol, cond], axis=1)
        keep = ops.const(self.mask_keep)
        s = ops.mul(ops.mul(self.u.apply(ops, tz), self.phi_u.apply(ops, t)), keep)
        shift = ops.mul(ops.mul(self.v.apply(ops, tz), self.phi_v.apply(ops, t)), keep)
        return s, shift

    def forward(self, ops, t, z):
        s, shift = self._scale_shift(ops, t, z)
        zh = ops.add(ops.mul(z, ops.exp(s)), shift)
        log_det = np.asarray(ops.value(s)).sum(axis=1)
        return zh, log_det

    def inverse(self, t, y):
        ops = ArrayOps()
        s, shift = self._scale_shift(ops, t, y)  # conditioner input unchanged by the map
        return (y - shift) * np.exp(-s)

    def params(self):
        yield from self.u.params()
        yield from self.v.params()
        yield from self.phi_u.params()
        yield from self.phi_v.params()


class FlowModule:
    """Stack of ``depth`` flow layers of one kind (or one plain mlp)."""

    def __init__(self, kind, dim, width, depth, rng, name="flow", n_power_iters=20):
        if kind not in FLOW_KINDS:
            raise ValueError(f"unknown flow kind {kind!r}, expected one of {FLOW_KINDS}")
        self.kind = kind
        self.dim = dim
        self.depth = depth
        self.name = name
        self._rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        if kind == "mlp-ablation":
            self.net = Mlp(name + ".net", 1 + dim, width, depth, dim, rng)
            self.layers = []
        else:
            self.layers = []
            for i in range(depth):
                lname = f"{name}.L{i}"
                if kind == "resnet":
                    self.layers.append(_ResnetLayer(lname, dim, width, rng))
                elif kind == "gru":
                    self.layers.append(_GruLayer(lname, dim, width, rng))
                else:
                    self.layers.append(_CouplingLayer(lname, dim, width, rng, keep_even=i % 2 == 0))
            self.renormalize(n_power_iters)

    def renormalize(self, n_power_iters=3):
        """Project constrained weights back inside the Lipschitz budget."""
        if self.kind in ("resnet", "gru"):
            for layer in self.layers:
                layer.normalize(n_power_iters, self._rng)

    def params(self):
        if self.kind == "mlp-ablation":
            yield from self.net.params()
        else:
            for layer in self.layers:
                yield from layer.params()


def flow_forward(flow, t, z, ops=None):
    """Evaluate the flow at time t; returns (z_hat, DensityLedger).

    With ops=None, z is a plain array ((dim,) or (batch, dim)); pass a
    TapeOps context and a node handle to record for training.
    """
    squeeze = False
    if ops is None:
        ops = ArrayOps()
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 1
        if squeeze:
            z = z[None, :]
    batch = ops.value(z).shape[0]
    ledger = DensityLedger(batch)
    if flow.kind == "mlp-ablation":
        tcol = ops.const(np.full((batch, 1), float(t)))
        zh = flow.net.apply(ops, ops.concat([tcol, z], axis=1))
        if not np.all(np.isfinite(ops.value(zh))):
            raise FlowError("non-finite output in mlp decoder net")
    else:
        zh = z
        for i, layer in enumerate(flow.layers):
            zh, log_det = layer.forward(ops, t, zh)
            if not np.all(np.isfinite(ops.value(zh))):
                raise FlowError(f"non-finite output at flow layer {i}")
            if log_det is not None:
                ledger.per_layer.append(log_det)
    if squeeze:
        return ops.value(zh)[0], ledger
    return zh, ledger


def flow_inverse(flow, t, y, tol=1e-10, max_iters=200):
    """Invert the flow at time t (numpy only).

    Coupling inverts analytically layer by layer; resnet and gru run the
    contraction fixed point x <- y - (G(t,x) - x) per layer, then verify
    |G(t,x) - y| < 10*tol.
    """
    if flow.kind == "mlp-ablation":
        raise NotInvertible("the mlp ablation decoder has no inverse")
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    x = np.atleast_2d(y).copy()
    ops = ArrayOps()
    for layer in reversed(flow.layers):
        if flow.kind == "coupling":
            x = layer.inverse(t, x)
            continue
        target = x
        cur = target.copy()
        for _ in range(max_iters):
            # x_next - x = y - G(x), so the step size is also the residual
            nxt = target - (layer.forward(ops, t, cur)[0] - cur)
            delta = np.abs(nxt - cur).max()
            cur = nxt
            if delta < tol:
                break
        residual = np.abs(layer.forward(ops, t, cur)[0] - target).max()
        if residual >= 10.0 * tol:
            raise ConvergenceError(
                f"inverse residual {residual:.3e} exceeds {10 * tol:.1e} "
                f"after {max_iters} iterations"
            )
        x = cur
    return x[0] if squeeze else x


def exact_logdet(flow, t, z, eps=1e-6):
    """log|det J| of z -> flow(t, z) via a column-by-column FD Jacobian."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size > 8:
        raise ValueError("exact_logdet expects a single state with dim <= 8")
    d = z.size
    jac = np.empty((d, d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = eps
        hi, _ = flow_forward(flow, t, z + step)
        lo, _ = flow_forward(flow, t, z - step)
        jac[:, j] = (hi - lo) / (2.0 * eps)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0 or logabs < np.log(1e-300):
        raise FlowError("flow Jacobian is numerically singular")
    return float(logabs)
