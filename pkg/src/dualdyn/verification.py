"""Release-gate property suites, one verdict per family.

Each family re-derives its expected values independently (finite
differences, closed forms, reference solves) rather than trusting the code
under test.  `corrupt="spectral"` is a negative-control hook: it inflates a
flow weight past its spectral budget after normalization, which must make
the invertibility family fail.
"""

from __future__ import annotations

import numpy as np

from dualdyn.backbones import BrownianSample, euler_maruyama_solve, euler_solve
from dualdyn.config import config_from_dict
from dualdyn.experiment import run_experiment
from dualdyn.flows import (
    ConvergenceError,
    FlowModule,
    exact_logdet,
    flow_forward,
    flow_inverse,
    hutchinson_trace,
)
from dualdyn.model import DualModel, forward, prepare_batch, task_loss
from dualdyn.splines import eval_path_derivative, eval_path_many, fit_control_path
from dualdyn.tape import ArrayOps, Graph, TapeOps, backward

PROPERTY_FAMILIES = (
    "gradients", "invertibility", "density", "trace",
    "solver-order", "splines", "determinism",
)


def _toy_pb(rng, n=3, length=5):
    times = [np.linspace(0.0, 1.0, length)] * n
    values = [rng.normal(size=(length, 2)) for _ in range(n)]
    return prepare_batch(times, values, None, "classify",
                         labels=np.arange(n) % 2)


def _check_gradients():
    rng = np.random.default_rng(0)
    pb = _toy_pb(rng)
    worst = 0.0
    for backbone, flow in (("cde", "coupling"), ("ode", "resnet")):
        model = DualModel(d_x=2, d_z=3, task="classify", backbone=backbone,
                          flow_kind=flow, n_l=1, n_h=4,
                          rng=np.random.default_rng(1))

        def loss_value():
            ops = ArrayOps()
            return float(task_loss(ops, forward(model, pb, ops), pb))

        graph = Graph()
        tape = TapeOps(graph)
        loss_id = task_loss(tape, forward(model, pb, tape), pb)
        grads = backward(graph, loss_id)

        names = sorted(model._params)
        for name in names[:: max(1, len(names) // 5)]:
            tensor = model._params[name]
            flat = tensor.data.reshape(-1)
            idx = rng.integers(flat.size)
            eps = 1e-6
            keep = flat[idx]
            flat[idx] = keep + eps
            up = loss_value()
            flat[idx] = keep - eps
            down = loss_value()
            flat[idx] = keep
            fd = (up - down) / (2 * eps)
            got = grads[name].data.reshape(-1)[idx]
            worst = max(worst, abs(got - fd) / max(1.0, abs(fd)))
    return worst < 1e-4, f"max relative gradient error {worst:.2e} (limit 1e-4)"


def _check_invertibility(corrupt=None):
    rng = np.random.default_rng(2)
    limits = {"resnet": 1e-6, "gru": 1e-6, "coupling": 1e-8}
    worst = []
    for kind, limit in limits.items():
        flow = FlowModule(kind, 4, 8, 2, np.random.default_rng(3))
        if corrupt == "spectral" and kind == "resnet":
            # blow the Lipschitz budget of the first residual weight matrix
            tensor = next(t for _, t in flow.params() if t.data.ndim == 2)
            tensor.data *= 50.0
        err = 0.0
        try:
            for _ in range(50):
                z = rng.uniform(-2.0, 2.0, size=(1, 4))
                y, _ = flow_forward(flow, 1.5, z)
                back = flow_inverse(flow, 1.5, y, max_iters=500)
                err = max(err, float(np.abs(back - z).max()))
        except ConvergenceError as exc:
            return False, f"{kind}: {exc}"
        if err >= limit:
            return False, f"{kind} round-trip error {err:.2e} (limit {limit:.0e})"
        worst.append(f"{kind} {err:.1e}")
    return True, "round-trip errors " + ", ".join(worst)


def _check_density():
    rng = np.random.default_rng(4)
    worst = 0.0
    for dim in (2, 4, 6):
        flow = FlowModule("coupling", dim, 8, 2, np.random.default_rng(5))
        z = rng.normal(size=(4, dim))
        _, ledger = flow_forward(flow, 0.7, z)
        ledger_ld = ledger.log_det
        for b in range(z.shape[0]):
            exact = exact_logdet(flow, 0.7, z[b])
            worst = max(worst, abs(float(ledger_ld[b]) - exact))
    return worst < 1e-6, f"max |ledger - jacobian log-det| {worst:.2e} (limit 1e-6)"


def _check_trace():
    rng = np.random.default_rng(6)
    diag = np.array([3.0, -1.0, 4.0, 0.5, -2.0, 1.0, 2.0, -0.5])
    est, se = hutchinson_trace(lambda v: diag[:, None] * v if v.ndim == 2 else diag * v,
                               8, 64, np.random.default_rng(7))
    if abs(est - diag.sum()) > 1e-12 or se > 1e-12:
        return False, f"diagonal case estimate {est} +- {se}, want {diag.sum()} exactly"
    a = rng.normal(size=(8, 8))
    sym = (a + a.T) / 2.0
    est, se = hutchinson_trace(lambda v: sym @ v, 8, 20000, np.random.default_rng(8))
    gap = abs(est - np.trace(sym))
    if gap > 4.0 * se:
        return False, f"symmetric case off by {gap:.3e} with se {se:.3e}"
    return True, f"diagonal exact; symmetric within {gap / max(se, 1e-300):.2f} se"


def _check_solver_order():
    ops = ArrayOps()
    z0 = np.array([[1.0]])
    field = lambda ops_, t, z, step: ops_.scale(z, -1.0)
    errs = []
    for n_steps in (8, 16):
        grid = np.linspace(0.0, 1.0, n_steps + 1)
        traj = euler_solve(field, z0, grid, ops)
        errs.append(abs(float(traj.values[-1][0, 0]) - np.exp(-1.0)))
    slope = np.log2(errs[0] / errs[1])
    if not 0.8 <= slope <= 1.2:
        return False, f"euler convergence order {slope:.3f} outside [0.8, 1.2]"
    # zero diffusion must reproduce the drift-only states bit for bit
    grid = np.linspace(0.0, 1.0, 9)
    zero = lambda ops_, t, z, step: ops_.scale(z, 0.0)
    noise = BrownianSample(9, grid, 1, 1)
    drift_only = euler_solve(field, z0, grid, ops)
    with_zero = euler_maruyama_solve(field, zero, z0, grid, noise, ops)
    for a, b in zip(drift_only.values, with_zero.values):
        if not np.array_equal(a, b):
            return False, "zero-diffusion path deviates from the drift-only solve"
    return True, f"euler order {slope:.3f}; zero-diffusion path bit-identical"


def _check_splines():
    # eval returns (len(ts), channels + 1): data channels then the running
    # time channel
    rng = np.random.default_rng(10)
    t = np.sort(rng.uniform(0.0, 2.0, 9))
    t[0], t[-1] = 0.0, 2.0
    vals = rng.normal(size=(2, 9))
    path = fit_control_path(t, vals)
    at_knots = eval_path_many(path, t)
    knot_err = float(np.abs(at_knots[:, :2].T - vals).max())
    if knot_err > 1e-12:
        return False, f"knot interpolation error {knot_err:.2e} (limit 1e-12)"
    fd_err = 0.0
    for tq in rng.uniform(0.05, 1.95, 100):
        h = 1e-6
        fd = (eval_path_many(path, np.array([tq + h]))[0]
              - eval_path_many(path, np.array([tq - h]))[0]) / (2 * h)
        fd_err = max(fd_err, float(np.abs(eval_path_derivative(path, tq) - fd).max()))
    if fd_err > 1e-5:
        return False, f"derivative vs central differences {fd_err:.2e} (limit 1e-5)"
    line = np.stack([2.0 * t - 1.0, -0.5 * t + 3.0])
    linear = fit_control_path(t, line)
    grid = np.linspace(0.0, 2.0, 37)
    want = np.stack([2.0 * grid - 1.0, -0.5 * grid + 3.0])
    line_err = float(np.abs(eval_path_many(linear, grid)[:, :2].T - want).max())
    if line_err > 1e-12:
        return False, f"linear reproduction error {line_err:.2e} (limit 1e-12)"
    return True, (f"knots {knot_err:.1e}, derivative {fd_err:.1e}, "
                  f"linear {line_err:.1e}")


def _check_determinism():
    cfg = config_from_dict({
        "task": "classify", "epochs": 1, "batch_size": 8, "d_z": 4,
        "n_h": 16, "n_l": 1, "seed": 12,
        "dataset": {"kind": "spirals", "n": 20, "length": 10, "noise_std": 0.1},
    })
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    if a["checkpoint_hash"] != b["checkpoint_hash"]:
        return False, "re-training the same config changed the checkpoint hash"
    if a["val_loss"] != b["val_loss"]:
        return False, "re-training the same config changed the loss series"
    return True, f"checkpoint hash stable ({a['checkpoint_hash'][:12]}...)"


def run_verification_suite(corrupt=None):
    """Run every property family and return [{name, passed, detail}, ...]."""
    checks = {
        "gradients": _check_gradients,
        "invertibility": lambda: _check_invertibility(corrupt),
        "density": _check_density,
        "trace": _check_trace,
        "solver-order": _check_solver_order,
        "splines": _check_splines,
        "determinism": _check_determinism,
    }
    report = []
    for name in PROPERTY_FAMILIES:
        try:
            passed, detail = checks[name]()
        except Exception as exc:  # a crashed family is a failed family
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        report.append({"name": name, "passed": bool(passed), "detail": detail})
    return report
