"""End-to-end acceptance gates.

Each test prints one [PASS]/[FAIL] line with the measured quantity, then
asserts.  The first six gates check numerical contracts (gradients,
invertibility, density accounting, trace estimation, solver order, spline
correctness); the rest run the synthetic experiments end to end
(classification under missingness, forecasting, ablation reports,
determinism).  Expected runtime for the whole module is about five
minutes, dominated by the two training gates.
"""

import time

import numpy as np
import pytest

from dualdyn.backbones import BrownianSample, euler_maruyama_solve, euler_solve
from dualdyn.config import config_from_dict
from dualdyn.experiment import run_ablation_suite, run_experiment
from dualdyn.flows import (
    FlowModule,
    NotInvertible,
    exact_logdet,
    flow_forward,
    flow_inverse,
    hutchinson_trace,
)
from dualdyn.model import DualModel, forward, make_noise, prepare_batch, task_loss
from dualdyn.splines import eval_path_derivative, eval_path_many, fit_control_path
from dualdyn.tape import ArrayOps, Graph, TapeOps, backward


def _verdict(label, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}", flush=True)
    assert ok, f"{label}: {detail}"


def test_gradient_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    length = 6
    times = [np.linspace(0.0, 1.0, length)] * 3
    values = [rng.normal(size=(length, 2)) for _ in range(3)]
    pb = prepare_batch(times, values, None, "classify", labels=np.array([0, 1, 0]))

    worst = 0.0
    for backbone in ("ode", "cde", "sde"):
        for flow in ("resnet", "gru", "coupling", "mlp"):
            model = DualModel(d_x=2, d_z=4, task="classify", backbone=backbone,
                              flow_kind=flow, n_l=1, n_h=16,
                              rng=np.random.default_rng(1))
            noise = make_noise(model, pb, 123)

            def loss_value():
                ops = ArrayOps()
                return float(task_loss(ops, forward(model, pb, ops, noise), pb))

            graph = Graph()
            tape = TapeOps(graph)
            loss_id = task_loss(tape, forward(model, pb, tape, noise), pb)
            grads = backward(graph, loss_id)

            names = sorted(model._params)
            for name in names[:: max(1, len(names) // 6)]:
                flat = model._params[name].data.reshape(-1)
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

    elapsed = time.perf_counter() - start
    _verdict("gradient fidelity", worst < 1e-4 and elapsed < 120.0,
             f"max relative error {worst:.2e} over 12 backbone x flow "
             f"combinations (limit 1e-4), {elapsed:.1f}s")


def test_flow_invertibility():
    # 50 parameter draws x 4 time draws x 5 states = 1000 triples per kind
    limits = {"coupling": 1e-8, "resnet": 1e-6, "gru": 1e-6}
    rng = np.random.default_rng(2)
    errs = {}
    for kind, limit in limits.items():
        err = 0.0
        for i in range(50):
            flow = FlowModule(kind, 4, 8, 2, np.random.default_rng(100 + i))
            z0 = rng.uniform(-2.0, 2.0, size=(5, 4))
            assert np.array_equal(flow_forward(flow, 0.0, z0)[0], z0)
            for t in rng.uniform(0.1, 2.0, size=4):
                z = rng.uniform(-2.0, 2.0, size=(5, 4))
                y, _ = flow_forward(flow, float(t), z)
                back = flow_inverse(flow, float(t), y, tol=1e-10, max_iters=500)
                err = max(err, float(np.abs(back - z).max()))
        errs[kind] = err
    ok = all(errs[k] < limits[k] for k in limits)
    _verdict("flow invertibility", ok,
             "1000-draw round-trip errors " +
             ", ".join(f"{k} {errs[k]:.1e} (limit {limits[k]:.0e})" for k in limits) +
             "; identity at t=0 exact")


def test_density_ledger():
    rng = np.random.default_rng(3)
    worst = 0.0
    for dim in (2, 4, 6):
        flow = FlowModule("coupling", dim, 8, 2, np.random.default_rng(30 + dim))
        for _ in range(5):
            t = float(rng.uniform(0.2, 1.5))
            z = rng.uniform(-1.5, 1.5, size=dim)
            _, ledger = flow_forward(flow, t, z)
            worst = max(worst, abs(float(ledger.log_det[0]) - exact_logdet(flow, t, z)))

    # fixed linear layer: constant conditioner output, zero shift, so the
    # map is z -> z * exp(s) and a unit box pushes to a box of volume det J
    flow = FlowModule("coupling", 4, 8, 1, np.random.default_rng(40))
    layer = flow.layers[0]
    for net in (layer.u, layer.v):
        for tensor in net.weights + net.biases:
            tensor.data[...] = 0.0
    c = np.array([0.37, -0.21, 0.52, 0.11])
    layer.u.biases[-1].data[...] = c
    layer.phi_u.w.data[...] = np.array([0.9, 1.1, 0.7, 1.3])
    t = 0.8
    s = (c * np.tanh(layer.phi_u.w.data * t)) * layer.mask_keep
    lo, ledger = flow_forward(flow, t, np.zeros(4))
    hi, _ = flow_forward(flow, t, np.ones(4))
    ledger_ok = float(ledger.log_det[0]) == pytest.approx(s.sum(), abs=1e-15)
    density = 1.0 / np.prod(hi - lo)  # uniform pushforward, unit source box
    closed = density == pytest.approx(np.exp(-s.sum()), rel=1e-12)
    _verdict("density ledger", worst < 1e-6 and ledger_ok and closed,
             f"ledger vs finite-difference log-det max error {worst:.2e} "
             f"(limit 1e-6) at d in (2, 4, 6); linear-layer pushforward "
             f"density {density:.6f} matches 1/det J")


def test_trace_estimator():
    rng = np.random.default_rng(11)
    diag = np.diag(rng.uniform(0.5, 2.0, size=16))
    est, _ = hutchinson_trace(lambda v: diag @ v, 16, 64, rng)
    # Rademacher probes square to one, so every probe returns the trace;
    # only summation order separates est from np.trace
    diag_ok = abs(est - np.trace(diag)) < 1e-12

    hits = 0
    for _ in range(100):
        a = rng.normal(size=(16, 16))
        a = (a + a.T) / 2.0
        est, se = hutchinson_trace(lambda v: a @ v, 16, 100_000, rng)
        hits += abs(est - np.trace(a)) <= 3.0 * se
    _verdict("trace estimator", diag_ok and hits >= 99,
             f"diagonal case exact; {hits}/100 symmetric 16x16 estimates "
             "within 3 standard errors at 1e5 probes (need >= 99)")


def test_solver_order():
    ops = ArrayOps()
    z0 = np.array([[1.0]])
    field = lambda ops, t, z, i: ops.scale(z, -1.0)
    errs = []
    for steps in (10, 20, 40):  # h = 0.1, 0.05, 0.025
        grid = np.linspace(0.0, 1.0, steps + 1)
        traj = euler_solve(field, z0, grid, ops)
        errs.append(abs(float(traj.values[-1][0, 0]) - np.exp(-1.0)))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    order_ok = all(0.8 <= o <= 1.2 for o in orders)

    grid = np.linspace(0.0, 1.0, 21)
    noise = BrownianSample(0, grid, 1, 1)
    zero = lambda ops, t, z, i: ops.const(np.zeros((1, 1)))
    em = euler_maruyama_solve(field, zero, z0, grid, noise, ops)
    plain = euler_solve(field, z0, grid, ops)
    exact = np.array_equal(em.stacked(), plain.stacked())
    _verdict("solver order", order_ok and exact,
             f"empirical orders {orders[0]:.3f}, {orders[1]:.3f} "
             f"(need [0.8, 1.2]); zero-diffusion EM bit-identical to Euler")


def test_spline_correctness():
    rng = np.random.default_rng(5)
    # keep gaps >= 0.04: the centred difference's truncation term grows as
    # the cube shrinks, drowning the comparison on near-duplicate knots
    knots = np.concatenate([[0.0], np.cumsum(rng.uniform(0.04, 0.16, size=19))])
    vals = rng.normal(size=(3, 20))
    path = fit_control_path(knots, vals)

    at_knots = eval_path_many(path, knots)[:, :3].T
    knot_err = float(np.abs(at_knots - vals).max())

    # probe away from gap edges: the curvature jumps at knots would leak an
    # O(h) term into the centred difference
    gaps = rng.integers(0, 19, size=100)
    frac = rng.uniform(0.1, 0.9, size=100)
    ts = knots[gaps] + frac * (knots[gaps + 1] - knots[gaps])
    h = 1e-5
    deriv_err = 0.0
    for t in ts:
        num = (eval_path_many(path, [t + h]) - eval_path_many(path, [t - h])) / (2 * h)
        got = eval_path_derivative(path, t)
        deriv_err = max(deriv_err, float(np.abs(got - num[0]).max()))

    slope = np.array([[0.7], [-1.2], [0.4]])
    linear = fit_control_path(knots, slope * knots + 0.3)
    lin_err = float(np.abs(eval_path_many(linear, ts)[:, :3] -
                           (slope * ts).T - 0.3).max())
    _verdict("spline correctness",
             knot_err < 1e-12 and deriv_err < 1e-5 and lin_err < 1e-12,
             f"knot error {knot_err:.1e} (limit 1e-12), derivative vs "
             f"centred differences {deriv_err:.1e} at 100 points (limit 1e-5), "
             f"linear reproduction {lin_err:.1e} (limit 1e-12)")


def test_spiral_classification_under_missingness():
    start = time.perf_counter()

    def run(mode, seed):
        cfg = config_from_dict({
            "task": "classify", "backbone": "cde", "flow": "coupling",
            "missing_rate": 0.5, "epochs": 100, "seed": seed,
            "dataset": {"kind": "spirals", "n": 400, "length": 50,
                        "noise_std": 0.05},
        })
        return run_experiment(cfg, mode=mode)["test_metrics"]["accuracy"]

    dual = float(np.mean([run("dual", s) for s in range(5)]))
    flow_only = float(np.mean([run("flow-only", s) for s in range(5)]))
    elapsed = time.perf_counter() - start
    _verdict("spiral classification",
             dual >= 0.95 and dual >= flow_only and elapsed < 600.0,
             f"5-seed mean accuracy {dual:.3f} at 50% missingness "
             f"(need >= 0.95), flow-only baseline {flow_only:.3f}, "
             f"{elapsed:.0f}s")


def test_oscillator_forecasting():
    def run(mode, seed):
        cfg = config_from_dict({
            "task": "forecast", "backbone": "cde", "flow": "gru",
            "missing_rate": 0.3, "epochs": 100, "seed": seed,
            "dataset": {"kind": "oscillator", "n": 200, "length": 50,
                        "horizon": 10},
        })
        return run_experiment(cfg, mode=mode)["test_metrics"]["mse"]

    dual = float(np.mean([run("dual", s) for s in range(5)]))
    backbone = float(np.mean([run("backbone-only", s) for s in range(5)]))
    _verdict("oscillator forecasting",
             dual <= 0.05 and dual <= 1.1 * backbone,
             f"5-seed mean MSE {dual:.4f} on unit-normalized channels "
             f"(need <= 0.05), {dual / backbone:.2f}x the backbone-only "
             f"baseline (need <= 1.1x)")


def test_ablation_reports(tmp_path):
    cfg = config_from_dict({
        "task": "classify", "backbone": "cde", "flow": "coupling",
        "missing_rate": 0.3, "epochs": 3, "seed": 7,
        "dataset": {"kind": "spirals", "n": 60, "length": 20,
                    "noise_std": 0.05},
    })
    modes = ("dual", "mlp-decoder", "primary-latent")
    reports = run_ablation_suite(cfg, modes, out_dir=tmp_path)
    partitions = [r["split_indices"] for r in reports]
    shared = all(p == partitions[0] for p in partitions[1:])
    summary = (tmp_path / "summary.json").exists()

    model = DualModel(d_x=2, d_z=8, task="classify", mode="mlp-decoder",
                      rng=np.random.default_rng(8))
    with pytest.raises(NotInvertible):
        flow_inverse(model.flow, 0.5, np.zeros((1, 8)))
    _verdict("ablation reports", shared and summary,
             f"{len(reports)} modes share one data partition, summary "
             "written, mlp decoder refuses inversion")


def test_training_determinism():
    cfg = config_from_dict({
        "task": "classify", "backbone": "sde", "flow": "gru",
        "missing_rate": 0.3, "epochs": 3, "seed": 9,
        "dataset": {"kind": "spirals", "n": 40, "length": 20,
                    "noise_std": 0.05},
    })
    first = run_experiment(cfg)
    second = run_experiment(cfg)
    same = (first["test_metrics"] == second["test_metrics"]
            and first["checkpoint_hash"] == second["checkpoint_hash"]
            and first["train_loss"] == second["train_loss"])
    _verdict("training determinism", same,
             f"repeated run reproduced metrics {first['test_metrics']} and "
             f"checkpoint hash {first['checkpoint_hash'][:12]}... bit-identically")
