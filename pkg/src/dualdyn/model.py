"""The dual composition: implicit latent solve feeding an explicit flow decoder.

Wiring (mode "dual"): z(0) = enc(x0) via a single affine map, z(t) from the
backbone solver, zhat(0) = agg(concat(mean_t z, z(T))), zhat(tau) from the
flow at each query time, and an affine head (classify, on zhat(T)) or affine
readout (interpolate/forecast, per query).  Ablation modes rewire:

* backbone-only   - head/readout on z directly, no flow or aggregator;
* flow-only       - flow on enc(x0) directly, no solver;
* mlp-decoder     - dual wiring with the non-invertible mlp flow kind;
* primary-latent  - dual parameters, but the head reads z(T) (used to
                    re-evaluate a trained dual checkpoint).

The same forward runs on a TapeOps graph (training) or ArrayOps (metrics).
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
from scipy.stats import rankdata

from dualdyn.backbones import (
    BACKBONE_KINDS,
    BrownianSample,
    SolverError,
    VectorField,
    build_grid,
    run_backbone,
)
from dualdyn.flows import FLOW_KINDS, FlowError, FlowModule, flow_forward
from dualdyn.nets import affine_params, apply_affine
from dualdyn.splines import eval_path_derivative_many, fit_control_path
from dualdyn.tape import ArrayOps, Graph, TapeOps, average, backward

MODES = ("dual", "backbone-only", "flow-only", "mlp-decoder", "primary-latent")
TASKS = ("classify", "interpolate", "forecast")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; the step was aborted before any update."""


class CheckpointError(ValueError):
    """Checkpoint file disagrees with the model or fails integrity checks."""


class PreparedBatch:
    """Solver-ready view of a batch: common grid, spline slopes, queries."""

    __slots__ = (
        "task", "batch", "d_x", "x0", "obs_times", "t_final", "grid", "grid_ext",
        "dxdt", "dxdt_ext", "t_final_index_ext", "query_times", "query_targets",
        "query_mask", "query_idx_ext", "labels", "paths",
    )


def prepare_batch(times, values, masks, task, *, labels=None, query_times=None,
                  query_targets=None, query_mask=None, solver_substeps=2):
    """Fit control paths and lay out one solver grid shared by the batch.

    times/values/masks are per-series lists ((L_i,), (L_i, d_x), bool same
    shape; mask None means fully observed).  classify needs labels;
    interpolate needs query_times/targets/mask (queries at observation
    times); forecast needs query_times/targets and extends the grid past
    the last observation so backbone-only baselines can integrate there.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    if not times:
        raise ValueError("empty batch")
    times = [np.asarray(t, dtype=np.float64) for t in times]
    values = [np.asarray(v, dtype=np.float64) for v in values]
    if masks is None:
        masks = [None] * len(times)
    masks = [
        np.ones(v.shape, dtype=bool) if m is None else np.asarray(m, dtype=bool)
        for v, m in zip(values, masks)
    ]
    d_x = values[0].shape[1]
    t0 = times[0][0]
    for t in times:
        if t[0] != t0:
            raise ValueError("batched solving needs a common initial time")

    pb = PreparedBatch()
    pb.task = task
    pb.batch = len(times)
    pb.d_x = d_x
    union = np.unique(np.concatenate(times))
    pb.obs_times = union
    pb.t_final = float(union[-1])
    # control paths store channels row-major
    pb.paths = [fit_control_path(t, v.T, m.T) for t, v, m in zip(times, values, masks)]
    pb.grid = build_grid(union, solver_substeps)

    knots_ext = union
    if task == "classify":
        if labels is None:
            raise ValueError("classification needs labels")
        pb.labels = np.asarray(labels, dtype=np.int64)
        if pb.labels.shape != (pb.batch,):
            raise ValueError("labels must be one class id per series")
        pb.query_times = np.zeros(0)
        pb.query_targets = None
        pb.query_mask = None
    else:
        if query_times is None or query_targets is None:
            raise ValueError(f"{task} needs query_times and query_targets")
        pb.labels = None
        pb.query_times = np.asarray(query_times, dtype=np.float64)
        pb.query_targets = np.asarray(query_targets, dtype=np.float64)
        want = (pb.batch, pb.query_times.size, d_x)
        if pb.query_targets.shape != want:
            raise ValueError(
                f"query_targets shape {pb.query_targets.shape} != {want}"
            )
        if task == "interpolate":
            if query_mask is None:
                raise ValueError("interpolation needs a query mask")
            if not np.all(np.isin(pb.query_times, union)):
                raise ValueError("interpolation queries must be observation times")
        if query_mask is None:
            query_mask = np.ones(want, dtype=bool)
        pb.query_mask = np.asarray(query_mask, dtype=bool)
        if pb.query_mask.shape != want:
            raise ValueError(f"query_mask shape {pb.query_mask.shape} != {want}")
        if task == "forecast":
            knots_ext = np.unique(np.concatenate([union, pb.query_times]))

    pb.grid_ext = pb.grid if knots_ext is union else build_grid(knots_ext, solver_substeps)
    pb.dxdt = np.stack([eval_path_derivative_many(p, pb.grid) for p in pb.paths], axis=1)
    if pb.grid_ext is pb.grid:
        pb.dxdt_ext = pb.dxdt
    else:
        # the path offers no extrapolation; past the last observation the
        # baseline integrates with data channels held (derivative 0) while
        # the time channel keeps running
        inside = pb.grid_ext <= pb.t_final
        within = np.stack(
            [eval_path_derivative_many(p, pb.grid_ext[inside]) for p in pb.paths], axis=1
        )
        tail = np.zeros((int((~inside).sum()), pb.batch, within.shape[2]))
        tail[:, :, -1] = 1.0
        pb.dxdt_ext = np.concatenate([within, tail], axis=0)
    pb.x0 = np.stack([v[0] for v in values])
    pb.t_final_index_ext = int(np.searchsorted(pb.grid_ext, pb.t_final))
    pb.query_idx_ext = np.searchsorted(pb.grid_ext, pb.query_times).astype(np.int64)
    if pb.query_times.size and not np.allclose(
        pb.grid_ext[pb.query_idx_ext], pb.query_times, atol=1e-12
    ):
        raise ValueError("query times must lie on the extended solver grid")
    return pb


class DualModel:
    def __init__(self, *, d_x, d_z, task, backbone="cde", flow_kind="coupling",
                 n_l=2, n_h=32, n_classes=2, rng=None, mode="dual", field_depth=1):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
        if backbone not in BACKBONE_KINDS:
            raise ValueError(
                f"unknown backbone {backbone!r}, expected one of {BACKBONE_KINDS}"
            )
        if flow_kind == "mlp":
            flow_kind = "mlp-ablation"
        if flow_kind not in FLOW_KINDS:
            raise ValueError(f"unknown flow kind {flow_kind!r}, expected one of {FLOW_KINDS}")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        if mode == "mlp-decoder":
            # this mode means "dual wiring, non-invertible decoder"
            flow_kind = "mlp-ablation"
        rng = rng if rng is not None else np.random.default_rng(0)
        self.task = task
        self.backbone = backbone
        self.mode = mode
        self.d_x = d_x
        self.d_z = d_z
        self.n_l = n_l
        self.n_h = n_h
        self.n_classes = n_classes
        self.enc = affine_params("enc", d_x, d_z, rng)
        channels = d_x + 1 if backbone == "cde" else None  # data plus time channel
        self.field = VectorField("field", d_z, n_h, field_depth, rng, channels=channels)
        self.diffusion = (
            VectorField("diff", d_z, n_h, field_depth, rng) if backbone == "sde" else None
        )
        self.agg = affine_params("agg", 2 * d_z, d_z, rng)
        self.flow = FlowModule(flow_kind, d_z, n_h, n_l, rng, name="flow")
        if task == "classify":
            self.head = affine_params("head", d_z, n_classes, rng)
            self.readout = None
        else:
            self.head = None
            self.readout = affine_params("readout", d_z, d_x, rng)
        self._mlp_seed = int(rng.integers(0, 2**63 - 1))
        self._params = dict(self.params())

    def params(self):
        yield from self.enc.items()
        yield from self.field.net.params()
        if self.diffusion is not None:
            yield from self.diffusion.net.params()
        yield from self.agg.items()
        yield from self.flow.params()
        if self.head is not None:
            yield from self.head.items()
        if self.readout is not None:
            yield from self.readout.items()


def ablation_variant(model, mode):
    """Rewire a model into one ablation mode, sharing parameter tensors.

    mlp-decoder swaps in a fresh non-invertible flow (deterministic per
    base model); every other mode reuses the base components as is.
    """
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}, expected one of {MODES}")
    clone = object.__new__(DualModel)
    clone.__dict__.update(model.__dict__)
    clone.mode = mode
    if mode == "mlp-decoder" and model.flow.kind != "mlp-ablation":
        clone.flow = FlowModule(
            "mlp-ablation", model.d_z, model.n_h, model.n_l,
            np.random.default_rng(model._mlp_seed), name="flow",
        )
    clone._params = dict(clone.params())
    return clone


def make_noise(model, pb, seed):
    """Brownian increments on the grid this model/mode will integrate."""
    use_ext = model.mode in ("backbone-only", "primary-latent") and pb.task != "classify"
    grid = pb.grid_ext if use_ext else pb.grid
    return BrownianSample(seed, grid, pb.batch, model.d_z)


class TaskOutput:
    def __init__(self, kind, logits=None, preds=None, query_times=None):
        self.kind = kind
        self.logits = logits
        self.preds = preds
        self.query_times = query_times


def forward(model, pb, ops=None, noise=None):
    if pb.task != model.task:
        raise ValueError(f"batch prepared for {pb.task!r}, model solves {model.task!r}")
    ops = ops if ops is not None else ArrayOps()
    z0 = apply_affine(ops, model.enc, "enc", ops.const(pb.x0))
    direct = model.mode in ("backbone-only", "primary-latent")
    use_ext = direct and pb.task != "classify"

    traj = None
    if model.mode != "flow-only":
        if model.backbone == "sde" and noise is None:
            raise ValueError("sde backbone needs a BrownianSample; see make_noise")
        grid = pb.grid_ext if use_ext else pb.grid
        dxdt = pb.dxdt_ext if use_ext else pb.dxdt
        traj = run_backbone(
            model.backbone, model.field, z0, grid, ops,
            dxdt_grid=dxdt if model.backbone == "cde" else None,
            diffusion=model.diffusion if model.backbone == "sde" else None,
            noise=noise if model.backbone == "sde" else None,
        )

    if direct:
        if pb.task == "classify":
            z_T = traj.states[len(pb.grid) - 1]
            return TaskOutput("classify", logits=apply_affine(ops, model.head, "head", z_T))
        preds = [
            apply_affine(ops, model.readout, "readout", traj.states[i])
            for i in pb.query_idx_ext
        ]
        return TaskOutput(pb.task, preds=preds, query_times=pb.query_times)

    if model.mode == "flow-only":
        zhat0 = z0
    else:
        z_mean = average(ops, traj.states)
        zhat0 = apply_affine(
            ops, model.agg, "agg", ops.concat([z_mean, traj.final], axis=1)
        )

    if pb.task == "classify":
        zh_T, _ = flow_forward(model.flow, pb.t_final, zhat0, ops)
        return TaskOutput("classify", logits=apply_affine(ops, model.head, "head", zh_T))
    preds = []
    for tau in pb.query_times:
        zh, _ = flow_forward(model.flow, float(tau), zhat0, ops)
        preds.append(apply_affine(ops, model.readout, "readout", zh))
    return TaskOutput(pb.task, preds=preds, query_times=pb.query_times)


def task_loss(ops, output, pb):
    """Scalar loss handle: mean CE (classify) or masked mean squared error."""
    if output.kind == "classify":
        probs = ops.softmax(output.logits)
        onehot = np.zeros((pb.batch, ops.value(probs).shape[1]))
        onehot[np.arange(pb.batch), pb.labels] = 1.0
        picked = ops.sum(ops.mul(ops.log(probs), ops.const(onehot)), axis=1)
        return ops.scale(ops.mean(picked), -1.0)
    n_active = int(pb.query_mask.sum())
    if n_active == 0:
        raise ValueError("empty query mask: nothing to score")
    total = None
    for q, pred in enumerate(output.preds):
        diff = ops.sub(pred, ops.const(pb.query_targets[:, q, :]))
        sq = ops.mul(diff, diff)
        masked = ops.mul(sq, ops.const(pb.query_mask[:, q, :].astype(np.float64)))
        part = ops.sum(masked)
        total = part if total is None else ops.add(total, part)
    return ops.scale(total, 1.0 / n_active)


class OptimizerState:
    """Adam moments keyed by parameter name; mode "plain" is bare descent."""

    def __init__(self, mode="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if mode not in ("adam", "plain"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.mode = mode
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def apply(self, params, grads, lr):
        for name, g in grads.items():
            p = params.get(name)
            if p is None:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if self.mode == "plain":
                p.data -= lr * g.data
                continue
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g.data
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g.data**2
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_step(model, pb, opt, lr, noise=None):
    """One forward/backward/update over the whole composition.

    Aborts (raising, touching nothing) on a non-finite loss or gradient;
    re-projects spectrally constrained flow weights after the update.
    """
    graph = Graph()
    tape = TapeOps(graph)
    try:
        out = forward(model, pb, tape, noise=noise)
        loss_id = task_loss(tape, out, pb)
    except (SolverError, FlowError) as exc:
        # non-finite intermediates are the loss blowing up, caught early
        raise TrainingDiverged(f"non-finite forward pass: {exc}") from exc
    loss = float(graph.value(loss_id))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}; step aborted")
    grads = backward(graph, loss_id)
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.data * g.data))
    grad_norm = float(np.sqrt(sq))
    if not np.isfinite(grad_norm):
        raise TrainingDiverged("non-finite gradient; step aborted")
    opt.apply(model._params, grads, lr)
    if model.mode in ("dual", "mlp-decoder", "flow-only"):
        model.flow.renormalize()
    return {"loss": loss, "grad_norm": grad_norm}


def evaluate(model, pb, noise=None):
    """Plain-numpy metrics: accuracy/loss (+AUROC when binary) or mse."""
    ops = ArrayOps()
    out = forward(model, pb, ops, noise=noise)
    if pb.task != "classify":
        return {"mse": float(task_loss(ops, out, pb))}
    metrics = {
        "loss": float(task_loss(ops, out, pb)),
        "accuracy": float(np.mean(np.argmax(out.logits, axis=1) == pb.labels)),
    }
    if model.n_classes == 2:
        pos = pb.labels == 1
        n_pos = int(pos.sum())
        n_neg = pb.batch - n_pos
        if n_pos and n_neg:
            # rank-statistic AUROC with tie-averaged ranks
            ranks = rankdata(ops.softmax(out.logits)[:, 1])
            metrics["auroc"] = float(
                (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
            )
    return metrics


def _content_hash(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, extra=None):
    arrays = {name: t.data for name, t in model._params.items()}
    meta = {
        "format_version": 1,
        "task": model.task,
        "backbone": model.backbone,
        "flow": model.flow.kind,
        "mode": model.mode,
        "d_x": model.d_x,
        "d_z": model.d_z,
        "n_l": model.n_l,
        "n_h": model.n_h,
        "n_classes": model.n_classes,
        "sha256": _content_hash(arrays),
        "extra": extra or {},
    }
    np.savez(path, meta_json=np.array(json.dumps(meta)), **arrays)
    return meta


def content_hash(model):
    """The same digest save_checkpoint would record for this model."""
    return _content_hash({name: t.data for name, t in model._params.items()})


def load_checkpoint(model, path):
    """Load parameters in place after name/shape/content-hash validation."""
    with np.load(path) as data:
        if "meta_json" not in data.files:
            raise CheckpointError("missing metadata record")
        meta = json.loads(data["meta_json"].item())
        if meta.get("format_version") != 1:
            raise CheckpointError(f"unsupported format version {meta.get('format_version')!r}")
        names = set(data.files) - {"meta_json"}
        want = set(model._params)
        if names != want:
            raise CheckpointError(
                f"parameter names disagree: missing {sorted(want - names)}, "
                f"unexpected {sorted(names - want)}"
            )
        arrays = {n: data[n] for n in names}
    for n, arr in arrays.items():
        if arr.shape != model._params[n].data.shape:
            raise CheckpointError(
                f"shape mismatch for {n}: file {arr.shape}, model "
                f"{model._params[n].data.shape}"
            )
    if _content_hash(arrays) != meta["sha256"]:
        raise CheckpointError("content hash mismatch; checkpoint is corrupt")
    for n, arr in arrays.items():
        model._params[n].data[...] = arr
    return meta
