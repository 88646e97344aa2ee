"""Training loop, initialization, optimizer, metrics and the statistical
comparison baselines (inverse-distance weighting and k-nearest neighbors)."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kernels
from .data import StDataset, Window, iter_windows, standardize
from .graph import (GraphConfig, SensorGraph, build_sensor_graph,
                    pairwise_distances, split_context_target)
from .model import (ModelInputs, StgnpConfig, StgnpModel, draw_latent_noise,
                    elbo, generative_forward)
from .tensor import Tape, backward, tune_allocator

MAPE_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 150
    batch_windows: int = 8
    target_count: int = 3
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float
    coverage_1s: float | None
    coverage_2s: float | None
    coverage_3s: float | None
    per_target: dict
    runtime_seconds: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae, "rmse": self.rmse, "mape": self.mape,
            "coverage_1s": self.coverage_1s, "coverage_2s": self.coverage_2s,
            "coverage_3s": self.coverage_3s, "per_target": self.per_target,
            "runtime_seconds": self.runtime_seconds, "n_points": self.n_points,
        }


# ---------------------------------------------------------------------------
# initialization and optimizer
# ---------------------------------------------------------------------------

def xavier_init(model: StgnpModel, seed: int) -> StgnpModel:
    """Weights ~ N(0, 2/(fan_in+fan_out)); biases and the target token
    ~ N(0, 1/d0). Deterministic given the seed and the registry order."""
    rng = np.random.default_rng(seed)
    small = math.sqrt(1.0 / model.config.d0)
    for name, p in model.named_parameters():
        shape = p.data.shape
        if name == "token" or name.endswith(".bias"):
            p.data = rng.normal(0.0, small, size=shape)
        elif len(shape) == 3:  # temporal kernel (k, c_in, c_out)
            fan_in = shape[0] * shape[1]
            fan_out = shape[0] * shape[2]
            p.data = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            p.data = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    return model


def init_adam(params: list[np.ndarray]) -> dict:
    return {"t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params]}


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """Standard bias-corrected Adam update, in place on the parameter arrays."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        kernels.adam_update(p, g, m, v, beta1, beta2, lr, eps, c1, c2)
    return state


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def make_inputs(dataset: StDataset, graph: SensorGraph, windows: list[Window],
                with_targets: bool) -> ModelInputs:
    """Gather window tensors; all windows must share the split sizes."""
    b = len(windows)
    t_len = windows[0].t_len
    n = len(windows[0].context_ids)
    m = len(windows[0].target_ids)
    d_y, d_x = dataset.d_y, dataset.d_x
    y_ctx = np.empty((b, n, t_len, d_y))
    x_ctx = np.empty((b, n, t_len, d_x))
    x_tgt = np.empty((b, m, t_len, d_x))
    y_tgt = np.empty((b, m, t_len, d_y)) if with_targets else None
    m_tgt = np.empty((b, m, t_len, d_y)) if with_targets else None
    hops = [np.empty((b, m, n)) for _ in range(len(graph.powers))]
    for i, w in enumerate(windows):
        sl = slice(w.start, w.start + t_len)
        ctx = np.asarray(w.context_ids, dtype=np.intp)
        tgt = np.asarray(w.target_ids, dtype=np.intp)
        y_ctx[i] = dataset.y[ctx, sl]
        x_ctx[i] = dataset.x[ctx, sl]
        x_tgt[i] = dataset.x[tgt, sl]
        if with_targets:
            y_tgt[i] = dataset.y[tgt, sl]
            m_tgt[i] = dataset.mask[tgt, sl]
        for k, block in enumerate(graph.cross_blocks(tgt, ctx)):
            hops[k][i] = block
    return ModelInputs(y_context=y_ctx, x_context=x_ctx, x_target=x_tgt,
                       hops=hops, y_target=y_tgt, mask_target=m_tgt)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: StgnpModel
    graph: SensorGraph
    dataset: StDataset  # standardized
    log: list[tuple]  # (epoch, train_loss, val_mae)
    best_val_mae: float
    best_epoch: int
    train_node_ids: list[int]
    heldout_target_ids: list[int]
    runtime_seconds: float = 0.0


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _validation_mae(model: StgnpModel, dataset: StDataset, graph: SensorGraph,
                    val_windows: list[Window]) -> float:
    inputs = make_inputs(dataset, graph, val_windows, with_targets=True)
    _, pred = generative_forward(model, inputs, mode="mean")
    err = np.abs(pred.mean.data - inputs.y_target) * inputs.mask_target
    denom = inputs.mask_target.sum()
    return float(err.sum() / denom) if denom > 0 else float("nan")


def train(dataset: StDataset, graph_config: GraphConfig,
          model_config: StgnpConfig, train_config: TrainConfig,
          target_fraction: float = 0.3) -> TrainResult:
    """Full training protocol on an original-units dataset.

    Holds out ``target_fraction`` of the nodes entirely (they never appear as
    context or target during training), standardizes on the train segment,
    then sweeps stride-1 windows each epoch: every window draws a fresh
    random subset of the training nodes as pseudo-targets, batches of
    windows are averaged into one ELBO loss, gradients are norm-clipped and
    applied with Adam. The checkpoint with the best validation MAE
    (standardized units, deterministic splits, mean-mode predictions) wins.
    Fully deterministic given the seed.
    """
    tune_allocator()
    start_time = time.perf_counter()
    cfg = train_config
    streams = np.random.SeedSequence(cfg.seed).spawn(6)
    split_seed = int(streams[0].generate_state(1)[0])
    init_seed = int(streams[1].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(streams[2])
    subset_rng = np.random.default_rng(streams[3])
    noise_rng = np.random.default_rng(streams[4])
    val_rng = np.random.default_rng(streams[5])

    train_nodes, heldout = split_context_target(
        dataset.node_ids, target_fraction, split_seed)
    if cfg.target_count >= len(train_nodes):
        raise ValueError("target_count must be smaller than the training node pool")
    ds = standardize(dataset) if dataset.norm is None else dataset
    graph = build_sensor_graph(ds.node_ids, ds.coords, graph_config,
                               context_ids=train_nodes, target_ids=heldout)

    model = StgnpModel(model_config)
    xavier_init(model, init_seed)

    t_len = model_config.T
    val_windows = iter_windows(ds, "val", t_len, t_len, node_pool=train_nodes,
                               target_count=cfg.target_count, rng=val_rng)

    params = [p.data for _, p in model.named_parameters()]
    adam = init_adam(params)
    log: list[tuple] = []
    best_val = float("inf")
    best_epoch = -1
    best_params = [p.copy() for p in params]

    lo, hi = ds.segment_bounds("train")
    n_starts = hi - lo - t_len + 1
    if n_starts < 1:
        raise ValueError("train segment shorter than one window")

    for epoch in range(1, cfg.epochs + 1):
        order = lo + shuffle_rng.permutation(n_starts)
        epoch_losses = []
        pool = np.asarray(train_nodes)
        for it, starts in enumerate(_batched(order, cfg.batch_windows)):
            windows = []
            for s in starts:
                chosen = subset_rng.choice(pool.size, size=cfg.target_count,
                                           replace=False)
                sel = np.zeros(pool.size, dtype=bool)
                sel[chosen] = True
                windows.append(Window(start=int(s), t_len=t_len,
                                      context_ids=pool[~sel].tolist(),
                                      target_ids=pool[sel].tolist()))
            inputs = make_inputs(ds, graph, windows, with_targets=True)
            noise = draw_latent_noise(noise_rng, model_config,
                                      inputs.n_windows, inputs.n_targets)
            model.zero_grad()
            with Tape() as tape:
                loss, _ = elbo(model, inputs, noise)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, iteration {it}")
            backward(tape, loss)
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad
                     for _, p in model.named_parameters()]
            clip_gradients(grads, cfg.grad_clip)
            adam_step(params, grads, adam, cfg.lr)
            epoch_losses.append(loss_val)

        train_loss = float(np.mean(epoch_losses))
        val_mae = _validation_mae(model, ds, graph, val_windows)
        log.append((epoch, train_loss, val_mae))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_params = [p.copy() for p in params]

    for p, best in zip(params, best_params):
        p[...] = best
    return TrainResult(model=model, graph=graph, dataset=ds, log=log,
                       best_val_mae=best_val, best_epoch=best_epoch,
                       train_node_ids=train_nodes, heldout_target_ids=heldout,
                       runtime_seconds=time.perf_counter() - start_time)


def write_train_log(log: list[tuple], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_mae\n")
        for epoch, loss, val in log:
            fh.write(f"{epoch},{loss!r},{val!r}\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def compute_metrics(y_true: np.ndarray, pred_mean: np.ndarray,
                    pred_std: np.ndarray | None, mask: np.ndarray,
                    node_labels: list[str] | None = None,
                    mape_floor: float = MAPE_FLOOR) -> MetricsReport:
    """Masked extrapolation metrics in the units of the inputs.

    Arrays are (M, T, d_y)-like with the target-node axis first when a
    per-target breakdown is requested. Coverage is the fraction of observed
    entries with |y - mean| <= k * std.
    """
    obs = mask == 1.0
    n_points = int(obs.sum())
    if n_points == 0:
        raise ValueError("no observed target entries")
    err = np.abs(y_true - pred_mean)[obs]
    mae = float(err.mean())
    rmse = float(math.sqrt(np.mean(err * err)))
    denom_ok = obs & (np.abs(y_true) > mape_floor)
    if denom_ok.sum() > 0:
        mape = float(np.mean(np.abs(y_true[denom_ok] - pred_mean[denom_ok])
                             / np.abs(y_true[denom_ok])))
    else:
        mape = float("nan")
    if pred_std is not None:
        abs_err = np.abs(y_true - pred_mean)
        cov = [float(np.mean((abs_err <= k * pred_std)[obs])) for k in (1, 2, 3)]
    else:
        cov = [None, None, None]
    per_target = {}
    if node_labels is not None:
        for i, label in enumerate(node_labels):
            sel = obs[i]
            if sel.sum() == 0:
                per_target[label] = {"mae": None, "rmse": None, "n_points": 0}
                continue
            e = np.abs(y_true[i] - pred_mean[i])[sel]
            per_target[label] = {"mae": float(e.mean()),
                                 "rmse": float(math.sqrt(np.mean(e * e))),
                                 "n_points": int(sel.sum())}
    return MetricsReport(mae=mae, rmse=rmse, mape=mape, coverage_1s=cov[0],
                         coverage_2s=cov[1], coverage_3s=cov[2],
                         per_target=per_target, runtime_seconds=0.0,
                         n_points=n_points)


def evaluate(model: StgnpModel, dataset: StDataset, segment: str,
             graph: SensorGraph) -> MetricsReport:
    """Rolling non-overlapping mean-mode extrapolation of the held-out
    targets over one segment; metrics in original units."""
    started = time.perf_counter()
    t_len = model.config.T
    windows = iter_windows(dataset, segment, t_len, t_len,
                           context_ids=graph.context_ids,
                           target_ids=graph.target_ids)
    inputs = make_inputs(dataset, graph, windows, with_targets=True)
    _, pred = generative_forward(model, inputs, mode="mean")
    scale = dataset.y_scale()
    y_true = dataset.inverse_y(inputs.y_target)
    y_hat = dataset.inverse_y(pred.mean.data)
    sigma = pred.std.data * scale
    mask = inputs.mask_target

    # (B, M, T, d_y) -> (M, B*T, d_y) so the per-target breakdown is easy
    def regroup(a):
        return np.transpose(a, (1, 0, 2, 3)).reshape(a.shape[1], -1, a.shape[3])

    labels = [dataset.node_ids[i] for i in graph.target_ids]
    report = compute_metrics(regroup(y_true), regroup(y_hat), regroup(sigma),
                             regroup(mask), node_labels=labels)
    report.runtime_seconds = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# statistical baselines
# ---------------------------------------------------------------------------

def baseline_idw(y_context: np.ndarray, mask_context: np.ndarray,
                 dists: np.ndarray, power: float = 2.0):
    """Inverse-distance weighting per timestep/feature.

    ``y_context``/``mask_context``: (N, T, d_y); ``dists``: (M, N). Returns
    (pred, valid) of shape (M, T, d_y); co-located context nodes (distance 0)
    short-circuit to the mean of their observed values; timesteps with no
    observed context get valid = 0.
    """
    m, n = dists.shape
    t_len, d_y = y_context.shape[1], y_context.shape[2]
    pred = np.zeros((m, t_len, d_y))
    valid = np.zeros((m, t_len, d_y))
    for i in range(m):
        zero = dists[i] == 0.0
        if np.any(zero):
            w_zero = mask_context[zero]  # (n_zero, T, d_y)
            near_cnt = w_zero.sum(axis=0)
            near_sum = (y_context[zero] * w_zero).sum(axis=0)
            near = near_cnt > 0
        else:
            near = np.zeros((t_len, d_y), dtype=bool)
        w = np.zeros(n)
        nz = ~zero
        w[nz] = dists[i, nz] ** (-power)
        num = np.einsum("n,ntd->td", w, y_context * mask_context)
        den = np.einsum("n,ntd->td", w, mask_context)
        far = den > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            pred_i = np.where(far, num / np.where(far, den, 1.0), 0.0)
            if np.any(near):
                pred_i = np.where(near, near_sum / np.where(near, near_cnt, 1.0), pred_i)
        pred[i] = pred_i
        valid[i] = (far | near).astype(np.float64)
    return pred, valid


def baseline_knn(y_context: np.ndarray, mask_context: np.ndarray,
                 dists: np.ndarray, k: int):
    """Unweighted mean of the k nearest observed context values."""
    if k < 1:
        raise ValueError("k must be >= 1")
    m, n = dists.shape
    if k > n:
        raise ValueError("k exceeds the context count")
    t_len, d_y = y_context.shape[1], y_context.shape[2]
    pred = np.zeros((m, t_len, d_y))
    valid = np.zeros((m, t_len, d_y))
    for i in range(m):
        order = np.argsort(dists[i], kind="stable")
        taken = np.zeros((t_len, d_y))
        total = np.zeros((t_len, d_y))
        for j in order:
            room = (taken < k) & (mask_context[j] == 1.0)
            total += np.where(room, y_context[j], 0.0)
            taken += room
        nonzero = taken > 0
        pred[i] = np.where(nonzero, total / np.where(nonzero, taken, 1.0), 0.0)
        valid[i] = nonzero.astype(np.float64)
    return pred, valid


def evaluate_baseline(dataset: StDataset, segment: str, graph: SensorGraph,
                      method: str, power: float = 2.0,
                      k: int | None = None) -> MetricsReport:
    """Run IDW or KNN over a segment against the held-out targets, in
    original units. Prediction slots with no usable context are excluded
    from the metrics (their validity mask is 0)."""
    started = time.perf_counter()
    lo, hi = dataset.segment_bounds(segment)
    ctx = np.asarray(graph.context_ids, dtype=np.intp)
    tgt = np.asarray(graph.target_ids, dtype=np.intp)
    y = dataset.inverse_y(dataset.y) * dataset.mask
    y_ctx = y[ctx, lo:hi]
    m_ctx = dataset.mask[ctx, lo:hi]
    dists = pairwise_distances(dataset.coords, graph.config.distance)[np.ix_(tgt, ctx)]
    if method == "idw":
        pred, valid = baseline_idw(y_ctx, m_ctx, dists, power=power)
    elif method == "knn":
        pred, valid = baseline_knn(y_ctx, m_ctx, dists, k=k if k else min(5, ctx.size))
    else:
        raise ValueError(f"unknown baseline '{method}'")
    y_true = y[tgt, lo:hi]
    mask = dataset.mask[tgt, lo:hi] * valid
    labels = [dataset.node_ids[i] for i in graph.target_ids]
    report = compute_metrics(y_true, pred, None, mask, node_labels=labels)
    report.runtime_seconds = time.perf_counter() - started
    return report
