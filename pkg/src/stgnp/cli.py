"""Command-line surface: synthesize data, train, evaluate, extrapolate,
run the built-in math checks and the statistical baselines.

Exit codes: 0 success, 1 failed check, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .graph import GraphConfig, build_sensor_graph
from .model import (ModelInputs, StgnpConfig, generative_forward,
                    load_checkpoint, save_checkpoint)
from .training import (TrainConfig, evaluate, evaluate_baseline, make_inputs,
                       train, write_train_log)
from .data import NormStats, apply_norm, iter_windows, load_csv, write_csv


class UsageError(SystemExit):
    def __init__(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(2)


_GRAPH_KEYS = {"kernel_sigma", "threshold", "K", "distance"}
_MODEL_KEYS = {"L", "kernel_size", "det_channels", "latent_channels", "d0",
               "likelihood_hidden", "K", "T", "sigma_min_latent",
               "sigma_min_likelihood"}
_TRAIN_KEYS = {"lr", "epochs", "batch_windows", "target_count", "grad_clip",
               "seed", "checkpoint_dir"}
_EXTRA_KEYS = {"target_fraction"}


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    known = _GRAPH_KEYS | _MODEL_KEYS | _TRAIN_KEYS | _EXTRA_KEYS
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _resolve_configs(raw: dict, d_y: int, d_x: int, seed: int | None):
    graph_kwargs = {k: raw[k] for k in _GRAPH_KEYS if k in raw}
    model_kwargs = {k: raw[k] for k in _MODEL_KEYS if k in raw}
    train_kwargs = {k: raw[k] for k in _TRAIN_KEYS if k in raw}
    if seed is not None:
        train_kwargs["seed"] = seed
    try:
        graph_cfg = GraphConfig(**graph_kwargs)
        model_cfg = StgnpConfig(d_y=d_y, d_x=d_x, **model_kwargs)
        train_cfg = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    return graph_cfg, model_cfg, train_cfg, float(raw.get("target_fraction", 0.3))


def _echo_config(out_dir: Path, graph_cfg, model_cfg, train_cfg,
                 target_fraction: float) -> None:
    resolved = {}
    resolved.update(dataclasses.asdict(graph_cfg))
    resolved.update(dataclasses.asdict(model_cfg))
    resolved.update(dataclasses.asdict(train_cfg))
    resolved["target_fraction"] = target_fraction
    with open(out_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_synth(args) -> int:
    ds = data_mod.generate_synthetic(args.nodes, args.steps, args.seed,
                                     alpha=args.alpha, beta=args.beta,
                                     gamma=args.gamma)
    write_csv(ds, args.out)
    print(f"wrote {ds.n_nodes} nodes x {ds.n_steps} steps to {args.out}")
    return 0


def _cmd_train(args) -> int:
    raw_cfg = _load_run_config(args.config)
    try:
        dataset = load_csv(args.data)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    graph_cfg, model_cfg, train_cfg, frac = _resolve_configs(
        raw_cfg, dataset.d_y, dataset.d_x, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, graph_cfg, model_cfg, train_cfg, frac)
    result = train(dataset, graph_cfg, model_cfg, train_cfg, target_fraction=frac)
    extra = {
        "norm": result.dataset.norm.to_dict(),
        "context_node_ids": [result.dataset.node_ids[i] for i in result.train_node_ids],
        "target_node_ids": [result.dataset.node_ids[i] for i in result.heldout_target_ids],
        "graph_config": dataclasses.asdict(result.graph.config),
        "target_fraction": frac,
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
    }
    save_checkpoint(result.model, out_dir / "model.ckpt", extra=extra)
    write_train_log(result.log, out_dir / "train_log.csv")
    print(f"trained {train_cfg.epochs} epochs in {result.runtime_seconds:.1f}s; "
          f"best val MAE {result.best_val_mae:.6f} (epoch {result.best_epoch})")
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    return 0


def _restore(ckpt_path: str, data_path: str):
    try:
        model, extra = load_checkpoint(ckpt_path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    try:
        dataset = load_csv(data_path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    if not extra.get("norm"):
        raise UsageError("checkpoint carries no normalization statistics")
    ds = apply_norm(dataset, NormStats.from_dict(extra["norm"]))
    graph_cfg = GraphConfig(**extra["graph_config"])
    id_index = {n: i for i, n in enumerate(ds.node_ids)}
    try:
        ctx = [id_index[n] for n in extra["context_node_ids"]]
        tgt = [id_index[n] for n in extra["target_node_ids"]]
    except KeyError as exc:
        raise UsageError(f"dataset is missing node {exc} referenced by the checkpoint")
    graph = build_sensor_graph(ds.node_ids, ds.coords, graph_cfg,
                               context_ids=ctx, target_ids=tgt)
    return model, ds, graph


def _cmd_eval(args) -> int:
    model, ds, graph = _restore(args.ckpt, args.data)
    report = evaluate(model, ds, args.segment, graph)
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"MAE {report.mae:.6f}  RMSE {report.rmse:.6f}  MAPE {report.mape:.6f}  "
          f"coverage {report.coverage_1s:.3f}/{report.coverage_2s:.3f}/{report.coverage_3s:.3f}")
    print(f"report: {args.report}")
    return 0


def _cmd_extrapolate(args) -> int:
    model, ds, graph = _restore(args.ckpt, args.data)
    wanted = [s for s in args.targets.split(",") if s]
    id_index = {n: i for i, n in enumerate(ds.node_ids)}
    missing = [n for n in wanted if n not in id_index]
    if missing:
        raise UsageError(f"unknown target node ids: {', '.join(missing)}")
    tgt = [id_index[n] for n in wanted]
    ctx = [i for i in range(ds.n_nodes) if i not in set(tgt)]
    if not ctx:
        raise UsageError("no context nodes left")
    t_len = model.config.T
    if ds.n_steps < t_len:
        raise UsageError("dataset shorter than one window")
    starts = list(range(0, ds.n_steps - t_len + 1, t_len))
    rows = []
    for start in starts:
        sl = slice(start, start + t_len)
        hops = graph.cross_blocks(tgt, ctx)
        inputs = ModelInputs(
            y_context=ds.y[ctx, sl][None],
            x_context=ds.x[ctx, sl][None],
            x_target=ds.x[tgt, sl][None],
            hops=[h[None] for h in hops],
        )
        _, pred = generative_forward(model, inputs, mode="mean")
        mean = ds.inverse_y(pred.mean.data[0])
        std = pred.std.data[0] * ds.y_scale()
        for mi, node in enumerate(wanted):
            for ti in range(t_len):
                stamp = ds.timestamps[start + ti]
                for f in range(ds.d_y):
                    rows.append((node, stamp, f"y_{f}",
                                 repr(float(mean[mi, ti, f])),
                                 repr(float(std[mi, ti, f]))))
    with open(args.out, "w") as fh:
        fh.write("node_id,timestamp,feature,mean,std\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def _cmd_check_gba(args) -> int:
    from .verify import check_factorized_vs_full
    dev = check_factorized_vs_full(trials=args.trials, seed=args.seed)
    print(f"factorized vs full-covariance conditioning over {args.trials} trials: "
          f"max deviation {dev:.3e}")
    if dev > 1e-8:
        print("FAIL: deviation above 1e-8")
        return 1
    print("OK")
    return 0


def _cmd_check_grad(args) -> int:
    from .verify import elbo_gradient_error
    err = elbo_gradient_error(seed=args.seed)
    print(f"training-loss gradient vs central differences: max relative error {err:.3e}")
    if err > args.tol:
        print(f"FAIL: error above {args.tol}")
        return 1
    print("OK")
    return 0


def _cmd_baseline(args) -> int:
    raw_cfg = _load_run_config(args.config)
    try:
        dataset = load_csv(args.data)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    graph_cfg, _model_cfg, train_cfg, frac = _resolve_configs(
        raw_cfg, dataset.d_y, dataset.d_x, None)
    from .graph import split_context_target
    streams = np.random.SeedSequence(train_cfg.seed).spawn(1)
    split_seed = int(streams[0].generate_state(1)[0])
    ctx, tgt = split_context_target(dataset.node_ids, frac, split_seed)
    graph = build_sensor_graph(dataset.node_ids, dataset.coords, graph_cfg,
                               context_ids=ctx, target_ids=tgt)
    report = evaluate_baseline(dataset, args.segment, graph, args.method,
                               power=args.power, k=args.k)
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{args.method}: MAE {report.mae:.6f}  RMSE {report.rmse:.6f}  "
          f"MAPE {report.mape:.6f}")
    print(f"report: {args.report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgnp",
        description="Sensor-signal extrapolation over graphs with calibrated "
                    "uncertainty.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--steps", type=int, default=2400)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.1)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out targets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--segment", default="test", choices=["train", "val", "test"])
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("extrapolate", help="predict signals at chosen nodes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", required=True,
                   help="comma-separated node ids to extrapolate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extrapolate)

    p = sub.add_parser("check", help="built-in verification")
    check_sub = p.add_subparsers(dest="check_command", required=True)
    pg = check_sub.add_parser("gba", help="factorized vs full-covariance aggregation")
    pg.add_argument("--trials", type=int, default=1000)
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=_cmd_check_gba)
    pc = check_sub.add_parser("grad", help="loss gradient vs finite differences")
    pc.add_argument("--tol", type=float, default=1e-5)
    pc.add_argument("--seed", type=int, default=0)
    pc.set_defaults(func=_cmd_check_grad)

    p = sub.add_parser("baseline", help="evaluate IDW or KNN")
    p.add_argument("--method", required=True, choices=["idw", "knn"])
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None,
                   help="JSON config; its 'seed' drives the held-out split")
    p.add_argument("--segment", default="test", choices=["train", "val", "test"])
    p.add_argument("--report", required=True)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=_cmd_baseline)
    return parser


def main(argv=None) -> int:
    from .tensor import tune_allocator
    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc))


if __name__ == "__main__":
    sys.exit(main())
