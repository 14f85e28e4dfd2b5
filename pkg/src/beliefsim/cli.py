"""Command-line entry points.

Verbs: train-repr, train-rl, fit-probes, eval, plot, rollout. Config comes
from an optional flat key-value file plus overrides; every flat config key
is also exposed as a --section.field flag. Failures exit nonzero with a
machine-readable error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .config import RunConfig, apply_overrides, read_config
from .errors import BeliefSimError


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key-value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    for key in RunConfig().flat():
        parser.add_argument(f"--{key}", dest=f"flag:{key}", metavar="VALUE")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = read_config(args.config, base=cfg)
    apply_overrides(cfg, args.set)
    for name, value in vars(args).items():
        if name.startswith("flag:") and value is not None:
            cfg.set_key(name.removeprefix("flag:"), value)
    return cfg


def cmd_train_repr(args) -> dict:
    from .harness import run_representation_experiment

    cfg = _resolve_config(args)
    return run_representation_experiment(cfg)


def cmd_train_rl(args) -> dict:
    from .harness import run_rl_experiment

    cfg = _resolve_config(args)
    cfg.rl.enabled = True
    return run_rl_experiment(cfg)


def cmd_fit_probes(args) -> dict:
    from .harness import (collect_dataset, episode_tensors, eval_probes,
                          fit_probes, load_checkpoint, save_checkpoint)
    from .harness import build_repr_model

    cfg = _resolve_config(args)
    model = build_repr_model(cfg)
    payload = load_checkpoint(args.checkpoint, {"core": model.core})
    window = payload["extra"].get("window")
    train_eps = collect_dataset(cfg, heldout=False)
    heldout_eps = collect_dataset(cfg, heldout=True)
    probes = fit_probes(cfg, model.core, train_eps, window)
    mean_map = episode_tensors(train_eps)["maps"].mean(dim=0, keepdim=True)
    metrics, _ = eval_probes(cfg, model.core, probes, heldout_eps, window,
                             train_mean_map=mean_map)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint), "probes.pt")
    save_checkpoint(out, {"probe_reader": probes.reader, "probe_pose": probes.pose,
                          "probe_map": probes.map})
    return {"probes": out, "metrics": metrics.as_dict()}


def cmd_eval(args) -> dict:
    from .harness import (build_repr_model, collect_dataset, episode_tensors,
                          eval_probes, load_checkpoint)
    from .probes import build_probes

    cfg = _resolve_config(args)
    model = build_repr_model(cfg)
    probes = build_probes(model.core, cfg.env.width * cfg.env.height,
                          cfg.env.orientation_bins, cfg.env.map_size,
                          cfg.memory.kanerva_probe_reads)
    payload = load_checkpoint(args.checkpoint, {
        "core": model.core, "probe_reader": probes.reader,
        "probe_pose": probes.pose, "probe_map": probes.map,
    })
    window = payload["extra"].get("window")
    train_eps = collect_dataset(cfg, heldout=False)
    heldout_eps = collect_dataset(cfg, heldout=True)
    mean_map = episode_tensors(train_eps)["maps"].mean(dim=0, keepdim=True)
    metrics, per_step = eval_probes(cfg, model.core, probes, heldout_eps, window,
                                    train_mean_map=mean_map)
    return {"metrics": metrics.as_dict(), "per_step_map_sse": [float(v) for v in per_step]}


def cmd_plot(args) -> dict:
    from .harness import metric_curve, read_metrics
    from .plotting import plot_metric

    curves = []
    for path in args.runs:
        records = read_metrics(os.path.join(path, "metrics.jsonl"))
        curve = metric_curve(records, args.metric)
        if curve:
            curves.append(curve)
    if not curves:
        raise BeliefSimError(f"no data for metric {args.metric!r} in the given runs")
    plot_metric({args.metric: curves}, args.out, title=args.metric)
    return {"plot": args.out, "curves": len(curves)}


def cmd_rollout(args) -> dict:
    from .harness import build_repr_model, collect_dataset, emit_rollout_strip, load_checkpoint

    cfg = _resolve_config(args)
    model = build_repr_model(cfg)
    load_checkpoint(args.checkpoint, {"core": model.core, "sim": model.sim,
                                      "head": model.head})
    episode = collect_dataset(cfg, heldout=True)[args.episode]
    gen = torch.Generator().manual_seed(cfg.run.seed + 11)
    emit_rollout_strip(model.core, model.sim, model.head, episode,
                       args.start, args.horizon, args.out, gen)
    return {"strip": args.out}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beliefsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-repr", help="representation run on scripted data")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_train_repr)

    p = sub.add_parser("train-rl", help="food-collection RL run")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("fit-probes", help="fit probes on a frozen checkpoint")
    _add_config_arguments(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_probes)

    p = sub.add_parser("eval", help="probe metrics for a checkpoint")
    _add_config_arguments(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="preprocess and plot a metric across runs")
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("rollout", help="emit a true-vs-sample rollout strip")
    _add_config_arguments(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--start", type=int, default=20)
    p.add_argument("--horizon", type=int, default=5)
    p.set_defaults(func=cmd_rollout)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except BeliefSimError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(result, sys.stdout, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
