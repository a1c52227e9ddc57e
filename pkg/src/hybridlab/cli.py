"""Command-line entry point.

Every verb is a thin wrapper over a library call. Exit codes: 0 success,
2 configuration/usage error, 1 runtime failure. stdout carries one JSON
summary line per invocation; diagnostics go to stderr.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, report
from .data import generate_toy2d, save_arrays, save_toy2d
from .experiments import (ConfigError, ExperimentConfig, ablate_components,
                          apply_overrides, evaluate_open_set, load_config,
                          save_config, sweep_mixing, train_hybrid,
                          train_joint_with_flow, _build_dataset)
from .model import dense_scores
from .theory import (ensemble_stats, standardize, verify_identity,
                     verify_sufficiency, write_theory_csv)

VERBS = ("gen-data", "train", "train-flow", "eval", "ablate", "sweep-b",
         "verify-theory", "heatmap")


def _log(message):
    print(message, file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hybridlab",
        description="Hybrid open-set recognition laboratory")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(verb, **kwargs):
        p = sub.add_parser(verb, **kwargs)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="override the output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        return p

    add("gen-data", help="generate a dataset and export its container")
    add("train", help="train on real negatives and evaluate")
    add("train-flow", help="joint training with flow-synthesized negatives")
    p = add("eval", help="open-set evaluation of a dense-world checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p = add("ablate", help="component ablation table for a toy checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p = add("sweep-b", help="train/eval across real-negative fractions")
    p.add_argument("--b-values", default="0,0.5,1",
                   help="comma-separated mixing probabilities")
    p = add("verify-theory", help="exact identity and sufficiency checks")
    p.add_argument("--n", type=int, default=1000, help="number of score pairs")
    p = add("heatmap", help="render score heatmaps from a toy checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = str(args.out)
    return apply_overrides(config, args.overrides)


def cmd_gen_data(config):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.dataset == "toy2d":
        ds = generate_toy2d(config.seed, config.n_train, config.n_test,
                            config.n_negative, config.n_anomaly)
        header = save_toy2d(ds, out / "dataset")
        fig = report.save_toy_scatter(ds, out / "dataset.png")
        artifacts = [header, out / "dataset" / "data.bin", fig]
    else:
        world = _build_dataset(config)
        arrays = {}
        for split in ("train", "calib", "test"):
            for i, scene in enumerate(getattr(world, split)):
                arrays[f"{split}_{i}_features"] = scene.features
                arrays[f"{split}_{i}_labels"] = scene.labels
        header = save_arrays(out / "dataset", arrays,
                             meta={"kind": "dense", "seed": config.seed,
                                   "n_classes": world.n_classes})
        artifacts = [header, out / "dataset" / "data.bin"]
    save_config(config, out / "config.json")
    manifest = report.write_manifest(out, artifacts + [out / "config.json"])
    return {"run_dir": str(out), "manifest": str(manifest)}


def cmd_train(config):
    rep = train_hybrid(config)
    return rep.summary


def cmd_train_flow(config):
    if config.b_real >= 1.0:
        config.b_real = 0.0
    rep = train_joint_with_flow(config)
    return rep.summary


def cmd_eval(config, ckpt_path):
    model = checkpoint.load_model(ckpt_path)
    if config.dataset != "dense":
        raise ConfigError("eval expects a dense-world config")
    world = _build_dataset(config)
    result = evaluate_open_set(model, world, config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .metrics import write_metrics_csv
    write_metrics_csv(out / "open_set_metrics.csv", result["rows"])
    return {k: result[k] for k in
            ("closed_miou", "open_miou", "mean_f1", "gap", "threshold")}


def cmd_ablate(config, ckpt_path):
    model = checkpoint.load_model(ckpt_path)
    if config.dataset != "toy2d":
        raise ConfigError("ablate expects a toy2d config")
    ds = _build_dataset(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, stats = ablate_components(model, ds, config,
                                    out / "ablation.csv")
    return {metric: value for metric, _, value, _, _ in rows
            if isinstance(value, float)}


def cmd_sweep_b(config, b_values):
    values = [float(v) for v in b_values.split(",") if v != ""]
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_mixing(config, values, out / "sweep_b.csv")
    auroc_by_b = {split: value for metric, split, value, _, _ in rows
                  if metric == "auroc_hybrid"}
    report.save_sweep_figure(values,
                             [auroc_by_b[f"b={v:g}"] for v in values],
                             out / "sweep_b.png")
    return {"csv": str(out / "sweep_b.csv"), **auroc_by_b}


def cmd_verify_theory(config, n_pairs):
    rng = np.random.default_rng(config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats_rows = []
    worst = 0.0
    violations = 0
    for _ in range(n_pairs):
        n = 100
        f = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        f[0], f[1] = 1.0, -1.0
        shared = rng.normal(size=n) * rng.uniform(0.0, 0.8)
        s_d = standardize(rng.uniform(0.2, 2.0) * f + shared + rng.normal(size=n))
        s_g = standardize(rng.uniform(0.2, 2.0) * f + shared + rng.normal(size=n))
        worst = max(worst, verify_identity(s_d, s_g, f))
        rep = verify_sufficiency(s_d, s_g, f)
        violations += not rep.implication_ok
        stats_rows.append(ensemble_stats(s_d, s_g, f))
    write_theory_csv(out / "theory.csv", stats_rows)
    return {"pairs": n_pairs, "max_identity_residual": worst,
            "sufficiency_violations": violations,
            "csv": str(out / "theory.csv")}


def cmd_heatmap(config, ckpt_path):
    model = checkpoint.load_model(ckpt_path)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(-config.heatmap_extent, config.heatmap_extent,
                       config.heatmap_grid)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    scores = dense_scores(model, pts, config.weight_disc, config.weight_gen)
    paths = {}
    for name in ("hybrid", "disc", "gen"):
        values = getattr(scores, name).reshape(config.heatmap_grid,
                                               config.heatmap_grid)
        pgm = report.emit_heatmap(values, out / f"score_{name}.pgm")
        report.save_score_figure(
            values, out / f"score_{name}.png",
            extent=[-config.heatmap_extent, config.heatmap_extent,
                    -config.heatmap_extent, config.heatmap_extent],
            title=f"{name} anomaly score")
        paths[name] = str(pgm)
    return paths


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        config = resolve_config(args)
        if args.verb == "gen-data":
            summary = cmd_gen_data(config)
        elif args.verb == "train":
            summary = cmd_train(config)
        elif args.verb == "train-flow":
            summary = cmd_train_flow(config)
        elif args.verb == "eval":
            summary = cmd_eval(config, args.checkpoint)
        elif args.verb == "ablate":
            summary = cmd_ablate(config, args.checkpoint)
        elif args.verb == "sweep-b":
            summary = cmd_sweep_b(config, args.b_values)
        elif args.verb == "verify-theory":
            summary = cmd_verify_theory(config, args.n)
        else:
            summary = cmd_heatmap(config, args.checkpoint)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except FileNotFoundError as exc:
        _log(f"config error: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        _log(f"runtime failure: {exc}")
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
