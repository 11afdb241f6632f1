"""Experiment command line: pretrain / train / eval / sweep / export / ablate.

Configuration comes from an optional key=value file plus repeatable
``--set key=value`` overrides; the handful of common knobs also get
dedicated flags. Every run writes JSON metrics, CSV loss/curve logs, and
checkpoints under --out.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_config
from .data import per_user_items, split_dataset
from .pipeline import (load_dataset, run_pipeline, run_single, sweep,
                       sweep_csv)
from .pretrain import build_train_graph, run_pretraining


def _collect_overrides(args) -> dict:
    overrides = {}
    for key in ("dataset", "variant", "seed", "runs", "out"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return overrides


def _config_from_args(args) -> RunConfig:
    return build_config(args.config, _collect_overrides(args))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--dataset", default=None,
                   help="synthetic | movielens | lastfm | canonical")
    p.add_argument("--variant", default=None,
                   help="full | no_dl | no_ep | no_fm | base")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--runs", type=int, default=None, help="number of seeds")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    for seed in cfg.seeds():
        ss = np.random.SeedSequence(seed)
        rng = np.random.Generator(np.random.PCG64(ss.spawn(4)[0]))
        dataset = load_dataset(cfg, seed)
        split = split_dataset(dataset, cfg.split_ratios, seed)
        adj = build_train_graph(dataset, split)
        art = run_pretraining(dataset, split, cfg, rng, adj)
        path = os.path.join(out_dir, f"pretrain_seed{seed}.ckpt")
        tensors = {"perf.users0": art.perf_users0, "perf.items0": art.perf_items0,
                   "perf.out_users": art.perf_out_users,
                   "perf.out_items": art.perf_out_items,
                   "bias.users0": art.bias_users0, "bias.items0": art.bias_items0,
                   "bias.out_users": art.bias_out_users,
                   "bias.out_items": art.bias_out_items,
                   "user_groups": dataset.groups.astype(np.int64)}
        for i, w in enumerate(art.classifier_weights):
            tensors[f"classifier.{i}"] = w
        save_checkpoint(path, tensors, meta={"seed": seed, **cfg.to_dict()})
        for family, curve in art.curves.items():
            with open(os.path.join(out_dir, f"pretrain_seed{seed}_{family}.csv"),
                      "w") as fh:
                fh.write("epoch,metric,value\n")
                for epoch, name, value in curve:
                    fh.write(f"{epoch},{name},{value:.6f}\n")
        print(f"seed {seed}: pretraining artifacts -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    record = run_pipeline(cfg, cfg.out)
    os.makedirs(cfg.out, exist_ok=True)
    report_path = os.path.join(cfg.out, "experiment.json")
    with open(report_path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=2)
    for failure in record.failures:
        print(f"seed {failure['seed']} FAILED: {failure['error']}", file=sys.stderr)
    agg = record.aggregate()
    for k, entry in sorted(agg.items(), key=lambda kv: int(kv[0])):
        cells = []
        for name in ("recall", "ndcg", "dp", "eo"):
            m = entry[name]["mean"]
            s = entry[name]["std"]
            cells.append(f"{name}@{k}={m:.4f}+-{s:.4f}" if m is not None
                         else f"{name}@{k}=degenerate")
        print("  ".join(cells))
    print(f"record -> {report_path}")
    return 0 if record.reports else 1


def cmd_eval(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    cfg_keys = {f: meta[f] for f in meta if f not in ("seed", "best_epoch")}
    cfg = RunConfig(**{**cfg_keys,
                       "split_ratios": tuple(meta["split_ratios"]),
                       "ks": tuple(meta["ks"])})
    seed = int(meta["seed"])
    dataset = load_dataset(cfg, seed)
    split = split_dataset(dataset, cfg.split_ratios, seed)
    report = metrics.evaluate(tensors["debiased.out_users"],
                              tensors["debiased.out_items"],
                              per_user_items(split.train, dataset.M),
                              per_user_items(split.test, dataset.M),
                              dataset.groups, dataset.n_classes, cfg.ks)
    text = report.to_json(indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"report -> {args.out}")
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    grid = {}
    if args.lam_r_grid:
        grid["lam_r"] = [float(x) for x in args.lam_r_grid.split(",")]
    if args.lam_c_grid:
        grid["lam_c"] = [float(x) for x in args.lam_c_grid.split(",")]
    if args.lam_d_grid:
        grid["lam_d"] = [float(x) for x in args.lam_d_grid.split(",")]
    records = sweep(cfg, grid, cfg.out)
    os.makedirs(cfg.out, exist_ok=True)
    csv_path = os.path.join(cfg.out, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write(sweep_csv(records, list(cfg.ks)))
    print(f"{len(records)} sweep points -> {csv_path}")
    return 0


def export_embeddings(checkpoint_path: str, out_path: str):
    """Users TSV (id, d columns, group) plus an items file alongside."""
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(checkpoint_path)
    tensors, _ = load_checkpoint(checkpoint_path)
    users = tensors["debiased.out_users"]
    items = tensors["debiased.out_items"]
    groups = tensors["user_groups"]
    with open(out_path, "w") as fh:
        for u in range(users.shape[0]):
            vals = "\t".join(repr(float(x)) for x in users[u])
            fh.write(f"{u}\t{vals}\t{int(groups[u])}\n")
    items_path = out_path + ".items"
    with open(items_path, "w") as fh:
        for v in range(items.shape[0]):
            vals = "\t".join(repr(float(x)) for x in items[v])
            fh.write(f"{v}\t{vals}\n")
    return out_path, items_path


def cmd_export(args) -> int:
    upath, ipath = export_embeddings(args.checkpoint, args.out)
    print(f"users -> {upath}\nitems -> {ipath}")
    return 0


def _paired_pvalue(a, b):
    try:
        from scipy import stats
    except ImportError:
        return None
    if len(a) != len(b) or len(a) < 2:
        return None
    return float(stats.ttest_rel(a, b).pvalue)


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    results = {}
    for variant in variants:
        sub = build_config(args.config, {**_collect_overrides(args),
                                         "variant": variant})
        out_dir = os.path.join(cfg.out, variant)
        results[variant] = run_pipeline(sub, out_dir)
    k = str(cfg.select_k)
    print(f"variant      ndcg@{k}        dp@{k}          eo@{k}")
    for variant, rec in results.items():
        agg = rec.aggregate()
        row = [f"{variant:<12}"]
        for name in ("ndcg", "dp", "eo"):
            cell = agg.get(k, {}).get(name, {"mean": None, "std": None})
            row.append("degenerate    " if cell["mean"] is None
                       else f"{cell['mean']:.4f}+-{cell['std']:.4f}")
        print(" ".join(row))
    if "full" in results:
        base_reports = results["full"].reports
        for variant, rec in results.items():
            if variant == "full" or len(rec.reports) != len(base_reports):
                continue
            pv = _paired_pvalue(
                [r.per_k[int(k)]["ndcg"] for r in base_reports],
                [r.per_k[int(k)]["ndcg"] for r in rec.reports])
            if pv is not None:
                print(f"paired t-test ndcg@{k} full vs {variant}: p={pv:.4f}")
    os.makedirs(cfg.out, exist_ok=True)
    summary = {v: rec.to_dict() for v, rec in results.items()}
    with open(os.path.join(cfg.out, "ablation.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fairdda",
        description="Fairness-aware dual-augmentation recommender lab")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("pretrain", help="phase-1 training only")
    _add_common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = subs.add_parser("train", help="full pipeline across seeds")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="re-evaluate a training checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="report path (default stdout)")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("sweep", help="grid sweep over loss weights")
    _add_common(p)
    p.add_argument("--lam-r-grid", default="", dest="lam_r_grid")
    p.add_argument("--lam-c-grid", default="", dest="lam_c_grid")
    p.add_argument("--lam-d-grid", default="", dest="lam_d_grid")
    p.set_defaults(fn=cmd_sweep)

    p = subs.add_parser("export", help="dump embeddings + groups as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = subs.add_parser("ablate", help="run several variants and compare")
    _add_common(p)
    p.add_argument("--variants", default="full,no_dl,no_ep,no_fm,base")
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
