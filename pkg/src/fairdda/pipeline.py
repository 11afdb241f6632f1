"""End-to-end experiment pipeline: data -> pretrain -> main phase -> metrics.

The main phase optimizes the debiased layer-0 tables and the detector
network against the combined objective; the pretrained performance and
biased models stay frozen throughout (their arrays enter the tape only as
constants). Evaluation always propagates over the ORIGINAL training graph;
augmentation exists only inside the training forward pass.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment, diffcore as dc, metrics, objectives
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (Dataset, Split, generate_synthetic, load_canonical,
                   load_lastfm, load_movielens, per_user_items, split_dataset)
from .encoder import EmbeddingTable, init_embedding_table, propagate
from .graph import NormalizedAdjacency
from .pretrain import (PretrainArtifacts, build_train_graph, run_pretraining,
                       sample_triplets)

F32 = np.float32


@dataclass
class ExperimentRecord:
    config: dict
    reports: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: float = 0.0

    def aggregate(self) -> dict:
        return metrics.aggregate_reports(self.reports) if self.reports else {}

    def to_dict(self) -> dict:
        return {"config": self.config, "seeds": self.seeds,
                "per_seed": [r.to_dict() for r in self.reports],
                "aggregate": self.aggregate(), "failures": self.failures,
                "checkpoints": self.checkpoints,
                "wall_clock_sec": self.wall_clock}


def load_dataset(cfg: RunConfig, seed: int) -> Dataset:
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.synth_m, cfg.synth_n, cfg.synth_c,
                                  cfg.synth_bias, seed,
                                  n_per_user=cfg.synth_n_per_user,
                                  shared_frac=cfg.synth_shared_frac)
    root = cfg.resolved_data_dir()
    if cfg.dataset == "movielens":
        return load_movielens(root, sensitive=cfg.sensitive)
    if cfg.dataset == "lastfm":
        return load_lastfm(root)
    if cfg.dataset == "canonical":
        return load_canonical(root)
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


def _spawn_rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(4)
    return {name: np.random.Generator(np.random.PCG64(kid))
            for name, kid in zip(("pretrain", "main", "noise", "init"), kids)}


@dataclass
class MainPhaseResult:
    users0: np.ndarray
    items0: np.ndarray
    out_users: np.ndarray
    out_items: np.ndarray
    detector_weights: list
    curve: list
    loss_rows: list
    best_epoch: int


def _epoch_val_scores(adj, users0, items0, L, train_items, val_items, groups,
                      C, k):
    out = propagate(adj, dc.constant(users0), dc.constant(items0), L)
    table = metrics.topk_table(out.users.data, out.items.data, train_items, k)
    _, ndcg = metrics.recall_ndcg(table, val_items, k)
    try:
        dp = metrics.dp_at_k(table, groups, C, k, items0.shape[0])
    except (metrics.DegenerateDistributionError, ValueError):
        dp = None
    return ndcg, dp


def train_main_phase(dataset: Dataset, split: Split, cfg: RunConfig,
                     artifacts: PretrainArtifacts | None,
                     rngs: dict, adj: NormalizedAdjacency) -> MainPhaseResult:
    variant = cfg.variant
    use_ep = variant in ("full", "no_dl", "no_fm")
    use_fm = variant in ("full", "no_dl", "no_ep")
    use_dl = variant in ("full", "no_ep", "no_fm")
    use_cl = variant != "base"
    use_recon = variant != "base"
    if variant != "base" and artifacts is None:
        raise ValueError("non-base variants need pretraining artifacts")

    g = adj.graph
    batch_size = cfg.resolved_batch_size()
    train_sets = [set(int(v) for v in row)
                  for row in per_user_items(split.train, dataset.M)]
    train_items = per_user_items(split.train, dataset.M)
    val_items = per_user_items(split.val, dataset.M)
    has_val = split.val.shape[0] > 0
    steps = max(1, int(np.ceil(split.train.shape[0] / batch_size)))

    if variant == "base" or cfg.cold_start == "random" or artifacts is None:
        table = init_embedding_table(dataset.M, dataset.N, cfg.d,
                                     rngs["init"], "debiased")
    else:
        # warm start from the frozen performance tables so the first epoch's
        # relative ranks are meaningful
        table = EmbeddingTable(
            users=dc.Parameter(artifacts.perf_users0.copy(),
                               name="debiased.users", decay=True),
            items=dc.Parameter(artifacts.perf_items0.copy(),
                               name="debiased.items", decay=True),
            family="debiased")
    params = table.parameters()

    detector = None
    if use_fm:
        detector = dc.FeedForwardNet([cfg.d, cfg.d, cfg.d], rngs["init"],
                                     name="detector", final_bias=False)
        params = params + detector.parameters()

    dr_reference = None
    if use_ep:
        dr_reference = augment.relative_ranks_numpy(
            artifacts.perf_out_users, artifacts.perf_out_items,
            g.u_idx, g.v_idx, g.M)

    epoch_mask = None  # fixed per-epoch hard retention weights (refresh=epoch)
    loss_rows, curve = [], []
    best = {"score": -np.inf, "users": table.users.data.copy(),
            "items": table.items.data.copy(),
            "det": [w.data.copy() for w in detector.parameters()] if detector else [],
            "epoch": 0}
    bad_epochs = 0
    step_no = 0
    for epoch in range(1, cfg.epochs + 1):
        if use_ep and cfg.mask_refresh == "epoch":
            out_np = propagate(adj, dc.constant(table.users.data),
                               dc.constant(table.items.data), cfg.L)
            dr_d = augment.relative_ranks_numpy(out_np.users.data,
                                                out_np.items.data,
                                                g.u_idx, g.v_idx, g.M)
            p_np = augment.retention_probs_numpy(dr_d, dr_reference)
            epoch_mask = augment.sample_mask_hard(p_np, rngs["noise"])
        for _ in range(steps):
            step_no += 1
            batch = sample_triplets(split.train, train_sets, dataset.N,
                                    batch_size, rngs["main"])
            out_d = propagate(adj, table.users, table.items, cfg.L)
            l_bpr = objectives.bpr_loss(out_d, batch.users, batch.pos, batch.neg)
            l_recon = l_cl = l_dl = None
            if use_recon or use_cl or use_dl:
                if use_ep and cfg.mask_refresh == "epoch":
                    aug_out, _ = _augment_with_fixed_mask(
                        adj, table, out_d, epoch_mask, artifacts, detector,
                        cfg, use_fm)
                else:
                    aug_out, _ = augment.build_augmented_view(
                        adj, table.users, table.items, out_d, dr_reference,
                        artifacts.bias_out_users, artifacts.bias_out_items,
                        detector, cfg.L, cfg.tau, rngs["noise"],
                        noise_mode=cfg.noise_mode, sample_mode="st",
                        use_edge_prune=use_ep, use_feature_mask=use_fm)
                if use_recon:
                    l_recon = objectives.recon_loss(aug_out, batch.users,
                                                    batch.pos, batch.neg)
                if use_cl:
                    ur = ir = None
                    if cfg.contrastive_scope == "batch":
                        ur = np.unique(batch.users)
                        ir = np.unique(np.concatenate([batch.pos, batch.neg]))
                    l_cl = objectives.contrastive_total(out_d, aug_out, ur, ir)
                if use_dl:
                    rows = np.unique(batch.users)
                    l_dl = objectives.debias_loss(
                        aug_out.users, artifacts.bias_out_users, rows,
                        bandwidth_policy=cfg.bandwidth_policy,
                        sigma_fixed=cfg.sigma_fixed)
            total, breakdown = objectives.total_loss(
                l_bpr, l_recon, l_cl, l_dl, cfg.lam_r, cfg.lam_c, cfg.lam_d)
            for p in params:
                p.zero_grad()
            total.backward()
            dc.adam_step(params, cfg.lr, cfg.weight_decay)
            loss_rows.append(breakdown.csv_row(step_no))

        if has_val:
            ndcg, dp = _epoch_val_scores(adj, table.users.data, table.items.data,
                                         cfg.L, train_items, val_items,
                                         dataset.groups, dataset.n_classes,
                                         cfg.select_k)
            curve.append((epoch, "val_ndcg", ndcg))
            if dp is not None:
                curve.append((epoch, "val_dp", dp))
            accept = ndcg > best["score"]
            if cfg.select_rule == "dp-capped" and cfg.dp_cap >= 0 and dp is not None:
                accept = accept and dp <= cfg.dp_cap
            if accept:
                best = {"score": ndcg, "users": table.users.data.copy(),
                        "items": table.items.data.copy(),
                        "det": [w.data.copy() for w in detector.parameters()]
                               if detector else [],
                        "epoch": epoch}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
        else:
            best = {"score": 0.0, "users": table.users.data.copy(),
                    "items": table.items.data.copy(),
                    "det": [w.data.copy() for w in detector.parameters()]
                           if detector else [],
                    "epoch": epoch}

    table.users.data = best["users"]
    table.items.data = best["items"]
    if detector:
        for w, saved in zip(detector.parameters(), best["det"]):
            w.data = saved
    out = propagate(adj, dc.constant(table.users.data),
                    dc.constant(table.items.data), cfg.L)
    return MainPhaseResult(
        users0=table.users.data.copy(), items0=table.items.data.copy(),
        out_users=out.users.data.copy(), out_items=out.items.data.copy(),
        detector_weights=[w.data.copy() for w in detector.parameters()]
                         if detector else [],
        curve=curve, loss_rows=loss_rows, best_epoch=best["epoch"])


def _augment_with_fixed_mask(adj, table, out_d, epoch_mask, artifacts,
                             detector, cfg, use_fm):
    """Per-epoch refresh: the retention mask is a constant hard sample; only
    the feature-mask path (if any) stays differentiable."""
    edge_w = dc.constant(epoch_mask.reshape(-1, 1))
    if use_fm:
        f_u = augment.feature_mask(out_d.users,
                                   dc.constant(artifacts.bias_out_users), detector)
        f_v = augment.feature_mask(out_d.items,
                                   dc.constant(artifacts.bias_out_items), detector)
        x0_u = augment.augment_features(table.users, f_u)
        x0_v = augment.augment_features(table.items, f_v)
    else:
        x0_u, x0_v = table.users, table.items
    return propagate(adj, x0_u, x0_v, cfg.L, edge_w=edge_w), {}


def run_single(cfg: RunConfig, seed: int, out_dir: str | None = None):
    """One seeded end-to-end run; returns (MetricsReport, paths dict)."""
    rngs = _spawn_rngs(seed)
    dataset = load_dataset(cfg, seed)
    split = split_dataset(dataset, cfg.split_ratios, seed)
    adj = build_train_graph(dataset, split)

    artifacts = None
    if cfg.variant != "base":
        artifacts = run_pretraining(dataset, split, cfg, rngs["pretrain"], adj)

    result = train_main_phase(dataset, split, cfg, artifacts, rngs, adj)

    train_items = per_user_items(split.train, dataset.M)
    test_items = per_user_items(split.test, dataset.M)
    report = metrics.evaluate(result.out_users, result.out_items, train_items,
                              test_items, dataset.groups, dataset.n_classes,
                              cfg.ks)

    paths = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, f"seed{seed}.ckpt")
        tensors = {"debiased.users0": result.users0,
                   "debiased.items0": result.items0,
                   "debiased.out_users": result.out_users,
                   "debiased.out_items": result.out_items,
                   "user_groups": dataset.groups.astype(np.int64)}
        for i, w in enumerate(result.detector_weights):
            tensors[f"detector.{i}"] = w
        save_checkpoint(ckpt, tensors,
                        meta={"seed": seed, "best_epoch": result.best_epoch,
                              **cfg.to_dict()})
        paths["checkpoint"] = ckpt
        loss_path = os.path.join(out_dir, f"seed{seed}_loss.csv")
        with open(loss_path, "w") as fh:
            fh.write("step,L_bpr,L_recon,L_cl,L_dl,L_all\n")
            for row in result.loss_rows:
                fh.write(row + "\n")
        paths["loss_log"] = loss_path
        report_path = os.path.join(out_dir, f"seed{seed}_report.json")
        with open(report_path, "w") as fh:
            fh.write(report.to_json(indent=2))
        paths["report"] = report_path
        curve_path = os.path.join(out_dir, f"seed{seed}_curve.csv")
        with open(curve_path, "w") as fh:
            fh.write("epoch,metric,value\n")
            for epoch, name, value in result.curve:
                fh.write(f"{epoch},{name},{value:.6f}\n")
        paths["curve"] = curve_path
    return report, paths


def run_pipeline(cfg: RunConfig, out_dir: str | None = None) -> ExperimentRecord:
    """All seeds; a failing seed is logged and skipped, the rest continue."""
    start = time.time()
    record = ExperimentRecord(config=cfg.to_dict())
    for seed in cfg.seeds():
        try:
            report, paths = run_single(cfg, seed, out_dir)
        except Exception as exc:  # noqa: BLE001 - seed isolation is the contract
            record.failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        record.seeds.append(seed)
        record.reports.append(report)
        if "checkpoint" in paths:
            record.checkpoints.append(paths["checkpoint"])
    record.wall_clock = time.time() - start
    return record


def sweep(cfg: RunConfig, grid: dict, out_dir: str | None = None):
    """Grid sweep over objective weights; one pipeline run per point."""
    names = [k for k in ("lam_r", "lam_c", "lam_d") if k in grid and grid[k]]
    if not names:
        raise ValueError("empty sweep grid")
    points = [{}]
    for name in names:
        points = [dict(pt, **{name: v}) for pt in points for v in grid[name]]
    records = []
    for i, pt in enumerate(points):
        sub = RunConfig(**{**cfg.to_dict(), **pt,
                           "split_ratios": cfg.split_ratios, "ks": cfg.ks})
        sub_dir = os.path.join(out_dir, f"point{i:03d}") if out_dir else None
        records.append((pt, run_pipeline(sub, sub_dir)))
    return records


def sweep_csv(records, ks) -> str:
    lines = ["lam_r,lam_c,lam_d," + ",".join(
        f"{m}@{k}_{s}" for k in ks for m in ("ndcg", "recall", "dp", "eo")
        for s in ("mean", "std"))]
    for pt, rec in records:
        cfg = rec.config
        agg = rec.aggregate()
        row = [str(pt.get("lam_r", cfg["lam_r"])),
               str(pt.get("lam_c", cfg["lam_c"])),
               str(pt.get("lam_d", cfg["lam_d"]))]
        for k in ks:
            for m in ("ndcg", "recall", "dp", "eo"):
                cell = agg.get(str(k), {}).get(m, {"mean": None, "std": None})
                row.append("" if cell["mean"] is None else f"{cell['mean']:.6f}")
                row.append("" if cell["std"] is None else f"{cell['std']:.6f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
