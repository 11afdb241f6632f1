"""Ranking utility and group-fairness metrics over top-K recommendations.

Scores are dot products of final user/item representations; training items
are excluded from candidacy and ties break toward the smaller item id so
tables are deterministic. Fairness metrics compare L1-normalized group
exposure (DP) or group hit (EO) distributions with the natural-log
Jensen-Shannon divergence, generalized to C > 2 groups as the mean over
unordered group pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


class DegenerateDistributionError(ValueError):
    """A group produced an all-zero exposure/hit vector; JSD is undefined."""


def topk_table(xu: np.ndarray, xv: np.ndarray, train_items, K: int,
               chunk: int = 512) -> np.ndarray:
    """(M,K) table of recommended item ids, -1 padded, training items excluded.

    `train_items` is a per-user sequence of item arrays to exclude.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    M = xu.shape[0]
    N = xv.shape[0]
    table = np.full((M, min(K, N)), -1, dtype=np.int64)
    for lo in range(0, M, chunk):
        hi = min(lo + chunk, M)
        scores = xu[lo:hi] @ xv.T
        for r, u in enumerate(range(lo, hi)):
            excl = train_items[u]
            if len(excl):
                scores[r, excl] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")
        for r, u in enumerate(range(lo, hi)):
            row = order[r]
            keep = row[np.isfinite(scores[r, row])][:K]
            table[u, :keep.size] = keep
    return table


def recall_ndcg(table: np.ndarray, test_items, K: int):
    """Mean Recall@K and NDCG@K over users with a nonempty test set.

    Binary gains, log2 discounts, ideal DCG over min(K, |test|).
    """
    recalls, ndcgs = [], []
    discounts = 1.0 / np.log2(np.arange(2, K + 2))
    for u in range(table.shape[0]):
        rel = test_items[u]
        if len(rel) == 0:
            continue
        relset = set(int(v) for v in rel)
        top = table[u, :K]
        hits = np.array([1.0 if int(v) in relset and v >= 0 else 0.0 for v in top])
        n_top = top[top >= 0].size
        recalls.append(hits.sum() / len(relset))
        idcg = discounts[:min(K, len(relset))].sum()
        dcg = (hits[:n_top] * discounts[:n_top]).sum() if n_top else 0.0
        ndcgs.append(dcg / idcg)
    if not recalls:
        raise ValueError("no evaluable users (all test sets empty)")
    return float(np.mean(recalls)), float(np.mean(ndcgs))


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence, natural log, 0*log0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative probability mass")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must sum to 1")
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def _group_vectors(table: np.ndarray, groups: np.ndarray, C: int, K: int,
                   N: int, test_items=None) -> np.ndarray:
    """(C,N) matrix of per-group item fractions; rows f_{G_s} (DP) when
    test_items is None, else hit fractions d_{G_s} (EO)."""
    counts = np.zeros((C, N), dtype=np.float64)
    sizes = np.bincount(groups, minlength=C).astype(np.float64)
    if np.any(sizes == 0):
        raise ValueError("every group must be nonempty")
    for u in range(table.shape[0]):
        top = table[u, :K]
        top = top[top >= 0]
        if test_items is not None:
            rel = set(int(v) for v in test_items[u])
            top = np.array([v for v in top if int(v) in rel], dtype=np.int64)
        if top.size:
            counts[groups[u], top] += 1.0
    return counts / sizes[:, None]


def _mean_pairwise_jsd(vectors: np.ndarray) -> float:
    C = vectors.shape[0]
    dists = []
    for s in range(C):
        tot = vectors[s].sum()
        if tot <= 0:
            raise DegenerateDistributionError(f"group {s} has an empty vector")
        dists.append(vectors[s] / tot)
    vals = [jsd(dists[a], dists[b]) for a in range(C) for b in range(a + 1, C)]
    return float(np.mean(vals))


def dp_at_k(table: np.ndarray, groups: np.ndarray, C: int, K: int, N: int) -> float:
    """Divergence of group-level exposure distributions over top-K lists."""
    return _mean_pairwise_jsd(_group_vectors(table, groups, C, K, N))


def eo_at_k(table: np.ndarray, test_items, groups: np.ndarray, C: int, K: int,
            N: int) -> float:
    """Divergence of group-level hit distributions (items in both the top-K
    list and the user's held-out set)."""
    return _mean_pairwise_jsd(_group_vectors(table, groups, C, K, N, test_items))


# ---------------------------------------------------------------------------
# report plumbing

@dataclass
class MetricsReport:
    per_k: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {"metrics": {str(k): v for k, v in sorted(self.per_k.items())},
                "flags": list(self.flags)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def evaluate(xu: np.ndarray, xv: np.ndarray, train_items, test_items,
             groups: np.ndarray, C: int, ks) -> MetricsReport:
    """Score, rank, and compute all four metrics at each K.

    Degenerate fairness cases (a group with no exposure/hits) are flagged
    and reported as null rather than aborting the run.
    """
    ks = sorted(set(int(k) for k in ks))
    N = xv.shape[0]
    table = topk_table(xu, xv, train_items, max(ks))
    report = MetricsReport()
    for k in ks:
        recall, ndcg = recall_ndcg(table, test_items, k)
        entry = {"recall": recall, "ndcg": ndcg, "dp": None, "eo": None}
        try:
            entry["dp"] = dp_at_k(table, groups, C, k, N)
        except DegenerateDistributionError as exc:
            report.flags.append(f"dp@{k}: {exc}")
        try:
            entry["eo"] = eo_at_k(table, test_items, groups, C, k, N)
        except DegenerateDistributionError as exc:
            report.flags.append(f"eo@{k}: {exc}")
        report.per_k[k] = entry
    return report


def aggregate_reports(reports) -> dict:
    """Mean/std per metric per K across seed runs; None values are skipped."""
    if not reports:
        raise ValueError("no reports to aggregate")
    ks = sorted(reports[0].per_k)
    agg = {}
    for k in ks:
        agg[str(k)] = {}
        for name in ("recall", "ndcg", "dp", "eo"):
            vals = [r.per_k[k][name] for r in reports
                    if k in r.per_k and r.per_k[k][name] is not None]
            if vals:
                agg[str(k)][name] = {"mean": float(np.mean(vals)),
                                     "std": float(np.std(vals)),
                                     "n": len(vals)}
            else:
                agg[str(k)][name] = {"mean": None, "std": None, "n": 0}
    return agg
