"""Phase 1: train the performance model (ranking utility) and the biased
model (sensitive-attribute capture), then freeze both.

The performance model minimizes the pairwise ranking loss and early-stops
on validation NDCG@10. The biased model minimizes attribute cross entropy
through the propagated user representations jointly over its layer-0
tables and the one-layer classifier; item embeddings receive gradients only
through propagation. Both checkpoints are taken at the best epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import metrics
from .data import Dataset, Split, per_user_items
from .encoder import EmbeddingTable, init_embedding_table, propagate
from .graph import InteractionGraph, NormalizedAdjacency
from .objectives import bpr_loss


@dataclass
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    @property
    def size(self) -> int:
        return self.users.size


@dataclass
class PretrainArtifacts:
    """Frozen outcome of phase 1 (plain arrays, nothing on any tape)."""

    perf_users0: np.ndarray | None = None
    perf_items0: np.ndarray | None = None
    perf_out_users: np.ndarray | None = None
    perf_out_items: np.ndarray | None = None
    bias_users0: np.ndarray | None = None
    bias_items0: np.ndarray | None = None
    bias_out_users: np.ndarray | None = None
    bias_out_items: np.ndarray | None = None
    classifier_weights: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)


def sample_triplets(train_pairs: np.ndarray, train_sets, N: int,
                    batch_size: int, rng: np.random.Generator) -> TripletBatch:
    """Uniform positives from the train interactions, one uniform negative
    each (rejection-sampled from the non-interacted items)."""
    E = train_pairs.shape[0]
    if E == 0:
        raise ValueError("empty training set")
    idx = rng.integers(E, size=batch_size)
    users = train_pairs[idx, 0].copy()
    pos = train_pairs[idx, 1].copy()
    # users interacting with every item can never get a negative; swap them out
    for i in range(batch_size):
        tries = 0
        while len(train_sets[users[i]]) >= N:
            j = int(rng.integers(E))
            users[i] = train_pairs[j, 0]
            pos[i] = train_pairs[j, 1]
            tries += 1
            if tries > 10 * E:
                raise ValueError("no user has a non-interacted item")
    neg = rng.integers(N, size=batch_size)
    bad = np.array([neg[i] in train_sets[users[i]] for i in range(batch_size)])
    while np.any(bad):
        redraw = rng.integers(N, size=int(bad.sum()))
        neg[bad] = redraw
        bad = np.array([neg[i] in train_sets[users[i]] for i in range(batch_size)])
    return TripletBatch(users=users, pos=pos, neg=neg)


def build_train_graph(dataset: Dataset, split: Split) -> NormalizedAdjacency:
    graph = InteractionGraph(dataset.M, dataset.N, split.train)
    return NormalizedAdjacency(graph)


def _val_ndcg(adj, table: EmbeddingTable, L: int, train_items, val_items,
              k: int) -> float:
    out = propagate(adj, dc.constant(table.users.data), dc.constant(table.items.data), L)
    tab = metrics.topk_table(out.users.data, out.items.data, train_items, k)
    _, ndcg = metrics.recall_ndcg(tab, val_items, k)
    return ndcg


def train_performance(dataset: Dataset, split: Split, cfg,
                      rng: np.random.Generator,
                      adj: NormalizedAdjacency | None = None):
    """BPR training of the performance family; returns (table, outputs, curve)."""
    if adj is None:
        adj = build_train_graph(dataset, split)
    table = init_embedding_table(dataset.M, dataset.N, cfg.d, rng, "performance")
    train_sets = [set(int(v) for v in items)
                  for items in per_user_items(split.train, dataset.M)]
    train_items = per_user_items(split.train, dataset.M)
    val_items = per_user_items(split.val, dataset.M)
    has_val = split.val.shape[0] > 0
    steps = max(1, int(np.ceil(split.train.shape[0] / cfg.batch_size)))

    best = {"metric": -np.inf, "users": table.users.data.copy(),
            "items": table.items.data.copy(), "epoch": 0}
    curve = []
    bad_epochs = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        for _ in range(steps):
            batch = sample_triplets(split.train, train_sets, dataset.N,
                                    cfg.batch_size, rng)
            out = propagate(adj, table.users, table.items, cfg.L)
            loss = bpr_loss(out, batch.users, batch.pos, batch.neg)
            for p in table.parameters():
                p.zero_grad()
            loss.backward()
            dc.adam_step(table.parameters(), cfg.lr, cfg.weight_decay)
        if has_val:
            score = _val_ndcg(adj, table, cfg.L, train_items, val_items,
                              cfg.select_k)
            curve.append((epoch, "val_ndcg", score))
            if score > best["metric"]:
                best = {"metric": score, "users": table.users.data.copy(),
                        "items": table.items.data.copy(), "epoch": epoch}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.pretrain_patience:
                    break
        else:
            best = {"metric": 0.0, "users": table.users.data.copy(),
                    "items": table.items.data.copy(), "epoch": epoch}
    table.users.data = best["users"]
    table.items.data = best["items"]
    out = propagate(adj, dc.constant(table.users.data),
                    dc.constant(table.items.data), cfg.L)
    return table, out, curve


def train_biased(dataset: Dataset, split: Split, cfg, rng: np.random.Generator,
                 adj: NormalizedAdjacency | None = None):
    """Attribute-CE training of the biased family plus its classifier."""
    if np.unique(dataset.groups).size < 2:
        raise ValueError("attribute data has a single class; CE is degenerate")
    if adj is None:
        adj = build_train_graph(dataset, split)
    table = init_embedding_table(dataset.M, dataset.N, cfg.d, rng, "biased")
    classifier = dc.FeedForwardNet([cfg.d, dataset.n_classes], rng, name="classifier")
    params = table.parameters() + classifier.parameters()
    labels = dataset.groups.astype(np.int64)

    best = {"acc": -1.0, "users": None, "items": None,
            "clf": None, "epoch": 0}
    curve = []
    bad_epochs = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        out = propagate(adj, table.users, table.items, cfg.L)
        logits = classifier(out.users)
        loss = dc.softmax_cross_entropy(logits, labels)
        for p in params:
            p.zero_grad()
        loss.backward()
        dc.adam_step(params, cfg.lr, cfg.weight_decay)

        acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
        curve.append((epoch, "attr_acc", acc))
        if acc > best["acc"]:
            best = {"acc": acc, "users": table.users.data.copy(),
                    "items": table.items.data.copy(),
                    "clf": [w.data.copy() for w in classifier.parameters()],
                    "epoch": epoch}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.pretrain_patience:
                break
    table.users.data = best["users"]
    table.items.data = best["items"]
    for w, saved in zip(classifier.parameters(), best["clf"]):
        w.data = saved
    out = propagate(adj, dc.constant(table.users.data),
                    dc.constant(table.items.data), cfg.L)
    return table, classifier, out, curve


def run_pretraining(dataset: Dataset, split: Split, cfg,
                    rng: np.random.Generator,
                    adj: NormalizedAdjacency | None = None) -> PretrainArtifacts:
    if adj is None:
        adj = build_train_graph(dataset, split)
    perf_table, perf_out, perf_curve = train_performance(dataset, split, cfg, rng, adj)
    bias_table, classifier, bias_out, bias_curve = train_biased(dataset, split,
                                                                cfg, rng, adj)
    return PretrainArtifacts(
        perf_users0=perf_table.users.data.copy(),
        perf_items0=perf_table.items.data.copy(),
        perf_out_users=perf_out.users.data.copy(),
        perf_out_items=perf_out.items.data.copy(),
        bias_users0=bias_table.users.data.copy(),
        bias_items0=bias_table.items.data.copy(),
        bias_out_users=bias_out.users.data.copy(),
        bias_out_items=bias_out.items.data.copy(),
        classifier_weights=[w.data.copy() for w in classifier.parameters()],
        curves={"performance": perf_curve, "biased": bias_curve},
    )
