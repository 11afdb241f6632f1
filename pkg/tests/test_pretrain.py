"""Triplet sampling and the two pretraining phases."""

import numpy as np
import pytest
from scipy import stats

from fairdda import metrics
from fairdda.config import build_config
from fairdda.data import generate_synthetic, per_user_items, split_dataset
from fairdda.pretrain import (build_train_graph, run_pretraining,
                              sample_triplets, train_biased, train_performance)


def _cfg(**kw):
    base = dict(dataset="synthetic", d=8, L=2, lr=0.01, weight_decay=0.0,
                batch_size=64, pretrain_epochs=5, pretrain_patience=5,
                epochs=1, select_k=5)
    base.update(kw)
    return build_config(overrides=base)


def _small_setup(seed=0, M=30, N=25):
    ds = generate_synthetic(M, N, 2, 0.6, seed=seed, n_per_user=18)
    sp = split_dataset(ds, (0.8, 0.1, 0.1), seed=seed)
    assert sp.val.shape[0] > 0
    return ds, sp


def test_triplets_are_valid():
    ds, sp = _small_setup()
    train_sets = [set(map(int, it)) for it in per_user_items(sp.train, ds.M)]
    rng = np.random.default_rng(0)
    batch = sample_triplets(sp.train, train_sets, ds.N, 200, rng)
    train_pairs = {(int(u), int(v)) for u, v in sp.train}
    for u, p, n in zip(batch.users, batch.pos, batch.neg):
        assert (int(u), int(p)) in train_pairs
        assert int(n) not in train_sets[u]


def test_triplets_deterministic():
    ds, sp = _small_setup()
    train_sets = [set(map(int, it)) for it in per_user_items(sp.train, ds.M)]
    a = sample_triplets(sp.train, train_sets, ds.N, 50, np.random.default_rng(7))
    b = sample_triplets(sp.train, train_sets, ds.N, 50, np.random.default_rng(7))
    assert np.array_equal(a.users, b.users)
    assert np.array_equal(a.pos, b.pos)
    assert np.array_equal(a.neg, b.neg)


def test_triplet_negatives_uniform_over_complement():
    # single user with 5 of 20 items leaves 15 candidate negatives
    train = np.array([[0, v] for v in range(5)])
    train_sets = [set(range(5))]
    rng = np.random.default_rng(1)
    batch = sample_triplets(train, train_sets, 20, 100_000, rng)
    counts = np.bincount(batch.neg, minlength=20)
    assert np.all(counts[:5] == 0)
    chi2 = ((counts[5:] - 100_000 / 15.0) ** 2 / (100_000 / 15.0)).sum()
    # 14 dof, 99.9th percentile ~ 36.1
    assert chi2 < stats.chi2.ppf(0.999, 14)


def test_triplet_saturated_user_swapped_out():
    # user 0 interacts with every item and can never receive a negative
    train = np.array([[0, 0], [0, 1], [1, 0]])
    train_sets = [{0, 1}, {0}]
    rng = np.random.default_rng(2)
    batch = sample_triplets(train, train_sets, 2, 50, rng)
    assert np.all(batch.users == 1)
    assert np.all(batch.neg == 1)


def test_triplet_all_saturated_rejected():
    train = np.array([[0, 0], [0, 1]])
    train_sets = [{0, 1}]
    with pytest.raises(ValueError):
        sample_triplets(train, train_sets, 2, 4, np.random.default_rng(3))


def test_performance_training_improves_val_ndcg():
    ds, sp = _small_setup(seed=4)
    cfg = _cfg(pretrain_epochs=15)
    adj = build_train_graph(ds, sp)
    train_items = per_user_items(sp.train, ds.M)
    val_items = per_user_items(sp.val, ds.M)

    def ndcg_of(users, items):
        tab = metrics.topk_table(users, items, train_items, 5)
        return metrics.recall_ndcg(tab, val_items, 5)[1]

    rng = np.random.default_rng(11)
    table, out, curve = train_performance(ds, sp, cfg, rng, adj)
    from fairdda.encoder import init_embedding_table, propagate
    from fairdda import diffcore as dc
    fresh = init_embedding_table(ds.M, ds.N, cfg.d, np.random.default_rng(11),
                                 "performance")
    fresh_out = propagate(adj, dc.constant(fresh.users.data),
                          dc.constant(fresh.items.data), cfg.L)
    trained = ndcg_of(out.users.data, out.items.data)
    untrained = ndcg_of(fresh_out.users.data, fresh_out.items.data)
    assert trained > untrained
    assert len(curve) >= 1
    assert all(tag == "val_ndcg" for _, tag, _ in curve)


def test_performance_restores_best_epoch():
    ds, sp = _small_setup(seed=5)
    cfg = _cfg(pretrain_epochs=8, pretrain_patience=2)
    rng = np.random.default_rng(12)
    table, out, curve = train_performance(ds, sp, cfg, rng)
    scores = [s for _, _, s in curve]
    best = max(scores)
    train_items = per_user_items(sp.train, ds.M)
    val_items = per_user_items(sp.val, ds.M)
    tab = metrics.topk_table(out.users.data, out.items.data, train_items,
                             cfg.select_k)
    restored = metrics.recall_ndcg(tab, val_items, cfg.select_k)[1]
    assert restored == pytest.approx(best, abs=1e-7)


def test_biased_training_learns_separable_groups():
    ds, sp = _small_setup(seed=6, M=40)
    cfg = _cfg(pretrain_epochs=160, lr=0.05, L=1)
    rng = np.random.default_rng(13)
    table, classifier, out, curve = train_biased(ds, sp, cfg, rng)
    final_acc = max(acc for _, _, acc in curve)
    # planted bias makes groups separable from interactions
    assert final_acc >= 0.9


def test_biased_single_class_rejected():
    ds, sp = _small_setup(seed=7)
    ds.groups[:] = 0
    cfg = _cfg()
    with pytest.raises(ValueError, match="single class"):
        train_biased(ds, sp, cfg, np.random.default_rng(0))


def test_biased_many_class_attribute_is_finite():
    # 21-class attribute with few users per class still trains
    ds, sp = _small_setup(seed=8, M=45)
    ds.groups = (np.arange(ds.M) % 21).astype(np.int64)
    ds.n_classes = 21
    cfg = _cfg(pretrain_epochs=3)
    table, classifier, out, curve = train_biased(ds, sp, cfg,
                                                 np.random.default_rng(1))
    assert all(np.isfinite(acc) for _, _, acc in curve)


def test_run_pretraining_artifact_shapes():
    ds, sp = _small_setup(seed=9)
    cfg = _cfg(pretrain_epochs=2)
    art = run_pretraining(ds, sp, cfg, np.random.default_rng(2))
    assert art.perf_users0.shape == (ds.M, cfg.d)
    assert art.perf_out_items.shape == (ds.N, cfg.d)
    assert art.bias_users0.shape == (ds.M, cfg.d)
    assert len(art.classifier_weights) == 2
    assert set(art.curves) == {"performance", "biased"}
    # the two families start from different draws
    assert not np.array_equal(art.perf_users0, art.bias_users0)


def test_run_pretraining_deterministic():
    ds, sp = _small_setup(seed=10)
    cfg = _cfg(pretrain_epochs=2)
    a = run_pretraining(ds, sp, cfg, np.random.default_rng(3))
    b = run_pretraining(ds, sp, cfg, np.random.default_rng(3))
    assert np.array_equal(a.perf_out_users, b.perf_out_users)
    assert np.array_equal(a.bias_out_items, b.bias_out_items)
