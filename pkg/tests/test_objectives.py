"""Loss terms: closed forms, scalar-loop oracles, HSIC statistics."""

import numpy as np
import pytest

import oracles as orc
from fairdda import diffcore as dc
from fairdda import objectives
from fairdda.encoder import EncoderOutput


def _out(xu, xv):
    return EncoderOutput(users=dc.constant(np.asarray(xu, dtype=np.float32)),
                         items=dc.constant(np.asarray(xv, dtype=np.float32)))


def _random_out(rng, m, n, d):
    return _out(rng.normal(size=(m, d)), rng.normal(size=(n, d)))


# ---------------------------------------------------------------------------
# ranking losses

def test_bpr_tied_scores_give_ln2():
    out = _out(np.ones((3, 4)), np.ones((5, 4)))
    users = np.array([0, 1, 2])
    loss = objectives.bpr_loss(out, users, np.array([0, 1, 2]),
                               np.array([3, 4, 0]))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-6)


def test_bpr_separated_scores_approach_zero():
    xu = np.ones((1, 2))
    xv = np.array([[10.0, 10.0], [-10.0, -10.0]])
    loss = objectives.bpr_loss(_out(xu, xv), np.array([0]), np.array([0]),
                               np.array([1]))
    assert loss.item() < 1e-6


def test_bpr_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    out = _random_out(rng, 9, 12, 6)
    users = rng.integers(9, size=20)
    pos = rng.integers(12, size=20)
    neg = rng.integers(12, size=20)
    got = objectives.bpr_loss(out, users, pos, neg).item()
    want = orc.bpr_oracle(out.users.data.astype(np.float64),
                          out.items.data.astype(np.float64), users, pos, neg)
    assert abs(got - want) < 1e-6


def test_recon_equals_bpr_on_same_view():
    rng = np.random.default_rng(1)
    out = _random_out(rng, 6, 8, 4)
    users = rng.integers(6, size=10)
    pos = rng.integers(8, size=10)
    neg = rng.integers(8, size=10)
    a = objectives.bpr_loss(out, users, pos, neg).item()
    b = objectives.recon_loss(out, users, pos, neg).item()
    assert a == b


# ---------------------------------------------------------------------------
# contrastive alignment

def test_contrastive_identical_views_single_direction():
    # all rows identical: sim = 1 everywhere, both denominator sums equal,
    # so each direction is log(2 e) - 1 = log 2
    x = dc.constant(np.tile(np.array([[1.0, 2.0]], dtype=np.float32), (5, 1)))
    val = objectives.contrastive_direction(x, x).item()
    assert val == pytest.approx(np.log(2.0), abs=1e-6)


def test_contrastive_total_degenerate_is_4ln2():
    x = np.tile(np.array([[0.5, -1.0, 2.0]], dtype=np.float32), (7, 1))
    out = _out(x, x.copy())
    val = objectives.contrastive_total(out, out).item()
    assert val == pytest.approx(4.0 * np.log(2.0), abs=1e-5)


def test_contrastive_single_row_closed_form():
    # M=1: loss = log((e^1 + e^1)/1) - 1 = log 2 per direction
    a = dc.constant(np.array([[3.0, 4.0]], dtype=np.float32))
    b = dc.constant(np.array([[3.0, 4.0]], dtype=np.float32))
    assert objectives.contrastive_direction(a, b).item() == pytest.approx(
        np.log(2.0), abs=1e-6)


def test_contrastive_direction_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(8, 5)).astype(np.float32)
    b = rng.normal(size=(8, 5)).astype(np.float32)
    got = objectives.contrastive_direction(dc.constant(a), dc.constant(b)).item()
    want = orc.contrastive_direction_oracle(a.astype(np.float64),
                                            b.astype(np.float64))
    assert abs(got - want) < 1e-6


def test_contrastive_total_matches_loop_oracle():
    rng = np.random.default_rng(3)
    out_d = _random_out(rng, 7, 9, 4)
    out_a = _random_out(rng, 7, 9, 4)
    got = objectives.contrastive_total(out_d, out_a).item()
    want = orc.contrastive_total_oracle(
        out_d.users.data.astype(np.float64), out_a.users.data.astype(np.float64),
        out_d.items.data.astype(np.float64), out_a.items.data.astype(np.float64))
    assert abs(got - want) < 1e-6


def test_contrastive_row_subset():
    rng = np.random.default_rng(4)
    out_d = _random_out(rng, 10, 10, 4)
    out_a = _random_out(rng, 10, 10, 4)
    rows = np.array([1, 4, 7])
    got = objectives.contrastive_total(out_d, out_a, user_rows=rows,
                                       item_rows=rows).item()
    want = orc.contrastive_total_oracle(
        out_d.users.data[rows].astype(np.float64),
        out_a.users.data[rows].astype(np.float64),
        out_d.items.data[rows].astype(np.float64),
        out_a.items.data[rows].astype(np.float64))
    assert abs(got - want) < 1e-6


def test_contrastive_alignment_beats_misalignment():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 6)).astype(np.float32)
    aligned = objectives.contrastive_direction(dc.constant(x),
                                               dc.constant(x)).item()
    shuffled = objectives.contrastive_direction(
        dc.constant(x), dc.constant(x[rng.permutation(20)])).item()
    assert aligned < shuffled


# ---------------------------------------------------------------------------
# HSIC

def test_rbf_gram_diag_and_range():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(9, 4)).astype(np.float32)
    k = dc.rbf_gram(dc.constant(x), 1.2)
    assert np.allclose(np.diag(k.data), 1.0, atol=1e-6)
    assert np.all(k.data > 0.0) and np.all(k.data <= 1.0 + 1e-7)
    assert np.allclose(k.data, k.data.T, atol=1e-7)


def test_rbf_gram_known_distance():
    x = np.array([[0.0], [2.0]], dtype=np.float32)
    k = dc.rbf_gram(dc.constant(x), np.sqrt(2.0))
    # d^2 = 4, 2 sigma^2 = 4 -> off-diagonal e^{-1}
    assert k.data[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-6)


def test_hsic_constant_input_is_zero():
    xa = np.ones((6, 3), dtype=np.float32)
    xb = np.random.default_rng(7).normal(size=(6, 3)).astype(np.float32)
    val = dc.hsic_value(xa, xb, 1.0, 1.0)
    assert abs(val) < 1e-12


def test_hsic_self_dependence_positive():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 4)).astype(np.float32)
    assert dc.hsic_value(x, x, 1.0, 1.0) > 0.0


def test_hsic_matches_bruteforce_double_sum():
    rng = np.random.default_rng(9)
    for m in (4, 6, 8):
        xa = rng.normal(size=(m, 3)).astype(np.float32)
        xb = rng.normal(size=(m, 5)).astype(np.float32)
        got = dc.hsic_value(xa, xb, 1.1, 0.8)
        want = orc.hsic_oracle(xa.astype(np.float64),
                               xb.astype(np.float64), 1.1, 0.8)
        assert abs(got - want) < 1e-8


def test_hsic_tape_matches_value_fn():
    rng = np.random.default_rng(10)
    xa = rng.normal(size=(7, 4)).astype(np.float32)
    xb = rng.normal(size=(7, 4)).astype(np.float32)
    t = dc.hsic_rbf(dc.constant(xa), dc.constant(xb), 1.3, 0.9)
    assert t.value64 == pytest.approx(dc.hsic_value(xa, xb, 1.3, 0.9),
                                      abs=1e-12)


def test_hsic_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(11)
    xa = rng.normal(size=(9, 3)).astype(np.float32)
    xb = rng.normal(size=(9, 3)).astype(np.float32)
    a = dc.hsic_value(xa, xb, 1.0, 1.0)
    b = dc.hsic_value(xb, xa, 1.0, 1.0)
    assert a == pytest.approx(b, abs=1e-12)
    perm = rng.permutation(9)
    c = dc.hsic_value(xa[perm], xb[perm], 1.0, 1.0)
    assert a == pytest.approx(c, abs=1e-10)


def test_hsic_detects_dependence():
    # identical views must clear the independence floor by a wide margin;
    # the floor is the biased-estimator null, which shrinks like 1/m
    rng = np.random.default_rng(12)
    m, d = 256, 16
    x = rng.normal(size=(m, d)).astype(np.float32)
    sa = dc.median_bandwidth(x)
    dependent = dc.hsic_value(x, x, sa, sa)
    nulls = []
    for s in range(10):
        y = np.random.default_rng(100 + s).normal(size=(m, d)).astype(np.float32)
        nulls.append(dc.hsic_value(x, y, sa, dc.median_bandwidth(y)))
    assert dependent > 8.0 * float(np.mean(nulls))


def test_median_bandwidth_matches_oracle():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(12, 5)).astype(np.float32)
    assert dc.median_bandwidth(x) == pytest.approx(
        orc.median_bandwidth_oracle(x.astype(np.float64)), rel=1e-6)


def test_median_bandwidth_degenerate_fallback():
    x = np.ones((5, 3), dtype=np.float32)
    assert dc.median_bandwidth(x) == 1.0


def test_debias_loss_needs_two_rows():
    rng = np.random.default_rng(14)
    xa = dc.constant(rng.normal(size=(5, 3)).astype(np.float32))
    with pytest.raises(ValueError):
        objectives.debias_loss(xa, rng.normal(size=(5, 3)).astype(np.float32),
                               np.array([2]))


def test_debias_loss_gradient_flows():
    rng = np.random.default_rng(15)
    p = dc.Parameter(rng.normal(size=(8, 4)).astype(np.float32))
    xb = rng.normal(size=(8, 4)).astype(np.float32)
    loss = objectives.debias_loss(p, xb, np.arange(8),
                                  bandwidth_policy="fixed", sigma_fixed=1.0)
    loss.backward()
    assert np.any(p.grad != 0.0)


def test_debias_edge_scope_filters_dropped_edges():
    rng = np.random.default_rng(16)
    xa = dc.constant(rng.normal(size=(6, 3)).astype(np.float32))
    xb = rng.normal(size=(6, 3)).astype(np.float32)
    edge_users = np.array([0, 1, 2, 3, 4, 5])
    retained = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    got = objectives.debias_loss_edge_scope(xa, xb, edge_users, retained,
                                            bandwidth_policy="fixed")
    want = objectives.debias_loss(xa, xb, np.array([0, 2, 3, 5]),
                                  bandwidth_policy="fixed")
    assert got.item() == want.item()


# ---------------------------------------------------------------------------
# composition

def _scalar(v):
    return dc.constant(np.array([[v]], dtype=np.float32))


def test_total_loss_zero_weights_reduce_to_bpr():
    total, bd = objectives.total_loss(_scalar(0.7), _scalar(0.3), _scalar(0.2),
                                      _scalar(0.1), 0.0, 0.0, 0.0)
    assert total.item() == pytest.approx(0.7, abs=1e-7)


def test_total_loss_none_terms_skipped():
    total, bd = objectives.total_loss(_scalar(0.7), None, None, None,
                                      1.0, 0.1, 30.0)
    assert total.item() == pytest.approx(0.7, abs=1e-7)
    assert bd.lam_r == 0.0 and bd.lam_c == 0.0 and bd.lam_d == 0.0
    assert bd.l_recon == 0.0 and bd.l_dl == 0.0


def test_total_loss_breakdown_identity():
    total, bd = objectives.total_loss(_scalar(0.5), _scalar(0.25),
                                      _scalar(4.0), _scalar(0.001),
                                      1.0, 0.1, 30.0)
    want = 0.5 + 1.0 * 0.25 + 0.1 * 4.0 + 30.0 * 0.001
    assert bd.l_all == pytest.approx(want, abs=1e-6)
    assert total.item() == pytest.approx(want, abs=1e-5)


def test_total_loss_negative_weight_rejected():
    with pytest.raises(ValueError):
        objectives.total_loss(_scalar(1.0), _scalar(1.0), None, None,
                              -1.0, 0.0, 0.0)


def test_breakdown_identity_enforced():
    with pytest.raises(ValueError):
        objectives.LossBreakdown(l_bpr=1.0, l_recon=0.0, l_cl=0.0, l_dl=0.0,
                                 lam_r=1.0, lam_c=1.0, lam_d=1.0, l_all=2.0)


def test_breakdown_csv_row():
    bd = objectives.LossBreakdown(l_bpr=0.5, l_recon=0.25, l_cl=4.0,
                                  l_dl=0.001, lam_r=1.0, lam_c=0.1,
                                  lam_d=30.0, l_all=1.18)
    row = bd.csv_row(3)
    assert row.startswith("3,0.500000,")
    assert len(row.split(",")) == 6
