"""Shared constructors for gradient-check and small-graph test instances.

Finite differences with a fixed step h are only valid when no kink of the
forward map (ReLU zero crossings, the retention clip at p = 1) lies within
the perturbation's reach.  The constructors here place those kinks at a
guaranteed distance: detector biases are re-centred into the widest gap of
their pre-activation column, and the reference ranks are built as the
detached debiased ranks plus signed offsets of at least 0.05.  The analytic
gradient is evaluated at the exact same instance, so this conditions the
finite-difference estimate, not the thing under test.
"""

import numpy as np

import oracles as orc
from fairdda import augment, objectives
from fairdda import diffcore as dc
from fairdda.encoder import propagate
from fairdda.graph import InteractionGraph, NormalizedAdjacency

FD_H = 1e-3
GRAD_TOL = 1e-3

F64 = np.float64


class FixedUniformSource:
    """Stands in for a Generator when the mask noise must stay fixed across
    repeated tape builds (finite differencing re-evaluates the forward)."""

    def __init__(self, u: np.ndarray):
        self._u = np.asarray(u, dtype=F64)

    def random(self, n: int) -> np.ndarray:
        if n != self._u.size:
            raise ValueError("unexpected draw size")
        return self._u.copy()


def random_bipartite(rng, n_users, n_items, per_user=3):
    """Graph where every user has `per_user` distinct items (ranks defined)."""
    pairs = set()
    for u in range(n_users):
        for v in rng.choice(n_items, size=per_user, replace=False):
            pairs.add((u, int(v)))
    edges = np.array(sorted(pairs), dtype=np.int64)
    return InteractionGraph(n_users, n_items, edges)


def _recenter_bias(det, inputs):
    """Shift each hidden-bias entry into the widest pre-activation gap.

    Guarantees min |pre-activation| >= 0.02 so an h = 1e-3 coordinate
    perturbation cannot cross the ReLU kink.
    """
    w1 = det.layers[0][0].data.astype(np.float64)
    b1 = det.layers[0][1].data.astype(np.float64).ravel()
    pre = inputs @ w1 + b1
    shift = np.zeros_like(b1)
    for j in range(b1.shape[0]):
        col = np.sort(pre[:, j])
        gaps = np.diff(col)
        k = int(np.argmax(gaps))
        mid = 0.5 * (col[k] + col[k + 1])
        half = 0.5 * gaps[k]
        if half < 0.02:
            # degenerate column, push past the extreme value instead
            mid = col[-1] + 0.1
            half = 0.1
        shift[j] = -mid
        assert half >= 0.02
    det.layers[0][1].data = (b1 + shift).astype(np.float32).reshape(1, -1)


class GradcheckInstance:
    """Everything needed to run one analytic-vs-FD comparison."""

    def __init__(self, seed, n_users=10, n_items=12, dim=8, n_layers=2,
                 tau=0.4, batch=16):
        rng = np.random.default_rng(seed)
        self.graph = random_bipartite(rng, n_users, n_items)
        self.adj = NormalizedAdjacency(self.graph)
        self.L = n_layers
        self.tau = tau
        self.xu0 = rng.normal(0.0, 0.5, (n_users, dim)).astype(np.float32)
        self.xv0 = rng.normal(0.0, 0.5, (n_items, dim)).astype(np.float32)
        self.xb_u = rng.normal(0.0, 0.5, (n_users, dim)).astype(np.float32)
        self.xb_v = rng.normal(0.0, 0.5, (n_items, dim)).astype(np.float32)
        self.detector = dc.FeedForwardNet([dim, dim, dim],
                                          np.random.default_rng(seed + 77),
                                          name="det", final_bias=False)

        out = propagate(self.adj, dc.constant(self.xu0),
                        dc.constant(self.xv0), self.L)
        det_in = np.concatenate([
            out.users.data.astype(np.float64) * self.xb_u.astype(np.float64),
            out.items.data.astype(np.float64) * self.xb_v.astype(np.float64)])
        _recenter_bias(self.detector, det_in)

        g = self.graph
        dr_d = augment.relative_ranks_numpy(out.users.data, out.items.data,
                                            g.u_idx, g.v_idx, g.M)
        r2 = np.random.default_rng(seed + 131)
        off = r2.uniform(0.05, 0.3, size=dr_d.shape[0])
        off *= r2.choice([-1.0, 1.0], size=dr_d.shape[0])
        self.dr_p = dr_d.astype(np.float64) + off

        n_edges = g.u_idx.shape[0]
        self.u = r2.random(n_edges)
        uc = np.clip(self.u, 1e-12, 1.0 - 1e-12)
        self.noise = np.log(uc) - np.log1p(-uc)

        sel = r2.integers(n_edges, size=batch)
        self.users = g.u_idx[sel].astype(np.int64)
        self.pos = g.v_idx[sel].astype(np.int64)
        self.neg = r2.integers(n_items, size=batch)
        self.rows = np.unique(self.users)

        self.dim = dim
        self.clf = dc.FeedForwardNet([dim, 2], np.random.default_rng(seed + 201),
                                     name="clf", final_bias=True)
        self.groups = (np.arange(n_users) % 2).astype(np.int64)
        self.lams = (1.0, 0.5, 2.0)
        self.a_dense = orc.dense_normalized_adjacency(n_users, n_items,
                                                      self.edges())
        self.edge_list = self.edges()

        # median bandwidths at the unperturbed point; the heuristic is a
        # stop-gradient, so both analytic and FD sides pin these values
        aug = self._augmented_default()
        self.sigma_a = dc.median_bandwidth(
            np.ascontiguousarray(aug.users.data[self.rows]))
        self.sigma_b = dc.median_bandwidth(
            np.ascontiguousarray(self.xb_u[self.rows]))

    def _augmented_default(self):
        out = propagate(self.adj, dc.constant(self.xu0),
                        dc.constant(self.xv0), self.L)
        aug, _ = augment.build_augmented_view(
            self.adj, dc.constant(self.xu0), dc.constant(self.xv0), out,
            self.dr_p, self.xb_u, self.xb_v, self.detector, self.L, self.tau,
            FixedUniformSource(self.u), sample_mode="soft")
        return aug

    def detector_weights64(self):
        return [self.detector.layers[0][0].data.astype(np.float64),
                self.detector.layers[0][1].data.astype(np.float64),
                self.detector.layers[1][0].data.astype(np.float64)]

    def edges(self):
        g = self.graph
        return [(int(a), int(b)) for a, b in zip(g.u_idx, g.v_idx)]


LOSS_NAMES = ("bpr", "ce", "recon", "cl", "dl", "total")

# which -> (lam_r, lam_c, lam_d); the plain ranking term is always on
_GATES = {"bpr": (0.0, 0.0, 0.0), "recon": (1.0, 0.0, 0.0),
          "cl": (0.0, 1.0, 0.0), "dl": (0.0, 0.0, 1.0)}


def default_values(inst: GradcheckInstance) -> dict:
    """Float64 copies of every differentiable parameter, keyed by name."""
    vals = {"users0": inst.xu0.astype(F64), "items0": inst.xv0.astype(F64)}
    for i, p in enumerate(inst.detector.parameters()):
        vals[f"det.{i}"] = p.data.astype(F64)
    for i, p in enumerate(inst.clf.parameters()):
        vals[f"clf.{i}"] = p.data.astype(F64)
    return vals


def _rebuild_ffn(widths, vals, prefix, final_bias):
    net = dc.FeedForwardNet(widths, np.random.default_rng(0), name=prefix,
                            final_bias=final_bias)
    for i, p in enumerate(net.parameters()):
        p.data = np.ascontiguousarray(vals[f"{prefix}.{i}"], dtype=np.float32)
    return net


def build_loss(inst: GradcheckInstance, which: str, vals: dict):
    """Package-side tape for one objective gate.

    Returns (scalar tensor, params dict). The augmented view uses the soft
    relaxation so the forward map stays differentiable end to end; the
    straight-through estimator's surrogate gradient is checked against this
    same relaxation separately.
    """
    users0 = dc.Parameter(np.ascontiguousarray(vals["users0"], np.float32),
                          name="users0")
    items0 = dc.Parameter(np.ascontiguousarray(vals["items0"], np.float32),
                          name="items0")
    params = {"users0": users0, "items0": items0}
    out = propagate(inst.adj, users0, items0, inst.L)
    l_bpr = objectives.bpr_loss(out, inst.users, inst.pos, inst.neg)
    if which == "bpr":
        return objectives.total_loss(l_bpr, None, None, None, 0, 0, 0)[0], params
    if which == "ce":
        clf = _rebuild_ffn([inst.dim, 2], vals, "clf", final_bias=True)
        params.update({f"clf.{i}": p for i, p in enumerate(clf.parameters())})
        return dc.softmax_cross_entropy(clf(out.users), inst.groups), params

    det = _rebuild_ffn([inst.dim] * 3, vals, "det", final_bias=False)
    params.update({f"det.{i}": p for i, p in enumerate(det.parameters())})
    aug, _ = augment.build_augmented_view(
        inst.adj, users0, items0, out, inst.dr_p, inst.xb_u, inst.xb_v,
        det, inst.L, inst.tau, FixedUniformSource(inst.u), sample_mode="soft")
    lam_r, lam_c, lam_d = _GATES.get(which, inst.lams)
    l_recon = (objectives.recon_loss(aug, inst.users, inst.pos, inst.neg)
               if lam_r > 0 else None)
    l_cl = objectives.contrastive_total(out, aug) if lam_c > 0 else None
    l_dl = None
    if lam_d > 0:
        xa = dc.gather_rows(aug.users, inst.rows)
        xb = np.ascontiguousarray(inst.xb_u[inst.rows], dtype=np.float32)
        l_dl = dc.hsic_rbf(xa, dc.constant(xb), inst.sigma_a, inst.sigma_b)
    total, _ = objectives.total_loss(l_bpr, l_recon, l_cl, l_dl,
                                     lam_r, lam_c, lam_d)
    return total, params


def forward64(inst: GradcheckInstance, which: str, vals: dict) -> float:
    """Float64 reference value of the same gate, built purely from oracles."""
    if which == "ce":
        xd_u, _ = orc.dense_propagate(inst.a_dense, vals["users0"],
                                      vals["items0"], inst.L)
        logits = xd_u @ vals["clf.0"] + vals["clf.1"]
        return orc.ce_oracle(logits, inst.groups)
    det_w = [vals["det.0"], vals["det.1"], vals["det.2"]]
    lam_r, lam_c, lam_d = _GATES.get(which, inst.lams)
    return orc.total_forward_oracle(
        inst.a_dense, inst.edge_list, vals["users0"], vals["items0"],
        inst.dr_p, inst.xb_u.astype(F64), inst.xb_v.astype(F64), det_w,
        inst.L, inst.tau, inst.noise, "logit",
        (inst.users, inst.pos, inst.neg), inst.rows,
        inst.sigma_a, inst.sigma_b, lam_r, lam_c, lam_d,
        use_ep=True, use_fm=True, use_dl=lam_d > 0,
        use_cl=lam_c > 0, use_recon=lam_r > 0)
