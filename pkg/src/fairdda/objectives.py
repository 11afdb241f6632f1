"""Loss terms for the main training phase.

Pairwise ranking on the debiased view, the same ranking form on the
augmented view (reconstruction), a symmetric contrastive alignment between
the two views, and an HSIC dependence penalty between augmented and biased
user representations. All terms are tape ops, so one backward call covers
the whole objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import EncoderOutput

F32 = np.float32


def bpr_loss(out: EncoderOutput, users: np.ndarray, pos: np.ndarray,
             neg: np.ndarray) -> dc.Tensor:
    """Mean -ln sigmoid(x_u.x_v - x_u.x_j) over the triplet batch."""
    xu = dc.gather_rows(out.users, users)
    xv = dc.gather_rows(out.items, pos)
    xj = dc.gather_rows(out.items, neg)
    pos_s = dc.sum_rows(dc.mul(xu, xv))
    neg_s = dc.sum_rows(dc.mul(xu, xj))
    return dc.mean_all(dc.softplus(dc.sub(neg_s, pos_s)))


def recon_loss(aug_out: EncoderOutput, users: np.ndarray, pos: np.ndarray,
               neg: np.ndarray) -> dc.Tensor:
    """Graph reconstruction: the ranking loss evaluated on the augmented view,
    with triplets drawn from the ORIGINAL training interactions."""
    return bpr_loss(aug_out, users, pos, neg)


# ---------------------------------------------------------------------------
# contrastive alignment

def contrastive_direction(anchor: dc.Tensor, other: dc.Tensor) -> dc.Tensor:
    """-log exp(sim(anchor_u, other_u)) / ((1/M) sum_u' [exp(sim(anchor_u,
    other_u')) + exp(sim(anchor_u, anchor_u'))]), averaged over rows.

    Denominator includes the u'=u self terms and both view sums.
    """
    if anchor.shape != other.shape:
        raise ValueError("contrastive views must share shape")
    an = dc.row_l2_normalize(anchor)
    on = dc.row_l2_normalize(other)
    s_ao = dc.matmul_nt(an, on)
    s_aa = dc.matmul_nt(an, an)
    pos = dc.diag_part(s_ao)
    denom = dc.add(dc.row_mean(dc.exp(s_ao)), dc.row_mean(dc.exp(s_aa)))
    return dc.mean_all(dc.sub(dc.log(denom), pos))


def contrastive_total(out_d: EncoderOutput, out_a: EncoderOutput,
                      user_rows: np.ndarray | None = None,
                      item_rows: np.ndarray | None = None) -> dc.Tensor:
    """Symmetric user-side plus item-side contrastive loss.

    `user_rows` / `item_rows` restrict the loss to an in-batch subset at
    scale; None means the full population (the ground-truth form).
    """
    du, au = out_d.users, out_a.users
    di, ai = out_d.items, out_a.items
    if user_rows is not None:
        du, au = dc.gather_rows(du, user_rows), dc.gather_rows(au, user_rows)
    if item_rows is not None:
        di, ai = dc.gather_rows(di, item_rows), dc.gather_rows(ai, item_rows)
    user_side = dc.add(contrastive_direction(du, au), contrastive_direction(au, du))
    item_side = dc.add(contrastive_direction(di, ai), contrastive_direction(ai, di))
    return dc.add(user_side, item_side)


# ---------------------------------------------------------------------------
# HSIC debiasing

def debias_loss(aug_users: dc.Tensor, bias_users: np.ndarray,
                rows: np.ndarray, bandwidth_policy: str = "median",
                sigma_fixed: float = 1.0) -> dc.Tensor:
    """HSIC between augmented and frozen biased user rows (user side only).

    `rows` selects the distinct users of the mini-batch; bandwidths follow
    the median heuristic per batch unless the policy pins them.
    """
    if rows.size < 2:
        raise ValueError("HSIC needs at least 2 users in the batch")
    xa = dc.gather_rows(aug_users, rows)
    xb = np.ascontiguousarray(bias_users[rows], dtype=F32)
    if bandwidth_policy == "median":
        sa = dc.median_bandwidth(xa.data)
        sb = dc.median_bandwidth(xb)
    elif bandwidth_policy == "fixed":
        sa = sb = float(sigma_fixed)
    else:
        raise ValueError(f"unknown bandwidth policy {bandwidth_policy!r}")
    return dc.hsic_rbf(xa, dc.constant(xb), sa, sb)


def debias_loss_edge_scope(aug_users: dc.Tensor, bias_users: np.ndarray,
                           edge_users: np.ndarray, retained: np.ndarray,
                           bandwidth_policy: str = "median",
                           sigma_fixed: float = 1.0) -> dc.Tensor:
    """Literal estimator over retained interactions (one sample per kept
    edge); cubic in the edge count, so tiny datasets only."""
    rows = edge_users[retained > 0.5]
    if rows.size < 2:
        raise ValueError("fewer than 2 retained edges")
    return debias_loss(aug_users, bias_users, rows,
                       bandwidth_policy=bandwidth_policy, sigma_fixed=sigma_fixed)


# ---------------------------------------------------------------------------
# composition

@dataclass
class LossBreakdown:
    l_bpr: float
    l_recon: float
    l_cl: float
    l_dl: float
    lam_r: float
    lam_c: float
    lam_d: float
    l_all: float

    def __post_init__(self):
        expected = (self.l_bpr + self.lam_r * self.l_recon
                    + self.lam_c * self.l_cl + self.lam_d * self.l_dl)
        if abs(expected - self.l_all) > 1e-6:
            raise ValueError("loss breakdown does not sum to the total")

    def csv_row(self, step: int) -> str:
        return (f"{step},{self.l_bpr:.6f},{self.l_recon:.6f},"
                f"{self.l_cl:.6f},{self.l_dl:.6f},{self.l_all:.6f}")


def total_loss(l_bpr: dc.Tensor, l_recon: dc.Tensor | None,
               l_cl: dc.Tensor | None, l_dl: dc.Tensor | None,
               lam_r: float, lam_c: float, lam_d: float):
    """L_all = L_bpr + lam_r L_recon + lam_c L_cl + lam_d L_dl.

    Disabled terms are passed as None and skipped outright so they
    contribute exactly zero loss and zero gradient. Returns the scalar
    tensor and a LossBreakdown record.
    """
    for lam in (lam_r, lam_c, lam_d):
        if lam < 0:
            raise ValueError("loss weights must be non-negative")
    total = l_bpr
    if l_recon is not None and lam_r > 0:
        total = dc.add(total, dc.scale(l_recon, lam_r))
    if l_cl is not None and lam_c > 0:
        total = dc.add(total, dc.scale(l_cl, lam_c))
    if l_dl is not None and lam_d > 0:
        total = dc.add(total, dc.scale(l_dl, lam_d))
    eff_r = lam_r if l_recon is not None else 0.0
    eff_c = lam_c if l_cl is not None else 0.0
    eff_d = lam_d if l_dl is not None else 0.0
    parts = (l_bpr.item(),
             l_recon.item() if l_recon is not None else 0.0,
             l_cl.item() if l_cl is not None else 0.0,
             l_dl.item() if l_dl is not None else 0.0)
    breakdown = LossBreakdown(
        l_bpr=parts[0], l_recon=parts[1], l_cl=parts[2], l_dl=parts[3],
        lam_r=eff_r, lam_c=eff_c, lam_d=eff_d,
        l_all=parts[0] + eff_r * parts[1] + eff_c * parts[2] + eff_d * parts[3],
    )
    return total, breakdown
