"""Fairness-aware dual augmentation: sensitive-edge pruning and
sensitive-feature masking.

Edge pruning scores every training edge under the current debiased model
and the frozen pretrained performance model; edges whose item ranks lower
under the debiased model get a retention probability below 1 and are
stochastically dropped through a binary-concrete relaxation with
straight-through rounding. Feature masking shrinks embedding dimensions
where the debiased and biased representations agree, via a shared detector
network.

Tape functions here are thin compositions of diffcore ops so the whole
augmented view stays differentiable w.r.t. the debiased layer-0 tables and
the detector weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import EncoderOutput, propagate
from .graph import NormalizedAdjacency

F32 = np.float32


# ---------------------------------------------------------------------------
# relative ranking of training edges

def edge_scores(out: EncoderOutput, u_idx: np.ndarray, v_idx: np.ndarray) -> dc.Tensor:
    """Per-edge interaction scores sigmoid(x_u . x_v), shape (E,1)."""
    xu = dc.gather_rows(out.users, u_idx)
    xv = dc.gather_rows(out.items, v_idx)
    return dc.sigmoid(dc.sum_rows(dc.mul(xu, xv)))


def relative_ranks(out: EncoderOutput, u_idx: np.ndarray, v_idx: np.ndarray,
                   M: int) -> dc.Tensor:
    """Score of each edge minus the mean score over the user's edges."""
    return dc.subtract_segment_mean(edge_scores(out, u_idx, v_idx), u_idx, M)


def relative_ranks_numpy(xu: np.ndarray, xv: np.ndarray, u_idx: np.ndarray,
                         v_idx: np.ndarray, M: int) -> np.ndarray:
    out = EncoderOutput(users=dc.constant(xu), items=dc.constant(xv))
    return relative_ranks(out, u_idx, v_idx, M).data[:, 0].copy()


def retention_probs(dr_debiased: dc.Tensor, dr_reference: np.ndarray) -> dc.Tensor:
    """p = exp(dr_debiased - dr_reference) clipped from above at 1.

    p is the probability the edge is RETAINED: items the debiased model
    ranks lower than the reference model (negative gap) become droppable.
    """
    ref = dc.constant(dr_reference.reshape(-1, 1))
    return dc.min_const(dc.exp(dc.sub(dr_debiased, ref)), 1.0)


def retention_probs_numpy(dr_debiased: np.ndarray, dr_reference: np.ndarray) -> np.ndarray:
    return np.minimum(np.exp(dr_debiased.astype(np.float64)
                             - dr_reference.astype(np.float64)), 1.0).astype(F32)


# ---------------------------------------------------------------------------
# mask sampling

def draw_noise(rng: np.random.Generator, n: int, noise_mode: str) -> np.ndarray:
    """Logistic noise for logit mode, one Gumbel draw for log-gumbel mode."""
    u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    if noise_mode == "logit":
        return (np.log(u) - np.log1p(-u)).reshape(-1, 1)
    if noise_mode == "log-gumbel":
        return (-np.log(-np.log(u))).reshape(-1, 1)
    raise ValueError(f"unknown noise mode {noise_mode!r}")


def sample_mask(p: dc.Tensor, tau: float, rng: np.random.Generator,
                noise_mode: str = "logit", sample_mode: str = "st") -> dc.Tensor:
    """Relaxed Bernoulli mask with optional straight-through rounding.

    sample_mode `st` rounds forward values to {0,1} while passing the relaxed
    gradient; `soft` skips rounding (used by the finite-difference checks).
    """
    noise = draw_noise(rng, p.shape[0], noise_mode)
    bhat = dc.relaxed_bernoulli(p, noise, tau, noise_mode=noise_mode)
    if sample_mode == "st":
        return dc.st_round(bhat)
    if sample_mode == "soft":
        return bhat
    raise ValueError(f"unknown sample mode {sample_mode!r}")


def sample_mask_hard(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Plain Bernoulli(p) retention draw, no gradient (evaluation-time)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    return (rng.random(p.size) < p).astype(F32)


@dataclass
class RetentionMatrix:
    """Numpy snapshot of one pruning draw, for audits and dumps."""

    dr_reference: np.ndarray
    dr_debiased: np.ndarray
    p: np.ndarray
    b: np.ndarray
    tau: float
    noise_mode: str

    def dump(self, path: str, u_idx: np.ndarray, v_idx: np.ndarray):
        with open(path, "w") as fh:
            fh.write("user\titem\tdr_ref\tdr_deb\tp\tb\n")
            for i in range(self.p.size):
                fh.write(f"{u_idx[i]}\t{v_idx[i]}\t{self.dr_reference[i]:.6f}\t"
                         f"{self.dr_debiased[i]:.6f}\t{self.p[i]:.6f}\t{self.b[i]:.0f}\n")


# ---------------------------------------------------------------------------
# feature masking

def feature_mask(x_cur: dc.Tensor, x_bias: dc.Tensor,
                 detector: dc.FeedForwardNet) -> dc.Tensor:
    """f = exp(-sigmoid(detector(x_cur * x_bias))), entries in (1/e, 1)."""
    gate = dc.sigmoid_clamped(detector(dc.mul(x_cur, x_bias)))
    return dc.exp(dc.scale(gate, -1.0))


def augment_features(x0: dc.Tensor, mask: dc.Tensor) -> dc.Tensor:
    """Layer-0 augmentation x0 * (1 + f)."""
    return dc.add(x0, dc.mul(x0, mask))


# ---------------------------------------------------------------------------
# full augmented view

def build_augmented_view(adj: NormalizedAdjacency,
                         table_users: dc.Tensor, table_items: dc.Tensor,
                         out_debiased: EncoderOutput,
                         dr_reference: np.ndarray,
                         bias_users: np.ndarray, bias_items: np.ndarray,
                         detector: dc.FeedForwardNet,
                         L: int, tau: float, rng: np.random.Generator,
                         noise_mode: str = "logit", sample_mode: str = "st",
                         use_edge_prune: bool = True,
                         use_feature_mask: bool = True):
    """Compose pruning and masking into the augmented encoder output.

    Returns (EncoderOutput, diagnostics dict). `out_debiased` must come from
    propagation over the ORIGINAL adjacency; `dr_reference` is the cached
    per-edge relative rank under the frozen pretrained model.
    """
    g = adj.graph
    diag = {}
    edge_w = None
    if use_edge_prune:
        dr_d = relative_ranks(out_debiased, g.u_idx, g.v_idx, g.M)
        p = retention_probs(dr_d, dr_reference)
        edge_w = sample_mask(p, tau, rng, noise_mode=noise_mode,
                             sample_mode=sample_mode)
        diag["dr_debiased"] = dr_d
        diag["p"] = p
        diag["b"] = edge_w

    if use_feature_mask:
        f_u = feature_mask(out_debiased.users, dc.constant(bias_users), detector)
        f_v = feature_mask(out_debiased.items, dc.constant(bias_items), detector)
        x0_u = augment_features(table_users, f_u)
        x0_v = augment_features(table_items, f_v)
        diag["mask_users"] = f_u
        diag["mask_items"] = f_v
    else:
        x0_u, x0_v = table_users, table_items

    aug = propagate(adj, x0_u, x0_v, L, edge_w=edge_w)
    return aug, diag
