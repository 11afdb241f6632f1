"""Embedding propagation over the normalized bipartite adjacency.

One propagation step sends user states across edges to items and vice
versa; the final representation is the average of the L+1 layer outputs
(layer 0 included). There are no feature transforms or nonlinearities, so
the whole map is linear in the layer-0 tables and differentiable through
optional per-edge weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .graph import MaskedAdjacency, NormalizedAdjacency

F32 = np.float32

FAMILIES = ("performance", "biased", "debiased", "augmented")


@dataclass
class EmbeddingTable:
    """Layer-0 user and item embeddings for one representation family."""

    users: dc.Parameter
    items: dc.Parameter
    family: str = "performance"

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    def parameters(self):
        return [self.users, self.items]


@dataclass
class EncoderOutput:
    users: dc.Tensor
    items: dc.Tensor
    layers: list = field(default_factory=list)

    def detach(self):
        """Numpy copies of the final representations (no tape)."""
        return self.users.data.copy(), self.items.data.copy()


def init_embedding_table(M: int, N: int, d: int, rng: np.random.Generator,
                         family: str = "performance") -> EmbeddingTable:
    """Uniform init at scale 1/sqrt(d), the usual choice for dot-product tables."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    bound = 1.0 / np.sqrt(d)
    xu = rng.uniform(-bound, bound, size=(M, d)).astype(F32)
    xv = rng.uniform(-bound, bound, size=(N, d)).astype(F32)
    return EmbeddingTable(
        users=dc.Parameter(xu, name=f"{family}.users", decay=True),
        items=dc.Parameter(xv, name=f"{family}.items", decay=True),
        family=family,
    )


def propagate(adj: NormalizedAdjacency | MaskedAdjacency,
              xu: dc.Tensor, xv: dc.Tensor, L: int,
              edge_w: dc.Tensor | None = None,
              keep_layers: bool = False) -> EncoderOutput:
    """L rounds of message passing, averaged with the layer-0 input.

    `edge_w` carries differentiable per-edge retention weights; a
    MaskedAdjacency instead folds fixed numpy weights into the edge values.
    """
    if L < 0:
        raise ValueError("layer count must be >= 0")
    if xu.shape[1] != xv.shape[1]:
        raise ValueError("user and item embedding dims differ")
    if isinstance(adj, MaskedAdjacency) and edge_w is not None:
        raise ValueError("pass either a masked adjacency or edge weights, not both")
    vals = adj.vals
    u_idx, v_idx = adj.u_idx, adj.v_idx
    M = xu.shape[0]
    N = xv.shape[0]
    layers = [(xu, xv)] if keep_layers else []
    acc_u, acc_v = xu, xv
    cur_u, cur_v = xu, xv
    for _ in range(L):
        new_u = dc.spmm_op(u_idx, v_idx, vals, cur_v, M, edge_w)
        new_v = dc.spmm_op(v_idx, u_idx, vals, cur_u, N, edge_w)
        cur_u, cur_v = new_u, new_v
        acc_u = dc.add(acc_u, cur_u)
        acc_v = dc.add(acc_v, cur_v)
        if keep_layers:
            layers.append((cur_u, cur_v))
    inv = 1.0 / (L + 1)
    return EncoderOutput(users=dc.scale(acc_u, inv), items=dc.scale(acc_v, inv),
                         layers=layers)


def propagate_numpy(adj, xu: np.ndarray, xv: np.ndarray, L: int):
    """Tape-free propagation for evaluation paths."""
    out = propagate(adj, dc.constant(xu), dc.constant(xv), L)
    return out.users.data, out.items.data
