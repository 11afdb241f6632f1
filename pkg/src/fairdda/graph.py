"""Bipartite interaction graph and its degree-normalized adjacency.

Edges are kept in one canonical order (sorted by (user, item)) so that
per-edge weight vectors are portable across runs and per-user segments are
contiguous. Normalization values are frozen from the original degrees; a
masked adjacency only reweights edges and never re-derives degrees.
"""
from __future__ import annotations

import numpy as np

F32 = np.float32


class InteractionGraph:
    """Edge list plus CSR-style neighbor indexes on both sides."""

    def __init__(self, n_users: int, n_items: int, pairs):
        if n_users <= 0 or n_items <= 0:
            raise ValueError("graph needs at least one user and one item")
        pairs = np.asarray(pairs, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("pairs must be (E,2)")
        if pairs.shape[0] == 0:
            raise ValueError("graph has no edges")
        if pairs[:, 0].max() >= n_users or pairs[:, 1].max() >= n_items:
            raise ValueError("edge endpoint out of range")
        if pairs.min() < 0:
            raise ValueError("negative index in edge list")
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        if pairs.shape[0] > 1:
            dup = np.all(pairs[1:] == pairs[:-1], axis=1)
            if np.any(dup):
                raise ValueError("duplicate edge in interaction list")
        self.M = n_users
        self.N = n_items
        self.u_idx = np.ascontiguousarray(pairs[:, 0])
        self.v_idx = np.ascontiguousarray(pairs[:, 1])
        self.deg_u = np.bincount(self.u_idx, minlength=n_users).astype(np.int64)
        self.deg_v = np.bincount(self.v_idx, minlength=n_items).astype(np.int64)

    @property
    def n_edges(self) -> int:
        return self.u_idx.shape[0]

    def user_neighbor_lists(self):
        """Per-user sorted item arrays (edges are already (u,v)-sorted)."""
        ptr = np.concatenate(([0], np.cumsum(self.deg_u)))
        return [self.v_idx[ptr[u]:ptr[u + 1]] for u in range(self.M)]


class NormalizedAdjacency:
    """Edge values A_uv / sqrt(d_u d_v) over a fixed interaction graph."""

    def __init__(self, graph: InteractionGraph):
        self.graph = graph
        du = graph.deg_u[graph.u_idx].astype(np.float64)
        dv = graph.deg_v[graph.v_idx].astype(np.float64)
        self.vals = (1.0 / np.sqrt(du * dv)).astype(F32)

    @property
    def u_idx(self):
        return self.graph.u_idx

    @property
    def v_idx(self):
        return self.graph.v_idx

    def dense(self) -> np.ndarray:
        """Dense M x N normalized adjacency (tests and tiny graphs only)."""
        a = np.zeros((self.graph.M, self.graph.N), dtype=F32)
        a[self.u_idx, self.v_idx] = self.vals
        return a


class MaskedAdjacency:
    """A normalized adjacency with per-edge weights in [0,1] applied on top."""

    def __init__(self, base: NormalizedAdjacency, edge_weights: np.ndarray):
        w = np.asarray(edge_weights, dtype=F32).reshape(-1)
        if w.shape[0] != base.graph.n_edges:
            raise ValueError("weight vector misaligned with edge list")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("edge weights must lie in [0,1]")
        self.base = base
        self.weights = w

    @property
    def graph(self):
        return self.base.graph

    @property
    def u_idx(self):
        return self.base.u_idx

    @property
    def v_idx(self):
        return self.base.v_idx

    @property
    def vals(self):
        return self.base.vals * self.weights

    def dense(self) -> np.ndarray:
        a = np.zeros((self.graph.M, self.graph.N), dtype=F32)
        a[self.u_idx, self.v_idx] = self.vals
        return a

    def dump_edges(self, path: str):
        with open(path, "w") as fh:
            for u, v, w in zip(self.u_idx, self.v_idx, self.weights):
                fh.write(f"{u}\t{v}\t{float(w)!r}\n")


def normalize(graph: InteractionGraph) -> NormalizedAdjacency:
    return NormalizedAdjacency(graph)


def apply_mask(adj: NormalizedAdjacency, edge_weights) -> MaskedAdjacency:
    return MaskedAdjacency(adj, edge_weights)
