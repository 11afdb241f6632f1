"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
``FAIRDDA_BACKEND``:

  * ``auto``  (default) -- use numba if it imports, else numpy
  * ``numba`` -- require numba, fail loudly if unavailable
  * ``numpy`` -- force the pure-numpy path (useful for debugging and as the
    reference in ``benchmarks/bench_kernels.py``)

Both implementations accumulate in the same (edge) order, so a single
backend is bit-reproducible run to run.
"""
from __future__ import annotations

import os

import numpy as np

_REQUESTED = os.environ.get("FAIRDDA_BACKEND", "auto").lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(f"FAIRDDA_BACKEND must be auto|numba|numpy, got {_REQUESTED!r}")


# ---------------------------------------------------------------------------
# pure-numpy reference implementations

def spmm_numpy(out_idx: np.ndarray, in_idx: np.ndarray, vals: np.ndarray,
               dense: np.ndarray, n_out: int) -> np.ndarray:
    """Edge-list sparse @ dense: out[out_idx[e]] += vals[e] * dense[in_idx[e]]."""
    out = np.zeros((n_out, dense.shape[1]), dtype=dense.dtype)
    np.add.at(out, out_idx, vals[:, None] * dense[in_idx])
    return out


def edge_dot_numpy(a_idx: np.ndarray, b_idx: np.ndarray,
                   a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-edge row dot products: r[e] = a[a_idx[e]] . b[b_idx[e]]."""
    return np.einsum("ij,ij->i", a[a_idx], b[b_idx])


def pairwise_sq_dists_numpy(x: np.ndarray) -> np.ndarray:
    """All-pairs squared euclidean distances, accumulated in float64."""
    x = x.astype(np.float64, copy=False)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def segment_sum_numpy(x: np.ndarray, seg_ids: np.ndarray, n_seg: int) -> np.ndarray:
    """Sum x over contiguous segments labelled by seg_ids."""
    return np.bincount(seg_ids, weights=x, minlength=n_seg).astype(x.dtype)


# ---------------------------------------------------------------------------
# numba implementations

_HAVE_NUMBA = False
if _REQUESTED in ("auto", "numba"):
    try:
        from numba import njit
        _HAVE_NUMBA = True
    except ImportError:
        if _REQUESTED == "numba":
            raise

if _HAVE_NUMBA:

    @njit(cache=True)
    def spmm_numba(out_idx, in_idx, vals, dense, n_out):
        d = dense.shape[1]
        out = np.zeros((n_out, d), dtype=dense.dtype)
        for e in range(out_idx.shape[0]):
            o = out_idx[e]
            i = in_idx[e]
            w = vals[e]
            for k in range(d):
                out[o, k] += w * dense[i, k]
        return out

    @njit(cache=True)
    def edge_dot_numba(a_idx, b_idx, a, b):
        n = a_idx.shape[0]
        d = a.shape[1]
        out = np.empty(n, dtype=a.dtype)
        for e in range(n):
            s = a.dtype.type(0.0)
            ra = a_idx[e]
            rb = b_idx[e]
            for k in range(d):
                s += a[ra, k] * b[rb, k]
            out[e] = s
        return out

    @njit(cache=True)
    def pairwise_sq_dists_numba(x):
        n, d = x.shape
        out = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    diff = float(x[i, k]) - float(x[j, k])
                    s += diff * diff
                out[i, j] = s
                out[j, i] = s
        return out

    @njit(cache=True)
    def segment_sum_numba(x, seg_ids, n_seg):
        out = np.zeros(n_seg, dtype=x.dtype)
        for e in range(x.shape[0]):
            out[seg_ids[e]] += x[e]
        return out

else:
    spmm_numba = None
    edge_dot_numba = None
    pairwise_sq_dists_numba = None
    segment_sum_numba = None


if _HAVE_NUMBA:
    ACTIVE_BACKEND = "numba"
    spmm = spmm_numba
    edge_dot = edge_dot_numba
    pairwise_sq_dists = pairwise_sq_dists_numba
    segment_sum = segment_sum_numba
else:
    ACTIVE_BACKEND = "numpy"
    spmm = spmm_numpy
    edge_dot = edge_dot_numpy
    pairwise_sq_dists = pairwise_sq_dists_numpy
    segment_sum = segment_sum_numpy


def warmup() -> None:
    """Trigger jit compilation on tiny inputs so timings are not polluted."""
    idx = np.array([0, 1], dtype=np.int64)
    vals = np.array([1.0, 1.0], dtype=np.float32)
    dense = np.ones((2, 2), dtype=np.float32)
    spmm(idx, idx, vals, dense, 2)
    edge_dot(idx, idx, dense, dense)
    pairwise_sq_dists(dense)
    segment_sum(vals, idx, 2)
