"""Timing comparison of the numba kernels against their numpy references.

Run with `python3 benchmarks/bench_kernels.py`. Each kernel is timed at a
realistic training shape (a 3000 x 1500 interaction graph with 90k edges and
64-dimensional embeddings; 256-row batches for the pairwise kernel) and the
two backends are checked for agreement while we are at it.
"""

import time

import numpy as np

from fairdda import kernels


def _timeit(fn, args, n_iter):
    fn(*args)  # warm up (also triggers JIT compilation)
    start = time.perf_counter()
    for _ in range(n_iter):
        out = fn(*args)
    per_call = (time.perf_counter() - start) / n_iter * 1e3
    return per_call, out


def _report(name, numpy_fn, numba_fn, args, n_iter):
    t_np, out_np = _timeit(numpy_fn, args, n_iter)
    if numba_fn is None:
        print(f"{name:18s} numpy {t_np:8.3f} ms/call   (numba unavailable)")
        return
    t_nb, out_nb = _timeit(numba_fn, args, n_iter)
    gap = float(np.max(np.abs(np.asarray(out_np, dtype=np.float64)
                              - np.asarray(out_nb, dtype=np.float64))))
    print(f"{name:18s} numpy {t_np:8.3f} ms/call   numba {t_nb:8.3f} ms/call"
          f"   speedup {t_np / t_nb:6.1f}x   max|diff| {gap:.2e}")


def main():
    try:
        import numba
        print(f"numba {numba.__version__}, numpy {np.__version__}")
    except ImportError:
        print(f"numpy {np.__version__}, numba not installed")

    rng = np.random.default_rng(0)
    m, n, e, d = 3000, 1500, 90_000, 64
    u_idx = rng.integers(0, m, size=e).astype(np.int64)
    v_idx = rng.integers(0, n, size=e).astype(np.int64)
    vals = rng.random(e).astype(np.float32)
    dense = rng.normal(0.0, 0.5, (n, d)).astype(np.float32)
    xu = rng.normal(0.0, 0.5, (m, d)).astype(np.float32)
    xv = rng.normal(0.0, 0.5, (n, d)).astype(np.float32)
    edge_vals = rng.normal(0.0, 0.5, e).astype(np.float32)
    batch = np.ascontiguousarray(xu[:256])

    _report("spmm", kernels.spmm_numpy, kernels.spmm_numba,
            (u_idx, v_idx, vals, dense, m), n_iter=20)
    _report("edge_dot", kernels.edge_dot_numpy, kernels.edge_dot_numba,
            (u_idx, v_idx, xu, xv), n_iter=20)
    _report("pairwise_sq_dists", kernels.pairwise_sq_dists_numpy,
            kernels.pairwise_sq_dists_numba, (batch,), n_iter=50)
    _report("segment_sum", kernels.segment_sum_numpy,
            kernels.segment_sum_numba, (edge_vals, u_idx, m), n_iter=50)


if __name__ == "__main__":
    main()
