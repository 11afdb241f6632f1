"""Minimal reverse-mode autodiff over dense 2-d float32 arrays.

Covers exactly the op set the training objectives need: dense and
edge-list-sparse matmuls, elementwise math, reductions, segment centering,
RBF Gram matrices with an HSIC contraction, a binary-concrete relaxation
with straight-through rounding, and fused softmax cross entropy.

Values are float32 everywhere on the tape; the HSIC/Gram path additionally
carries float64 internals in a side channel so the loss value is not
degraded by float32 rounding (the m^2 cancellation is severe).

Backward accumulates into ``.grad``; calling ``backward`` twice without
clearing accumulates twice, which is intentional.
"""
from __future__ import annotations

import numpy as np

from . import kernels

F32 = np.float32


def _as_f32(x) -> np.ndarray:
    a = np.asarray(x, dtype=F32)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ValueError(f"tensors are 2-d, got shape {a.shape}")
    return a


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")


class Tensor:
    """A 2-d float32 array plus the tape record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "value64")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        self.data = _as_f32(data)
        _check_finite(_op, self.data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._op = _op
        self.value64 = None  # float64 side channel (HSIC path)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() on non-scalar tensor")
        return float(self.data[0, 0])

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(F32, copy=False)

    def backward(self):
        if self.data.shape != (1, 1):
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones((1, 1), dtype=F32))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the objective code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"


class Parameter(Tensor):
    """Trainable tensor with Adam state."""

    __slots__ = ("m", "v", "step", "decay", "name")

    def __init__(self, data, name: str = "", decay: bool = False):
        super().__init__(data, requires_grad=True, _op=f"param:{name}")
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.decay = decay
        self.name = name

    def zero_grad(self):
        self.grad = None


def _make(data, parents, backward, op, f64=None) -> Tensor:
    req = any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=req, _op=op)
    t.value64 = f64
    if req:
        t._parents = tuple(parents)
        t._backward = backward
    return t


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, _op="const")


# ---------------------------------------------------------------------------
# elementwise and broadcast ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * F32(s)

    def bw(g):
        a._accumulate(g * F32(s))

    return _make(out, (a,), bw, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + F32(c)

    def bw(g):
        a._accumulate(g)

    return _make(out, (a,), bw, "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """(M,d) + (1,d) broadcast add."""
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"bias shape {b.shape} incompatible with {x.shape}")
    out = x.data + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True))

    return _make(out, (x, b), bw, "add_bias")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw, "sigmoid")


def sigmoid_clamped(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Sigmoid clipped into (eps, 1-eps); keeps exp(-sigma) strictly inside its range."""
    s = sigmoid(x)
    out = np.clip(s.data, eps, 1.0 - eps)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw, "sigmoid_clamped")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        x._accumulate(g * (x.data > 0))

    return _make(out, (x,), bw, "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    out = np.log(x.data)

    def bw(g):
        x._accumulate(g / x.data)

    return _make(out, (x,), bw, "log")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(F32)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -30, 30)))
        x._accumulate(g * sig)

    return _make(out, (x,), bw, "softplus")


def min_const(x: Tensor, c: float) -> Tensor:
    """Elementwise min(x, c); gradient passes only strictly below the cap."""
    out = np.minimum(x.data, F32(c))

    def bw(g):
        x._accumulate(g * (x.data < c))

    return _make(out, (x,), bw, "min_const")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out, (a, b), bw, "matmul")


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T"""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch {a.shape} x {b.shape}")
    out = a.data @ b.data.T

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data)
        if b.requires_grad:
            b._accumulate(g.T @ a.data)

    return _make(out, (a, b), bw, "matmul_nt")


def spmm_op(out_idx: np.ndarray, in_idx: np.ndarray, base_vals: np.ndarray,
            x: Tensor, n_out: int, edge_w: Tensor | None = None) -> Tensor:
    """Edge-list sparse-times-dense, optionally weighted by a per-edge tensor.

    out[out_idx[e]] += base_vals[e] * w[e] * x[in_idx[e]].  Differentiable in
    both the dense operand and the edge weights.
    """
    if edge_w is not None and edge_w.shape != (len(base_vals), 1):
        raise ValueError("edge weight vector misaligned with edge list")
    vals = base_vals if edge_w is None else base_vals * edge_w.data[:, 0]
    vals = vals.astype(F32, copy=False)
    out = kernels.spmm(out_idx, in_idx, vals, x.data, n_out)
    n_in = x.shape[0]
    parents = (x,) if edge_w is None else (x, edge_w)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=F32)
        if x.requires_grad:
            x._accumulate(kernels.spmm(in_idx, out_idx, vals, g, n_in))
        if edge_w is not None and edge_w.requires_grad:
            ge = kernels.edge_dot(out_idx, in_idx, g, x.data)
            edge_w._accumulate((base_vals * ge).reshape(-1, 1))

    return _make(out, parents, bw, "spmm")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _make(out, (x,), bw, "gather_rows")


def diag_part(x: Tensor) -> Tensor:
    if x.shape[0] != x.shape[1]:
        raise ValueError("diag_part needs a square tensor")
    out = np.diag(x.data).reshape(-1, 1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.fill_diagonal(gx, g[:, 0])
        x._accumulate(gx)

    return _make(out, (x,), bw, "diag_part")


def row_l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data)).reshape(-1, 1)
    safe = norms > eps
    inv = np.where(safe, 1.0 / np.maximum(norms, eps), 0.0).astype(F32)
    out = x.data * inv

    def bw(g):
        dots = np.einsum("ij,ij->i", g, out).reshape(-1, 1)
        x._accumulate((g - dots * out) * inv)

    return _make(out, (x,), bw, "row_l2_normalize")


# ---------------------------------------------------------------------------
# reductions

def sum_rows(x: Tensor) -> Tensor:
    out = x.data.sum(axis=1, keepdims=True)

    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _make(out, (x,), bw, "sum_rows")


def row_mean(x: Tensor) -> Tensor:
    d = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def bw(g):
        x._accumulate(np.broadcast_to(g / d, x.shape).copy())

    return _make(out, (x,), bw, "row_mean")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array([[x.data.mean()]], dtype=F32)

    def bw(g):
        x._accumulate(np.full(x.shape, g[0, 0] / n, dtype=F32))

    return _make(out, (x,), bw, "mean_all")


def subtract_segment_mean(x: Tensor, seg_ids: np.ndarray, n_seg: int) -> Tensor:
    """x - mean(x over its segment); segments given per row of an (E,1) tensor."""
    if x.shape[1] != 1:
        raise ValueError("subtract_segment_mean expects an (E,1) tensor")
    counts = np.bincount(seg_ids, minlength=n_seg).astype(F32)
    if np.any(counts == 0):
        raise ValueError("empty segment")
    means = kernels.segment_sum(x.data[:, 0], seg_ids, n_seg) / counts
    out = x.data - means[seg_ids].reshape(-1, 1)

    def bw(g):
        gm = kernels.segment_sum(np.ascontiguousarray(g[:, 0], F32), seg_ids, n_seg) / counts
        x._accumulate(g - gm[seg_ids].reshape(-1, 1))

    return _make(out, (x,), bw, "subtract_segment_mean")


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        x._accumulate(out * (g - inner))

    return _make(out, (x,), bw, "softmax_rows")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels misaligned with logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.array([[float(np.mean(lse - picked))]], dtype=F32)
    probs = np.exp(z - lse[:, None])

    def bw(g):
        gr = probs.copy()
        gr[np.arange(n), labels] -= 1.0
        logits._accumulate(gr * (g[0, 0] / n))

    return _make(out, (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# kernel machinery (RBF Gram + HSIC contraction), float64 internals

def _double_center(k: np.ndarray) -> np.ndarray:
    rm = k.mean(axis=1, keepdims=True)
    cm = k.mean(axis=0, keepdims=True)
    return k - rm - cm + k.mean()


def median_bandwidth(x: np.ndarray) -> float:
    """Median heuristic over positive pairwise distances; 1.0 when degenerate."""
    d2 = kernels.pairwise_sq_dists(np.ascontiguousarray(x, dtype=F32))
    tri = np.sqrt(d2[np.triu_indices(d2.shape[0], 1)])
    pos = tri[tri > 0]
    return float(np.median(pos)) if pos.size else 1.0


def rbf_gram(x: Tensor, sigma: float) -> Tensor:
    """K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2)), float64 carried on the side.

    sigma is a plain float (the median-heuristic bandwidth is treated as a
    constant, not differentiated through).
    """
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    x64 = x.data.astype(np.float64)
    d2 = kernels.pairwise_sq_dists(x.data)
    k64 = np.exp(-d2 / (2.0 * sigma * sigma))

    def bw(g):
        if not x.requires_grad:
            return
        g64 = g.astype(np.float64) if g.dtype != np.float64 else g
        w = (g64 + g64.T) * k64 / (sigma * sigma)
        gx = w @ x64 - w.sum(axis=1, keepdims=True) * x64
        x._accumulate(gx.astype(F32))

    t = _make(k64, (x,), bw, "rbf_gram", f64=k64)
    return t


def hsic_gram(ka: Tensor, kb: Tensor) -> Tensor:
    """trace(Ka H Kb H) / (m-1)^2 from two Gram tensors.

    Reads the float64 side channel of rbf_gram outputs when present so the
    contraction never passes through float32.
    """
    m = ka.shape[0]
    if kb.shape[0] != m:
        raise ValueError("Gram orders differ")
    if m < 2:
        raise ValueError("HSIC needs at least 2 samples")
    a64 = ka.value64 if ka.value64 is not None else ka.data.astype(np.float64)
    b64 = kb.value64 if kb.value64 is not None else kb.data.astype(np.float64)
    denom = float(m - 1) ** 2
    ac = _double_center(a64)
    val = float(np.sum(ac * b64) / denom)

    def bw(g):
        s = float(g[0, 0])
        if ka.requires_grad:
            ka._accumulate((_double_center(b64) * (s / denom)).astype(F32))
        if kb.requires_grad:
            kb._accumulate((ac * (s / denom)).astype(F32))

    return _make(np.array([[val]], dtype=F32), (ka, kb), bw, "hsic_gram", f64=val)


def hsic_rbf(xa: Tensor, xb: Tensor, sigma_a: float, sigma_b: float) -> Tensor:
    """Fused HSIC(X_a, X_b) with RBF kernels; float64 throughout internally."""
    m = xa.shape[0]
    if xb.shape[0] != m:
        raise ValueError("sample counts differ")
    if m < 2:
        raise ValueError("HSIC needs at least 2 samples")
    xa64 = xa.data.astype(np.float64)
    xb64 = xb.data.astype(np.float64)
    ka = np.exp(-kernels.pairwise_sq_dists(xa.data) / (2.0 * sigma_a * sigma_a))
    kb = np.exp(-kernels.pairwise_sq_dists(xb.data) / (2.0 * sigma_b * sigma_b))
    denom = float(m - 1) ** 2
    ac = _double_center(ka)
    bc = _double_center(kb)
    val = float(np.sum(ac * kb) / denom)

    def _to_x(gk, k64, x64, sigma):
        w = (gk + gk.T) * k64 / (sigma * sigma)
        return w @ x64 - w.sum(axis=1, keepdims=True) * x64

    def bw(g):
        s = float(g[0, 0]) / denom
        if xa.requires_grad:
            xa._accumulate(_to_x(bc * s, ka, xa64, sigma_a).astype(F32))
        if xb.requires_grad:
            xb._accumulate(_to_x(ac * s, kb, xb64, sigma_b).astype(F32))

    return _make(np.array([[val]], dtype=F32), (xa, xb), bw, "hsic_rbf", f64=val)


def hsic_value(xa: np.ndarray, xb: np.ndarray,
               sigma_a: float | None = None, sigma_b: float | None = None) -> float:
    """Plain float64 HSIC for evaluation and tests (no tape)."""
    xa = np.ascontiguousarray(xa, dtype=F32)
    xb = np.ascontiguousarray(xb, dtype=F32)
    sa = median_bandwidth(xa) if sigma_a is None else sigma_a
    sb = median_bandwidth(xb) if sigma_b is None else sigma_b
    ka = np.exp(-kernels.pairwise_sq_dists(xa) / (2.0 * sa * sa))
    kb = np.exp(-kernels.pairwise_sq_dists(xb) / (2.0 * sb * sb))
    m = ka.shape[0]
    return float(np.sum(_double_center(ka) * kb) / (m - 1) ** 2)


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities, rows of a vs rows of b."""
    return matmul_nt(row_l2_normalize(a), row_l2_normalize(b))


# ---------------------------------------------------------------------------
# binary-concrete relaxation + straight-through rounding

def relaxed_bernoulli(p: Tensor, noise: np.ndarray, tau: float,
                      noise_mode: str = "logit", eps: float = 1e-4) -> Tensor:
    """Relaxed Bernoulli sample B_hat in (0,1) from retention probabilities.

    logit mode: sigma((logit(p) + n) / tau) with logistic noise n, so that
    rounding reproduces Bernoulli(p) exactly and p=1 edges are deterministic.
    log-gumbel mode: sigma((log p + n) / tau) with a single Gumbel draw n.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if noise.shape != p.shape:
        raise ValueError("noise misaligned with probabilities")
    p64 = p.data.astype(np.float64)
    n64 = noise.astype(np.float64)
    if noise_mode == "logit":
        det = p64 >= 1.0
        pc = np.clip(p64, eps, 1.0 - 1e-9)
        z = (np.log(pc) - np.log1p(-pc) + n64) / tau
        bhat = 1.0 / (1.0 + np.exp(-z))
        dp = bhat * (1.0 - bhat) / (tau * pc * (1.0 - pc))
        dp[det] = 0.0
        dp[p64 <= eps] = 0.0
        bhat[det] = 1.0
    elif noise_mode == "log-gumbel":
        pc = np.clip(p64, 1e-8, 1.0)
        z = (np.log(pc) + n64) / tau
        bhat = 1.0 / (1.0 + np.exp(-z))
        dp = bhat * (1.0 - bhat) / (tau * pc)
        dp[p64 <= 1e-8] = 0.0
    else:
        raise ValueError(f"unknown noise mode {noise_mode!r}")

    def bw(g):
        p._accumulate((g.astype(np.float64) * dp).astype(F32))

    return _make(bhat, (p,), bw, f"relaxed_bernoulli[{noise_mode}]")


def st_round(x: Tensor) -> Tensor:
    """floor(x + 1/2) forward, identity gradient backward (straight-through)."""
    out = np.floor(x.data + F32(0.5))

    def bw(g):
        x._accumulate(g)

    return _make(out, (x,), bw, "st_round")


# ---------------------------------------------------------------------------
# optimizer and small feed-forward nets

def adam_step(params, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with decoupled L2 decay applied only to params flagged `decay`."""
    for p in params:
        if p.grad is None:
            continue
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        delta = lr * mhat / (np.sqrt(vhat) + eps)
        if p.decay and weight_decay > 0.0:
            delta = delta + lr * weight_decay * p.data
        p.data = p.data - delta.astype(F32)
        _check_finite("adam_step", p.data)


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(F32)


class FeedForwardNet:
    """Stack of affine layers with rectifier activations in between.

    `widths` gives [in, hidden..., out]; `final_bias=False` drops the bias on
    the last layer.
    """

    def __init__(self, widths, rng: np.random.Generator, name: str = "ffn",
                 final_bias: bool = True):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.layers = []
        last = len(widths) - 2
        for i in range(len(widths) - 1):
            w = Parameter(xavier_uniform(rng, widths[i], widths[i + 1]),
                          name=f"{name}.w{i}")
            use_bias = final_bias or i < last
            b = Parameter(np.zeros((1, widths[i + 1]), dtype=F32),
                          name=f"{name}.b{i}") if use_bias else None
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = matmul(h, w)
            if b is not None:
                h = add_bias(h, b)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    def parameters(self):
        out = []
        for w, b in self.layers:
            out.append(w)
            if b is not None:
                out.append(b)
        return out
