"""Minimal reverse-mode differentiation core.

A fixed menu of array operations on `Value` nodes, sized for the two models
in this package: linear, strided 1-D convolution, ReLU, batch/layer norm, a
GRU sequence cell, embedding lookup, MSE, and softmax cross-entropy, plus
the elementwise/reduction glue they are composed from.  There is no general
broadcasting; shapes must line up except where an op documents otherwise.

Gradients accumulate into `Value.grad` when `backward()` is called on a
scalar loss.  Set debug mode (`set_debug(True)`) to assert every
intermediate is finite.
"""

from __future__ import annotations

import numpy as np

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable finiteness assertions on every op output (slow; for tests)."""
    global _DEBUG
    _DEBUG = bool(flag)


class NumericError(Exception):
    """Raised when a non-finite value is produced where finiteness is required."""


class Value:
    """A node in the computation graph: an ndarray plus its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = parents
        self._backward = backward
        if _DEBUG and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite value in node {name or '<anon>'}")

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) node."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar node")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def param(data, name=None) -> Value:
    """A trainable leaf."""
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Value:
    return Value(data)


def _unary(x, out_data, grad_fn, name):
    x = as_value(x)

    def backward(g):
        if x.requires_grad:
            x.accumulate(grad_fn(g))

    return Value(out_data, parents=(x,), backward=backward, name=name)


# -- elementwise arithmetic (same shape, or one scalar operand) --------------

def _binary(a, b, out_data, da_fn, db_fn, name):
    a, b = as_value(a), as_value(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(da_fn(g), a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(db_fn(g), b.data.shape))

    return Value(out_data, parents=(a, b), backward=backward, name=name)


def _reduce_to(grad, shape):
    # Only scalar-vs-array mixing is allowed, so a full sum handles it.
    if grad.shape != tuple(shape):
        return np.sum(grad).reshape(shape) if shape == () else np.sum(grad)
    return grad


def _check_elementwise(a, b):
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_elementwise(a, b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_elementwise(a, b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_elementwise(a, b)
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data, "mul")


def scale(x, s: float) -> Value:
    x = as_value(x)
    return _unary(x, x.data * s, lambda g: g * s, "scale")


def square(x) -> Value:
    x = as_value(x)
    return _unary(x, x.data ** 2, lambda g: g * 2.0 * x.data, "square")


# -- shape plumbing -----------------------------------------------------------

def reshape(x, shape) -> Value:
    x = as_value(x)
    return _unary(x, x.data.reshape(shape),
                  lambda g: g.reshape(x.data.shape), "reshape")


def slice_time(x, start: int, stop: int) -> Value:
    """Slice axis -2 (the time axis of (..., T, D) activations)."""
    x = as_value(x)
    idx = (Ellipsis, slice(start, stop), slice(None))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return full

    return _unary(x, x.data[idx], grad_fn, "slice_time")


def concat(values, axis=-1) -> Value:
    values = [as_value(v) for v in values]
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for v, piece in zip(values, np.split(g, splits, axis=axis)):
            if v.requires_grad:
                v.accumulate(piece)

    return Value(data, parents=tuple(values), backward=backward, name="concat")


def repeat_axis(x, axis: int, n: int) -> Value:
    """Insert a new axis of length n by repetition; backward sums over it."""
    x = as_value(x)
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _unary(x, data, lambda g: g.sum(axis=axis), "repeat_axis")


def sum_axis(x, axis: int, keepdims=False) -> Value:
    x = as_value(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape).copy()

    return _unary(x, data, grad_fn, "sum_axis")


def mean_all(x) -> Value:
    x = as_value(x)
    n = x.data.size
    return _unary(x, np.asarray(x.data.mean()),
                  lambda g: np.full_like(x.data, g / n), "mean_all")


def sum_all(x) -> Value:
    x = as_value(x)
    return _unary(x, np.asarray(x.data.sum()),
                  lambda g: np.full_like(x.data, g), "sum_all")


# -- activations --------------------------------------------------------------

def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0
    return _unary(x, x.data * mask, lambda g: g * mask, "relu")


def sigmoid(x) -> Value:
    x = as_value(x)
    s = _sigmoid(x.data)
    return _unary(x, s, lambda g: g * s * (1.0 - s), "sigmoid")


def tanh(x) -> Value:
    x = as_value(x)
    t = np.tanh(x.data)
    return _unary(x, t, lambda g: g * (1.0 - t * t), "tanh")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- layers -------------------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"shape mismatch {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Value(a.data @ b.data, parents=(a, b), backward=backward, name="matmul")


def linear(x, w, b=None) -> Value:
    """x: (..., d_in) @ w: (d_in, d_out) + b."""
    x, w = as_value(x), as_value(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear: {x.data.shape} incompatible with {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_value(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x.accumulate((g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            w.accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return Value(out.reshape(*lead, w.data.shape[1]),
                 parents=tuple(parents), backward=backward, name="linear")


def conv1d(x, w, b=None, stride: int = 1) -> Value:
    """Strided 1-D convolution over time with 'same'-style zero padding.

    x: (B, T, c_in), w: (c_out, c_in, k).  Output length is ceil(T / stride),
    which is the rate contract the encoders rely on.
    """
    x, w = as_value(x), as_value(w)
    batch, t_in, c_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d: input channels {c_in} != weight channels {c_in_w}")
    t_out = -(-t_in // stride)
    pad_total = max((t_out - 1) * stride + k - t_in, 0)
    pad_left = pad_total // 2
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_total - pad_left), (0, 0)))
    # cols stores taps as (tap j, channel) blocks, so flatten w the same way
    w2 = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)

    cols = np.empty((batch, t_out, c_in * k))
    for j in range(k):
        cols[:, :, j * c_in:(j + 1) * c_in] = xp[:, j:j + t_out * stride:stride, :]
    out = cols.reshape(-1, c_in * k) @ w2
    parents = [x, w]
    if b is not None:
        b = as_value(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        if w.requires_grad:
            gw = cols.reshape(-1, k * c_in).T @ g2  # (k*c_in, c_out)
            w.accumulate(gw.reshape(k, c_in, c_out).transpose(2, 1, 0))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(batch, t_out, k * c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + t_out * stride:stride, :] += \
                    gcols[:, :, j * c_in:(j + 1) * c_in]
            x.accumulate(gxp[:, pad_left:pad_left + t_in, :])

    return Value(out.reshape(batch, t_out, c_out),
                 parents=tuple(parents), backward=backward, name="conv1d")


class BatchNormState:
    """Running statistics for one batch-norm layer (momentum 0.1)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Value:
    """Normalize over all axes but the last.

    Training mode uses batch statistics and updates the running estimates as
    a side effect; inference mode is the deterministic affine map given by
    the running statistics.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    flat = x.data.reshape(-1, x.data.shape[-1])
    n = flat.shape[0]
    if training:
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        # unbiased variance for the running estimate, biased for the batch
        unbiased = var * n / max(n - 1, 1)
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (flat - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if gamma.requires_grad:
            gamma.accumulate((g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gx_hat = g2 * gamma.data
            if training:
                gx = (gx_hat - gx_hat.mean(axis=0)
                      - xhat * (gx_hat * xhat).mean(axis=0)) * inv_std
            else:
                gx = gx_hat * inv_std
            x.accumulate(gx.reshape(x.data.shape))

    return Value(out.reshape(x.data.shape), parents=(x, gamma, beta),
                 backward=backward, name="batch_norm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Value:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    d = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = (-1, d)
        g2 = g.reshape(lead)
        xh = xhat.reshape(lead)
        istd = inv_std.reshape(-1, 1)
        if gamma.requires_grad:
            gamma.accumulate((g2 * xh).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gx_hat = g2 * gamma.data
            gx = (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                  - xh * (gx_hat * xh).mean(axis=-1, keepdims=True)) * istd
            x.accumulate(gx.reshape(x.data.shape))

    return Value(out, parents=(x, gamma, beta), backward=backward, name="layer_norm")


class GruParams:
    """Weights of one GRU cell; gate order is (reset, update, candidate)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        s_in = 1.0 / np.sqrt(d_in)
        s_h = 1.0 / np.sqrt(d_hidden)
        self.wx = param(rng.uniform(-s_in, s_in, size=(d_in, 3 * d_hidden)), "gru.wx")
        self.wh = param(rng.uniform(-s_h, s_h, size=(d_hidden, 3 * d_hidden)), "gru.wh")
        self.b = param(np.zeros(3 * d_hidden), "gru.b")
        self.d_hidden = d_hidden

    def values(self):
        return [self.wx, self.wh, self.b]


def gru_cell_arrays(x_proj, h_prev, wh):
    """One GRU step on plain arrays.  x_proj = x @ wx + b, precomputed.

    Update gate at 0 keeps the candidate; at 1 it would copy h_prev, so a
    large negative update bias makes the state carry over unchanged.
    Returns (h, cache) where cache feeds the hand-written backward.
    """
    d = h_prev.shape[-1]
    hp = h_prev @ wh  # (B, 3d)
    r = _sigmoid(x_proj[:, :d] + hp[:, :d])
    u = _sigmoid(x_proj[:, d:2 * d] + hp[:, d:2 * d])
    s = hp[:, 2 * d:]
    n = np.tanh(x_proj[:, 2 * d:] + r * s)
    h = (1.0 - u) * h_prev + u * n
    return h, (r, u, n, s)


def gru(x, params: GruParams, h0=None) -> Value:
    """Run a GRU over x: (B, T, d_in) -> hidden sequence (B, T, d_hidden).

    Fused op: the whole backward-through-time pass is hand-written, which
    keeps the graph small on long sequences.
    """
    x = as_value(x)
    batch, t_len, d_in = x.data.shape
    d = params.d_hidden
    wx, wh, b = params.wx, params.wh, params.b
    h_prev = np.zeros((batch, d)) if h0 is None else np.asarray(h0, dtype=np.float64)

    x_proj = x.data.reshape(-1, d_in) @ wx.data + b.data
    x_proj = x_proj.reshape(batch, t_len, 3 * d)
    hs = np.empty((batch, t_len, d))
    caches = []
    h_first = h_prev
    for t in range(t_len):
        h_prev, cache = gru_cell_arrays(x_proj[:, t], h_prev, wh.data)
        hs[:, t] = h_prev
        caches.append(cache)

    def backward(g):
        gx_proj = np.empty_like(x_proj)
        g_wh = np.zeros_like(wh.data)
        dh = np.zeros((batch, d))
        for t in range(t_len - 1, -1, -1):
            r, u, n, s = caches[t]
            h_in = hs[:, t - 1] if t > 0 else h_first
            dh = dh + g[:, t]
            du = dh * (n - h_in)
            dn = dh * u
            da_n = dn * (1.0 - n * n)
            dr = da_n * s
            ds = da_n * r
            da_u = du * u * (1.0 - u)
            da_r = dr * r * (1.0 - r)
            dhp = np.concatenate([da_r, da_u, ds], axis=1)
            g_wh += h_in.T @ dhp
            dh = dh * (1.0 - u) + dhp @ wh.data.T
            gx_proj[:, t, :d] = da_r
            gx_proj[:, t, d:2 * d] = da_u
            gx_proj[:, t, 2 * d:] = da_n
        gp2 = gx_proj.reshape(-1, 3 * d)
        if wh.requires_grad:
            wh.accumulate(g_wh)
        if wx.requires_grad:
            wx.accumulate(x.data.reshape(-1, d_in).T @ gp2)
        if b.requires_grad:
            b.accumulate(gp2.sum(axis=0))
        if x.requires_grad:
            x.accumulate((gp2 @ wx.data.T).reshape(batch, t_len, d_in))

    return Value(hs, parents=(x, wx, wh, b), backward=backward, name="gru")


def embedding(table, indices) -> Value:
    """Row lookup with scatter-add backward; also used to gather code frames."""
    table = as_value(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be integers")
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            table.accumulate(gt)

    return Value(out, parents=(table,), backward=backward, name="embedding")


def straight_through(z, quantized: np.ndarray) -> Value:
    """Emit the quantized values; pass the gradient to z unchanged."""
    z = as_value(z)
    if quantized.shape != z.data.shape:
        raise ValueError(f"shape mismatch {quantized.shape} vs {z.data.shape}")
    return _unary(z, np.array(quantized, dtype=np.float64, copy=True),
                  lambda g: g, "straight_through")


def mse(pred, target) -> Value:
    """Mean squared error over all elements."""
    pred, target = as_value(pred), as_value(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        if pred.requires_grad:
            pred.accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target.accumulate(g * -2.0 * diff / n)

    return Value(np.asarray((diff ** 2).mean()), parents=(pred, target),
                 backward=backward, name="mse")


def softmax_cross_entropy(logits, targets) -> Value:
    """Mean cross-entropy of logits (N, C) against integer targets (N,)."""
    logits = as_value(logits)
    targets = np.asarray(targets)
    n, n_classes = logits.data.shape
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(n), targets]
            - np.log(exp.sum(axis=1)))

    def backward(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(n), targets] -= 1.0
            logits.accumulate(g * gl / n)

    return Value(np.asarray(nll.mean()), parents=(logits,),
                 backward=backward, name="softmax_cross_entropy")


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class Schedule:
    """Learning-rate schedule: constant, milestone halving, or linear warm-up."""

    def __init__(self, kind: str = "constant", base_lr: float = 4e-4,
                 milestones=(), warmup_start: float = 1e-5, warmup_steps: int = 0):
        if kind not in ("constant", "halving", "warmup"):
            raise ValueError(f"unknown schedule kind {kind!r}")
        self.kind = kind
        self.base_lr = base_lr
        self.milestones = tuple(sorted(milestones))
        self.warmup_start = warmup_start
        self.warmup_steps = warmup_steps

    def lr_at(self, step: int) -> float:
        """Learning rate applied at optimizer step `step` (1-based)."""
        if self.kind == "halving":
            halvings = sum(1 for m in self.milestones if step >= m)
            return self.base_lr * (0.5 ** halvings)
        if self.kind == "warmup" and step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.warmup_start + (self.base_lr - self.warmup_start) * frac
        return self.base_lr


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) with schedule hooks."""

    def __init__(self, params, schedule: Schedule | None = None,
                 lr: float = 4e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.schedule = schedule or Schedule("constant", base_lr=lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule.lr_at(max(self.step_count, 1))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the lr used."""
        self.step_count += 1
        lr = self.schedule.lr_at(self.step_count)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr
