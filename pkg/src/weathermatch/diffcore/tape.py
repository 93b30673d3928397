"""Reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray plus the closure that routes its output gradient to
its parents.  Graphs are built eagerly by the op functions below; calling
backward() on a scalar Var runs the tape in reverse topological order.

Conventions:
  * feature maps are channels-last, (H, W, C) or batched (B, H, W, C);
  * every op preserves the dtype of its inputs (float32 for training,
    float64 for gradient checking);
  * gradient accumulation is sequential in a deterministic order, so
    repeated runs are bitwise identical;
  * when no input requires a gradient the op returns a detached Var and
    records nothing, which keeps inference allocation-free.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericError, ParameterError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "rule", "requires", "param")

    def __init__(self, value, parents=(), rule=None, requires=False, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.rule = rule
        self.requires = requires
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires={self.requires})"


def constant(value) -> Var:
    """A leaf that never receives a gradient."""
    return Var(np.asarray(value))


def leaf(value, requires: bool = True) -> Var:
    """A differentiable input leaf (used by grad checks and tests)."""
    return Var(np.asarray(value), requires=requires)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _make(value, parents, rule) -> Var:
    needed = tuple(p for p in parents if p.requires)
    if not needed:
        return Var(value)
    return Var(value, parents=parents, rule=rule, requires=True)


def _accum(p: Var, g: np.ndarray, fresh: bool) -> None:
    """Add a gradient contribution.

    `fresh` means the buffer may be adopted directly: it is either newly
    computed or an alias handed to exactly one parent (a consumed child
    gradient is never read again, so writing through such an alias is safe).
    Non-fresh contributions share memory with another recipient and are
    copied on first assignment.
    """
    if not p.requires:
        return
    if p.grad is None:
        p.grad = g if fresh and g.flags.writeable else np.array(g)
    else:
        p.grad += g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _toposort(root: Var):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(out: Var) -> None:
    """Backprop from a scalar; accumulates into trainable ParamTensor.grad."""
    if out.value.size != 1:
        raise ShapeError(f"backward requires a scalar, got shape {out.value.shape}")
    if not out.requires:
        raise ParameterError("backward on a graph with no differentiable inputs")
    order = _toposort(out)
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node.rule is not None and node.grad is not None:
            node.rule(node.grad)
        if node.param is not None and node.param.trainable and node.grad is not None:
            node.param.grad += node.grad
    # release intermediate buffers; leaves keep .grad for inspection
    for node in order:
        if node.rule is not None:
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value + b.value

    def rule(g):
        if a.requires:
            _accum(a, _reduce_to(g, a.value.shape), fresh=a.value.shape == g.shape)
        if b.requires:
            _accum(b, _reduce_to(g, b.value.shape), fresh=False)

    return _make(value, (a, b), rule)


def subtract(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value - b.value

    def rule(g):
        if a.requires:
            _accum(a, _reduce_to(g, a.value.shape), fresh=a.value.shape == g.shape)
        if b.requires:
            _accum(b, _reduce_to(-g, b.value.shape), fresh=True)

    return _make(value, (a, b), rule)


def multiply(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = a.value * b.value

    def rule(g):
        if a.requires:
            _accum(a, _reduce_to(g * b.value, a.value.shape), fresh=True)
        if b.requires:
            _accum(b, _reduce_to(g * a.value, b.value.shape), fresh=True)

    return _make(value, (a, b), rule)


def scale(a, factor: float) -> Var:
    a = _as_var(a)
    value = a.value * a.value.dtype.type(factor)

    def rule(g):
        _accum(a, g * a.value.dtype.type(factor), fresh=True)

    return _make(value, (a,), rule)


def exp(a) -> Var:
    a = _as_var(a)
    value = np.exp(a.value)

    def rule(g):
        _accum(a, g * value, fresh=True)

    return _make(value, (a,), rule)


def absolute(a) -> Var:
    a = _as_var(a)
    value = np.abs(a.value)

    def rule(g):
        _accum(a, g * np.sign(a.value), fresh=True)

    return _make(value, (a,), rule)


def clip01(a) -> Var:
    """Clip to [0, 1]; gradient passes through inside the range (inclusive)."""
    a = _as_var(a)
    value = np.clip(a.value, 0.0, 1.0)

    def rule(g):
        mask = (a.value >= 0.0) & (a.value <= 1.0)
        _accum(a, g * mask, fresh=True)

    return _make(value, (a,), rule)


def sum_all(a) -> Var:
    a = _as_var(a)
    value = np.asarray(a.value.sum(), dtype=a.value.dtype)

    def rule(g):
        _accum(a, np.full(a.value.shape, g.item(), dtype=a.value.dtype), fresh=True)

    return _make(value, (a,), rule)


def mean_all(a) -> Var:
    a = _as_var(a)
    n = a.value.size
    value = np.asarray(a.value.mean(), dtype=a.value.dtype)

    def rule(g):
        _accum(a, np.full(a.value.shape, g.item() / n, dtype=a.value.dtype), fresh=True)

    return _make(value, (a,), rule)


def reshape(a, shape) -> Var:
    a = _as_var(a)
    value = a.value.reshape(shape)

    def rule(g):
        _accum(a, g.reshape(a.value.shape), fresh=True)

    return _make(value, (a,), rule)


def transpose(a, axes) -> Var:
    a = _as_var(a)
    inverse = tuple(np.argsort(axes))
    value = np.ascontiguousarray(a.value.transpose(axes))

    def rule(g):
        _accum(a, np.ascontiguousarray(g.transpose(inverse)), fresh=True)

    return _make(value, (a,), rule)


def concat_channels(parts) -> Var:
    parts = [_as_var(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=-1)
    sizes = [p.value.shape[-1] for p in parts]

    def rule(g):
        offset = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[..., offset : offset + size], fresh=True)
            offset += size

    return _make(value, tuple(parts), rule)


def stack0(parts) -> Var:
    parts = [_as_var(p) for p in parts]
    value = np.stack([p.value for p in parts], axis=0)

    def rule(g):
        for i, p in enumerate(parts):
            _accum(p, g[i], fresh=True)

    return _make(value, tuple(parts), rule)


def slice0(a, start: int, stop: int) -> Var:
    a = _as_var(a)
    value = a.value[start:stop]

    def rule(g):
        full = np.zeros(a.value.shape, dtype=g.dtype)
        full[start:stop] = g
        _accum(a, full, fresh=True)

    return _make(value, (a,), rule)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    value = np.matmul(a.value, b.value)

    def rule(g):
        if a.requires:
            ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
            _accum(a, _reduce_to(ga, a.value.shape), fresh=True)
        if b.requires:
            gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
            _accum(b, _reduce_to(gb, b.value.shape), fresh=True)

    return _make(value, (a, b), rule)


# ---------------------------------------------------------------------------
# nonlinearities / normalization


def gelu(a) -> Var:
    """GELU, tanh form: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = _as_var(a)
    x = a.value
    dt = x.dtype.type
    c, aa = dt(_GELU_C), dt(_GELU_A)
    inner = c * (x + aa * (x * x * x))
    t = np.tanh(inner)
    value = dt(0.5) * x * (1.0 + t)

    def rule(g):
        du = c * (1.0 + 3.0 * aa * (x * x))
        dy = dt(0.5) * (1.0 + t) + dt(0.5) * x * (1.0 - t * t) * du
        dy *= g
        _accum(a, dy, fresh=True)

    return _make(value, (a,), rule)


def softmax_last_axis(a) -> Var:
    a = _as_var(a)
    x = a.value
    y = np.subtract(x, x.max(axis=-1, keepdims=True))
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def rule(g):
        t = g * y
        s = t.sum(axis=-1, keepdims=True)
        t -= y * s
        _accum(a, t, fresh=True)

    return _make(y, (a,), rule)


def softmax_scaled_last_axis(a, factor) -> Var:
    """softmax(a * factor) over the last axis, broadcasting `factor`.

    Fused so the scaled logits are never materialized; used for the
    learnable-temperature attention where factor = 1/alpha per head.
    """
    a, factor = _as_var(a), _as_var(factor)
    x, f = a.value, factor.value
    y = x * f
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def rule(g):
        t = g * y
        s = t.sum(axis=-1, keepdims=True)
        t -= y * s  # t = dL/d(scaled logits)
        if factor.requires:
            _accum(factor, _reduce_to(t * x, f.shape), fresh=True)
        if a.requires:
            t *= f
            _accum(a, t, fresh=True)

    return _make(y, (a, factor), rule)


def attention_core(q, k, v, factor) -> Var:
    """out = softmax((q @ k^T) * factor) @ v, fused per head.

    q: (heads, R, lh); k, v: (heads, Nd, lh); factor: (heads, 1, 1).
    One full-size GEMM per head (rank-lh shapes run near peak in BLAS) with
    the softmax applied in place; the unscaled logits and the probabilities
    are kept for backward, so no R x Nd temporaries are allocated there
    beyond one scratch buffer.  All loops traverse heads in fixed order, so
    results are deterministic.
    """
    q, k, v, factor = _as_var(q), _as_var(k), _as_var(v), _as_var(factor)
    qv, kv_, vv, f = q.value, k.value, v.value, factor.value
    heads, rows, lh = qv.shape
    nd = kv_.shape[1]
    if kv_.shape != vv.shape or kv_.shape[0] != heads or kv_.shape[2] != lh:
        raise ShapeError(f"attention_core shapes: q{qv.shape} k{kv_.shape} v{vv.shape}")
    dt = qv.dtype
    out = np.empty((heads, rows, lh), dtype=dt)
    logits = np.empty((heads, rows, nd), dtype=dt)
    probs = np.empty((heads, rows, nd), dtype=dt)
    for h in range(heads):
        np.matmul(qv[h], kv_[h].T, out=logits[h])
        y = probs[h]
        np.multiply(logits[h], f[h, 0, 0], out=y)
        y -= y.max(axis=-1, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=-1, keepdims=True)
        np.matmul(y, vv[h], out=out[h])

    def rule(g):
        gq = np.empty_like(qv) if q.requires else None
        gk = np.empty_like(kv_) if k.requires else None
        gv = np.empty_like(vv) if v.requires else None
        gf = np.zeros_like(f) if factor.requires else None
        scratch = np.empty((rows, nd), dtype=dt)
        scratch2 = np.empty((rows, nd), dtype=dt)
        for h in range(heads):
            y = probs[h]
            if gv is not None:
                np.matmul(y.T, g[h], out=gv[h])
            gy = scratch
            np.matmul(g[h], vv[h].T, out=gy)
            gy *= y
            srow = gy.sum(axis=-1, keepdims=True)
            np.multiply(y, srow, out=scratch2)
            gy -= scratch2  # now dL/d(scaled logits)
            if gf is not None:
                gf[h, 0, 0] = np.einsum("rn,rn->", gy, logits[h])
            gy *= f[h, 0, 0]
            if gq is not None:
                np.matmul(gy, kv_[h], out=gq[h])
            if gk is not None:
                np.matmul(gy.T, qv[h], out=gk[h])
        if gq is not None:
            _accum(q, gq, fresh=True)
        if gk is not None:
            _accum(k, gk, fresh=True)
        if gv is not None:
            _accum(v, gv, fresh=True)
        if gf is not None:
            _accum(factor, gf, fresh=True)

    return _make(out, (q, k, v, factor), rule)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-6) -> Var:
    """Normalize over the last axis; optional affine (gamma scale, beta shift).

    Zero-variance rows map to zeros before the affine step.
    """
    if (gamma is None) != (beta is None):
        raise ParameterError("layer_norm affine needs both gamma and beta")
    a = _as_var(a)
    x = a.value
    dt = x.dtype.type
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt(eps))
    xhat = xc * inv
    parents = [a]
    if gamma is not None:
        gamma = _as_var(gamma)
        beta = _as_var(beta)
        value = xhat * gamma.value + beta.value
        parents += [gamma, beta]
    else:
        value = xhat
    n = x.shape[-1]

    def rule(g):
        if gamma is not None:
            g2 = g.reshape(-1, n)
            _accum(gamma, np.einsum("bc,bc->c", g2, xhat.reshape(-1, n)), fresh=True)
            _accum(beta, g2.sum(axis=0), fresh=True)
            gy = g * gamma.value
        else:
            gy = g
        if a.requires:
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = np.mean(gy * xhat, axis=-1, keepdims=True)
            _accum(a, inv * (gy - m1 - xhat * m2), fresh=True)

    out = _make(value, tuple(parents), rule)
    return out


# ---------------------------------------------------------------------------
# convolution family (channels-last; batch dimension optional)


def _as4d(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"conv input must be (H,W,C) or (B,H,W,C), got {x.shape}")


def pointwise_conv(x, w, b=None) -> Var:
    """1x1 convolution: (..., Cin) -> (..., Cout)."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(b) if b is not None else None
    cin, cout = w.value.shape
    if x.value.shape[-1] != cin:
        raise ShapeError(f"pointwise_conv: input C={x.value.shape[-1]}, weight Cin={cin}")
    flat = x.value.reshape(-1, cin)
    y = flat @ w.value
    if b is not None:
        y += b.value
    value = y.reshape(x.value.shape[:-1] + (cout,))
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        g2 = g.reshape(-1, cout)
        if x.requires:
            _accum(x, (g2 @ w.value.T).reshape(x.value.shape), fresh=True)
        if w.requires:
            _accum(w, flat.T @ g2, fresh=True)
        if b is not None and b.requires:
            _accum(b, g2.sum(axis=0), fresh=True)

    return _make(value, parents, rule)


def _fold_reflect(gp: np.ndarray) -> np.ndarray:
    """Adjoint of 1-pixel reflect padding on the H and W axes of (B,H,W,C)."""
    g1 = np.ascontiguousarray(gp[:, 1:-1, :, :])
    g1[:, 1, :, :] += gp[:, 0, :, :]
    g1[:, -2, :, :] += gp[:, -1, :, :]
    g2 = np.ascontiguousarray(g1[:, :, 1:-1, :])
    g2[:, :, 1, :] += g1[:, :, 0, :]
    g2[:, :, -2, :] += g1[:, :, -1, :]
    return g2


def depthwise_conv3x3(x, w, b=None) -> Var:
    """3x3 depthwise convolution with reflect padding; shape preserved."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(b) if b is not None else None
    if w.value.shape[:2] != (3, 3) or w.value.shape[2] != x.value.shape[-1]:
        raise ShapeError(f"depthwise weight {w.value.shape} does not match input {x.value.shape}")
    x4, squeeze = _as4d(x.value)
    bsz, h, ww_, c = x4.shape
    if h < 2 or ww_ < 2:
        raise ShapeError("depthwise_conv3x3 needs H, W >= 2 for reflect padding")
    xp = np.pad(x4, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    y = np.zeros_like(x4)
    for di in range(3):
        for dj in range(3):
            y += xp[:, di : di + h, dj : dj + ww_, :] * w.value[di, dj]
    if b is not None:
        y += b.value
    value = y[0] if squeeze else y
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        g4 = g[None] if squeeze else g
        if w.requires:
            gw = np.empty_like(w.value)
            for di in range(3):
                for dj in range(3):
                    gw[di, dj] = np.einsum(
                        "bhwc,bhwc->c", xp[:, di : di + h, dj : dj + ww_, :], g4
                    )
            _accum(w, gw, fresh=True)
        if x.requires:
            gp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gp[:, di : di + h, dj : dj + ww_, :] += g4 * w.value[di, dj]
            gx = _fold_reflect(gp)
            _accum(x, gx[0] if squeeze else gx, fresh=True)
        if b is not None and b.requires:
            _accum(b, g4.sum(axis=(0, 1, 2)), fresh=True)

    return _make(value, parents, rule)


def _patchify(x4: np.ndarray):
    bsz, h, w, c = x4.shape
    ho, wo = h // 2, w // 2
    p = x4.reshape(bsz, ho, 2, wo, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(p).reshape(bsz, ho, wo, 4 * c)


def _unpatchify(p: np.ndarray, c: int):
    bsz, ho, wo, _ = p.shape
    x = p.reshape(bsz, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(bsz, 2 * ho, 2 * wo, c)


def strided_conv(x, w, b=None) -> Var:
    """2x2 stride-2 convolution: halves H and W; weight is (4*Cin, Cout)."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(b) if b is not None else None
    x4, squeeze = _as4d(x.value)
    bsz, h, ww_, c = x4.shape
    if h % 2 or ww_ % 2:
        raise ShapeError(f"strided_conv needs even H, W; got {h}x{ww_}")
    if w.value.shape[0] != 4 * c:
        raise ShapeError(f"strided_conv weight rows {w.value.shape[0]} != 4*C={4 * c}")
    cout = w.value.shape[1]
    patches = _patchify(x4)
    flat = patches.reshape(-1, 4 * c)
    y = flat @ w.value
    if b is not None:
        y += b.value
    y = y.reshape(bsz, h // 2, ww_ // 2, cout)
    value = y[0] if squeeze else y
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(-1, cout)
        if x.requires:
            gp = (g2 @ w.value.T).reshape(patches.shape)
            gx = _unpatchify(gp, c)
            _accum(x, gx[0] if squeeze else gx, fresh=True)
        if w.requires:
            _accum(w, flat.T @ g2, fresh=True)
        if b is not None and b.requires:
            _accum(b, g2.sum(axis=0), fresh=True)

    return _make(value, parents, rule)


def transposed_upsample(x, w, b=None) -> Var:
    """2x2 stride-2 transposed convolution: doubles H and W; weight (Cin, 4*Cout)."""
    x, w = _as_var(x), _as_var(w)
    b = _as_var(b) if b is not None else None
    x4, squeeze = _as4d(x.value)
    bsz, h, ww_, c = x4.shape
    if w.value.shape[0] != c or w.value.shape[1] % 4:
        raise ShapeError(f"transposed_upsample weight {w.value.shape} incompatible with C={c}")
    cout = w.value.shape[1] // 4
    flat = x4.reshape(-1, c)
    y = (flat @ w.value).reshape(bsz, h, ww_, 4 * cout)
    y = _unpatchify(y, cout)
    if b is not None:
        y += b.value
    value = y[0] if squeeze else y
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        g4 = g[None] if squeeze else g
        gpatch = _patchify(g4).reshape(-1, 4 * cout)
        if x.requires:
            gx = (gpatch @ w.value.T).reshape(x4.shape)
            _accum(x, gx[0] if squeeze else gx, fresh=True)
        if w.requires:
            _accum(w, flat.T @ gpatch, fresh=True)
        if b is not None and b.requires:
            _accum(b, g4.sum(axis=(0, 1, 2)), fresh=True)

    return _make(value, parents, rule)


# ---------------------------------------------------------------------------
# generic dispatcher

_LAYER_KINDS = {
    "pointwise_conv_1x1",
    "depthwise_conv_3x3",
    "strided_conv",
    "transposed_upsample",
    "layer_norm",
    "softmax_last_axis",
    "matmul",
    "gelu",
    "concat_channels",
    "add",
    "subtract",
    "scale",
}


def layer_forward(kind: str, params: dict, *inputs) -> Var:
    """Uniform entry point over the supported layer kinds.

    `params` carries the kind's named parameters ("weight", "bias", "gamma",
    "beta", "factor") as Vars or arrays; positional inputs follow each kind's
    arity.
    """
    if kind not in _LAYER_KINDS:
        raise ParameterError(f"unknown layer kind {kind!r}")
    p = params or {}
    if kind == "pointwise_conv_1x1":
        return pointwise_conv(inputs[0], p["weight"], p.get("bias"))
    if kind == "depthwise_conv_3x3":
        return depthwise_conv3x3(inputs[0], p["weight"], p.get("bias"))
    if kind == "strided_conv":
        return strided_conv(inputs[0], p["weight"], p.get("bias"))
    if kind == "transposed_upsample":
        return transposed_upsample(inputs[0], p["weight"], p.get("bias"))
    if kind == "layer_norm":
        return layer_norm(inputs[0], p.get("gamma"), p.get("beta"))
    if kind == "softmax_last_axis":
        return softmax_last_axis(inputs[0])
    if kind == "matmul":
        return matmul(inputs[0], inputs[1])
    if kind == "gelu":
        return gelu(inputs[0])
    if kind == "concat_channels":
        return concat_channels(list(inputs))
    if kind == "add":
        return add(inputs[0], inputs[1])
    if kind == "subtract":
        return subtract(inputs[0], inputs[1])
    return scale(inputs[0], p["factor"])


def check_finite(v: Var, label: str = "value") -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite {label} encountered")
    return v
