"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (plain arrays and Python scalars
are accepted as constants) and returns a new Tensor. When a :class:`Tape` is
active and any input requires gradients, the primitive records a node whose
backward closure returns one gradient per input (``None`` where not needed).

Broadcasting is deliberately narrow: equal shapes, a trailing-suffix operand
(bias add), a trailing size-1 axis (row-wise scaling) or a scalar.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, active_tape

_GELU_K = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, arr: np.ndarray, inputs, backward) -> Tensor:
    out = Tensor.wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _check_broadcast(op, sa, sb):
    if sa == sb or not sa or not sb:
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sa) == len(sb) and sa[:-1] == sb[:-1] and (sa[-1] == 1 or sb[-1] == 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", a.data * b.data, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_K * (xd + 0.044715 * (xd * xd * xd)))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit("gelu", 0.5 * xd * (1.0 + t), (x,), backward)


# ------------------------------------------------------------------- linear

def _affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    y = x.reshape(-1, x.shape[-1]) @ W
    if b is not None:
        y += b
    return y.reshape(x.shape[:-1] + (W.shape[1],))


def affine(x, W, b=None) -> Tensor:
    """``x[..., p] @ W[p, q] (+ b[q])``."""
    x, W = as_tensor(x), as_tensor(W)
    b = None if b is None else as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1:] != W.shape[:1]:
        raise ShapeError(f"affine: cannot multiply x{x.shape} by W{W.shape}")
    if b is not None and b.shape != W.shape[1:]:
        raise ShapeError(f"affine: bias {b.shape} does not match W{W.shape}")
    inputs = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x.data.reshape(-1, W.shape[0]).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    return _emit("affine", _affine_forward(x.data, W.data, None if b is None else b.data), inputs, backward)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    y = _softmax(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    rd = 1.0 / x.shape[-1]
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * rd
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * rd + eps)
    xhat = xc * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * rd
                        - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * rd))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# ----------------------------------------------------------------- structure

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _emit("concat", out, tuple(tensors), backward)


def getitem(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _emit("getitem", x.data[key].copy(), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_pool(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit("mean_pool", x.data.mean(axis=axis), (x,), backward)


# -------------------------------------------------------------------- losses

def cross_entropy(y, logits, multilabel: bool = False) -> Tensor:
    """Mean cross-entropy between label vectors ``y`` and ``logits`` (``[C]`` or ``[n, C]``).

    Multiclass: softmax cross-entropy. Multilabel: per-class sigmoid
    cross-entropy averaged over classes.
    """
    logits = as_tensor(logits)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: labels {y.shape} vs logits {logits.shape}")
    if logits.shape[-1] < 2:
        raise ShapeError("cross_entropy: need at least 2 classes")
    z = logits.data
    n = z.size // z.shape[-1]
    if multilabel:
        per = np.logaddexp(0.0, z) - y * z
        loss = per.mean(axis=-1).sum() / n

        def backward(g):
            return (g * (1.0 / (1.0 + np.exp(-z)) - y) / (n * z.shape[-1]),)
    else:
        m = z.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
        loss = -(y * (z - lse)).sum() / n

        def backward(g):
            p = np.exp(z - lse)
            return (g * (p * y.sum(axis=-1, keepdims=True) - y) / n,)

    return _emit("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ------------------------------------------------------------ fused blocks

def self_attention(qkv, num_heads: int) -> Tensor:
    """Unmasked multi-head attention on a fused ``[B, T, 3d]`` projection."""
    qkv = as_tensor(qkv)
    B, T, three_d = qkv.shape
    d = three_d // 3
    if three_d % 3 or d % num_heads:
        raise ShapeError(f"self_attention: width {three_d} incompatible with {num_heads} heads")
    dh = d // num_heads
    split = qkv.data.reshape(B, T, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = split[0], split[1], split[2]
    sc = 1.0 / math.sqrt(dh)
    att = _softmax(q @ k.transpose(0, 1, 3, 2) * sc, -1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        go = g.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)
        ga = go @ v.transpose(0, 1, 3, 2)
        gv = att.transpose(0, 1, 3, 2) @ go
        gs = att * (ga - (ga * att).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        stacked = np.stack([gq, gk, gv])  # [3, B, h, T, dh]
        return (stacked.transpose(1, 3, 0, 2, 4).reshape(B, T, three_d),)

    return _emit("self_attention", out, (qkv,), backward)


def _mor_backward_base(g, x, W, b, x2, q):
    g2 = g.reshape(-1, q)
    gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
    gW = x2.T @ g2 if W.requires_grad else None
    if b is None:
        return gx, gW
    return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)


def mor_linear(x, W, b, As, Bs, router=None, bypass: bool = True, logit_offset=None) -> Tensor:
    """Frozen linear layer plus a routed sum of low-rank updates.

    ``out = x@W + b + sum_k w_k * (x @ A_k.T) @ B_k.T`` where ``w`` is the
    per-token softmax of ``x @ router (+ logit_offset)``. With ``bypass`` the
    first routed weight multiplies nothing. Without a router every unit has
    weight 1 (plain LoRA for a single unit).
    """
    x, W = as_tensor(x), as_tensor(W)
    b = None if b is None else as_tensor(b)
    As = [as_tensor(a) for a in As]
    Bs = [as_tensor(m) for m in Bs]
    if x.shape[-1:] != W.shape[:1]:
        raise ShapeError(f"mor_linear: cannot multiply x{x.shape} by W{W.shape}")
    p, q = W.shape
    for A, Bm in zip(As, Bs):
        if A.shape[1] != p or Bm.shape[0] != q or A.shape[0] != Bm.shape[1]:
            raise ShapeError(f"mor_linear: unit A{A.shape}/B{Bm.shape} does not fit W{W.shape}")
    off = 1 if (router is not None and bypass) else 0
    if router is not None:
        router = as_tensor(router)
        if router.shape != (p, len(As) + off):
            raise ShapeError(f"mor_linear: router {router.shape} expected {(p, len(As) + off)}")

    x2 = x.data.reshape(-1, p)
    out = _affine_forward(x2, W.data, None if b is None else b.data)
    if not As:
        inputs = [x, W] + ([] if b is None else [b])
        return _emit("mor_linear", out.reshape(x.shape[:-1] + (q,)), tuple(inputs),
                     lambda g: _mor_backward_base(g, x, W, b, x2, q))
    # all units at once: u = x A_cat^T, then per-unit weights, then B_cat
    ranks = [A.shape[0] for A in As]
    starts = np.concatenate([[0], np.cumsum(ranks)[:-1]])
    A_cat = np.concatenate([A.data for A in As]) if len(As) > 1 else As[0].data
    B_cat = np.concatenate([m.data for m in Bs], axis=1) if len(Bs) > 1 else Bs[0].data
    u = x2 @ A_cat.T
    w = None
    if router is not None:
        logits = x2 @ router.data
        if logit_offset is not None:
            logits = logits + np.asarray(logit_offset, dtype=logits.dtype)
        w = _softmax(logits, -1)
        wexp = np.repeat(w[:, off:], ranks, axis=1)
        uw = u * wexp
    else:
        uw = u
    out += uw @ B_cat.T

    inputs = [x, W] + ([] if b is None else [b]) + As + Bs + ([] if router is None else [router])

    def backward(g):
        g2 = g.reshape(-1, q)
        grads = list(_mor_backward_base(g, x, W, b, x2, q))
        gx = grads[0]
        g_uw = g2 @ B_cat
        gB_cat = g2.T @ uw
        gu = g_uw if w is None else g_uw * wexp
        gA_cat = gu.T @ x2
        if gx is not None:
            gx = gx + (gu @ A_cat).reshape(x.shape)
        grads += [gA_cat[s:s + r] if A.requires_grad else None for A, s, r in zip(As, starts, ranks)]
        grads += [gB_cat[:, s:s + r] if m.requires_grad else None for m, s, r in zip(Bs, starts, ranks)]
        if router is not None:
            gw = np.zeros_like(w)
            gw[:, off:] = np.add.reduceat(g_uw * u, starts, axis=1)
            glog = w * (gw - (gw * w).sum(axis=1, keepdims=True))
            grads.append(x2.T @ glog if router.requires_grad else None)
            if gx is not None:
                gx = gx + (glog @ router.data.T).reshape(x.shape)
        grads[0] = gx
        return tuple(grads)

    return _emit("mor_linear", out.reshape(x.shape[:-1] + (q,)), tuple(inputs), backward)
