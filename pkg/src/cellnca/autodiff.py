"""Tape-based reverse-mode differentiation over whole-grid operations.

Only the handful of operations needed by the cellular automaton and its
classifier head are provided. Every operation works on :class:`Tensor`
objects that belong to a :class:`Tape`; the tape records a backward
closure per operation so that gradients can be pulled back through an
arbitrary number of automaton steps.

Grids are laid out as ``(..., H, W, n)`` with channels last.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "depthwise_conv3x3",
    "linear",
    "perceive_linear",
    "relu",
    "concat",
    "masked_add",
    "channel_max",
    "add",
    "mul",
    "total",
    "softmax_cross_entropy",
    "sigmoid_cross_entropy",
]


class Tensor:
    __slots__ = ("value", "grad", "tape", "index", "name", "requires_grad")

    def __init__(self, value, tape, index, name=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.tape = tape
        self.index = index
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.value.shape} dtype={self.value.dtype}>"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass.

    With ``enabled=False`` nothing is recorded and no activations are kept;
    this is the inference mode.
    """

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.nodes = []
        self.leaves = []
        self._count = 0

    def _next_index(self):
        self._count += 1
        return self._count - 1

    def leaf(self, value, name=None, requires_grad=True):
        t = Tensor(np.asarray(value), self, self._next_index(), name, requires_grad and self.enabled)
        if self.enabled:
            self.leaves.append(t)
        return t

    def constant(self, value, name=None):
        return self.leaf(value, name=name, requires_grad=False)

    def record(self, value, inputs, backward):
        out = Tensor(value, self, self._next_index())
        if self.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.nodes.append(_Node(out, inputs, backward))
        return out

    def backward(self, loss, seed=1.0, retain_grads=False):
        """Fill ``.grad`` of every tensor reachable from ``loss``.

        Returns a dict mapping leaf names to their gradients. Intermediate
        gradients are dropped as soon as they have been propagated unless
        ``retain_grads`` is set.
        """
        if not self.enabled:
            raise TapeError("tape was created with enabled=False; nothing to differentiate")
        if not self.nodes:
            raise TapeError("backward called before any forward operation was recorded")
        if loss.tape is not self:
            raise TapeError("loss tensor does not belong to this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.out.grad = None
        for leaf in self.leaves:
            leaf.grad = None
        loss.grad = np.full_like(loss.value, seed)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
            if not retain_grads and node.out is not loss:
                node.out.grad = None
        return {leaf.name: leaf.grad for leaf in self.leaves if leaf.name is not None}


def _check_same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise TapeError("tensors belong to different tapes")
    return tape


def _flush_subnormal(a):
    """Zero entries below the smallest normal float.

    Gradients that spread across the grid over many steps underflow into the
    subnormal range, where BLAS runs about 100x slower. The discarded values
    are below 1.2e-38 in float32 (2.2e-308 in float64).
    """
    return np.where(np.abs(a) < np.finfo(a.dtype).tiny, a.dtype.type(0), a)


def _pad_hw(x):
    out = np.zeros(x.shape[:-3] + (x.shape[-3] + 2, x.shape[-2] + 2, x.shape[-1]), dtype=x.dtype)
    out[..., 1:-1, 1:-1, :] = x
    return out


def depthwise_conv3x3(x, k):
    """Channel-wise 3x3 cross-correlation with zero padding and no bias.

    ``out[i, j, c] = sum_{a, b} x[i + a - 1, j + b - 1, c] * k[c, a, b]``
    """
    tape = _check_same_tape(x, k)
    xv, kv = x.value, k.value
    if xv.ndim < 3:
        raise ShapeError(f"grid must have shape (..., H, W, n), got {xv.shape}")
    n = xv.shape[-1]
    if kv.shape != (n, 3, 3):
        raise ShapeError(f"kernel shape {kv.shape} does not match {n} channels; expected ({n}, 3, 3)")
    H, W = xv.shape[-3], xv.shape[-2]
    xp = _pad_hw(xv)
    out = np.zeros_like(xv)
    for a in range(3):
        for b in range(3):
            out += xp[..., a:a + H, b:b + W, :] * kv[:, a, b]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kv)
        for a in range(3):
            for b in range(3):
                gxp[..., a:a + H, b:b + W, :] += g * kv[:, a, b]
                gk[:, a, b] = (xp[..., a:a + H, b:b + W, :] * g).reshape(-1, n).sum(axis=0)
        return gxp[..., 1:-1, 1:-1, :], gk

    return tape.record(out, (x, k), backward)


def linear(x, W, b):
    """Affine map ``W @ x + b`` applied along the last axis."""
    tape = _check_same_tape(x, W, b)
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise ShapeError(f"linear: input {xv.shape}, weight {Wv.shape}, bias {bv.shape} do not agree")
    out = xv @ Wv.T + bv

    def backward(g):
        g2 = g.reshape(-1, Wv.shape[0])
        x2 = xv.reshape(-1, Wv.shape[1])
        return g @ Wv, g2.T @ x2, g2.sum(axis=0)

    return tape.record(out, (x, W, b), backward)


KEEP_COLUMNS_BYTES = 8 << 20


def perceive_linear(x, k1, k2, W, b):
    """``W @ [x, conv(x, k1), conv(x, k2)] + b`` per cell, as a single node.

    Equal to ``linear(concat([x, depthwise_conv3x3(x, k1), depthwise_conv3x3(x, k2)]), W, b)``
    up to float rounding. Both convolutions are folded into one
    ``(9n, hidden)`` matrix acting on the 3x3 neighbourhood columns, so the
    whole perception costs one matmul instead of 36 strided elementwise ops.
    """
    tape = _check_same_tape(x, k1, k2, W, b)
    xv, k1v, k2v, Wv, bv = x.value, k1.value, k2.value, W.value, b.value
    H, W_, n = xv.shape[-3:]
    hidden = Wv.shape[0]
    if k1v.shape != (n, 3, 3) or k2v.shape != (n, 3, 3):
        raise ShapeError(f"kernels {k1v.shape}, {k2v.shape} do not match {n} channels")
    if Wv.shape != (hidden, 3 * n) or bv.shape != (hidden,):
        raise ShapeError(f"weight {Wv.shape} / bias {bv.shape} do not fit a perception of width {3 * n}")
    lead = xv.shape[:-3]
    # columns are held channel-first, (9n, cells), so every shifted copy
    # moves contiguous image rows instead of n-float fragments
    xt = np.moveaxis(xv, -1, 0)

    def neighbourhood_columns():
        xp = np.zeros((n,) + lead + (H + 2, W_ + 2), dtype=xv.dtype)
        xp[..., 1:-1, 1:-1] = xt
        cols = np.empty((9, n) + lead + (H, W_), dtype=xv.dtype)
        for a in range(3):
            for c in range(3):
                cols[3 * a + c] = xp[..., a:a + H, c:c + W_]
        return cols.reshape(9 * n, -1)

    Wid, Wc1, Wc2 = Wv[:, :n], Wv[:, n:2 * n], Wv[:, 2 * n:]
    k1t = k1v.reshape(n, 9).T  # (9, n)
    k2t = k2v.reshape(n, 9).T
    M = Wc1[:, None, :] * k1t + Wc2[:, None, :] * k2t  # (hidden, 9, n)
    M[:, 4, :] += Wid
    M2 = M.reshape(hidden, 9 * n)
    cols = neighbourhood_columns()
    out = ((M2 @ cols).T + bv).reshape(lead + (H, W_, hidden))
    # large column buffers are rebuilt in backward rather than kept alive on
    # the tape: they are 9x the grid size and would dominate memory over k steps
    kept = cols if tape.enabled and cols.nbytes <= KEEP_COLUMNS_BYTES else None
    del cols

    def backward(g):
        g2 = _flush_subnormal(g).reshape(-1, hidden)
        cols = kept if kept is not None else neighbourhood_columns()
        gM = (g2.T @ cols.T).reshape(hidden, 9, n)
        gcols = (M2.T @ g2.T).reshape((9, n) + lead + (H, W_))
        gxp = np.zeros((n,) + lead + (H + 2, W_ + 2), dtype=xv.dtype)
        for a in range(3):
            for c in range(3):
                gxp[..., a:a + H, c:c + W_] += gcols[3 * a + c]
        gx = _flush_subnormal(np.moveaxis(gxp[..., 1:-1, 1:-1], 0, -1))
        gW = np.empty_like(Wv)
        gW[:, :n] = gM[:, 4, :]
        gW[:, n:2 * n] = np.einsum("hkc,kc->hc", gM, k1t)
        gW[:, 2 * n:] = np.einsum("hkc,kc->hc", gM, k2t)
        gk1 = np.einsum("hkc,hc->ck", gM, Wc1).reshape(n, 3, 3)
        gk2 = np.einsum("hkc,hc->ck", gM, Wc2).reshape(n, 3, 3)
        return gx, gk1, gk2, gW, g2.sum(axis=0)

    return tape.record(out, (x, k1, k2, W, b), backward)


def relu(x):
    out = np.maximum(x.value, 0)

    def backward(g):
        return (g * (out > 0),)

    return x.tape.record(out, (x,), backward)


def concat(tensors, axis=-1):
    tape = _check_same_tape(*tensors)
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, tuple(tensors), backward)


def masked_add(x, update, mask):
    """Residual update gated per cell: cells where ``mask`` is 0 keep ``x`` bit-exactly.

    ``mask`` is a plain boolean array of shape ``x.shape[:-1]``.
    """
    tape = _check_same_tape(x, update)
    if x.value.shape != update.value.shape:
        raise ShapeError(f"state {x.value.shape} and update {update.value.shape} differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.value.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match grid {x.value.shape[:-1]}")
    m = mask[..., None]
    out = np.where(m, x.value + update.value, x.value)

    def backward(g):
        return g, g * m

    return tape.record(out, (x, update), backward)


def channel_max(x):
    """Spatial maximum of each channel of a ``(..., H, W, n)`` grid.

    Returns the pooled tensor ``(..., n)`` and an integer array
    ``(..., n, 2)`` holding the winning ``(row, col)`` per channel. Ties go
    to the first cell in row-major order.
    """
    xv = x.value
    H, W, n = xv.shape[-3:]
    if H * W < 1:
        raise ShapeError("channel_max needs at least one cell")
    flat = xv.reshape(xv.shape[:-3] + (H * W, n))
    idx = np.argmax(flat, axis=-2)
    v = np.take_along_axis(flat, idx[..., None, :], axis=-2)[..., 0, :]
    pos = np.stack(np.divmod(idx, W), axis=-1)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None, :], g[..., None, :], axis=-2)
        return (gflat.reshape(xv.shape),)

    return x.tape.record(v, (x,), backward), pos


def add(a, b):
    tape = _check_same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a, b):
    tape = _check_same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def total(x):
    xv = x.value
    return x.tape.record(np.asarray(xv.sum(), dtype=xv.dtype), (x,),
                         lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def _log_softmax(z):
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax_cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` for a single ``(C,)`` logit vector."""
    z = logits.value
    if z.ndim != 1:
        raise ShapeError(f"expected a (C,) logit vector, got {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ShapeError(f"label {label} outside [0, {z.shape[0]})")
    logp = _log_softmax(z)
    out = np.asarray(-logp[label], dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        p[label] -= 1
        return (g * p,)

    return logits.tape.record(out, (logits,), backward)


def sigmoid_cross_entropy(logits, label):
    """Mean per-class binary cross-entropy against a one-hot target."""
    z = logits.value
    if z.ndim != 1:
        raise ShapeError(f"expected a (C,) logit vector, got {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ShapeError(f"label {label} outside [0, {z.shape[0]})")
    y = np.zeros_like(z)
    y[label] = 1
    # log(1 + exp(-|z|)) form keeps large logits finite
    per_class = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per_class.mean(), dtype=z.dtype)

    def backward(g):
        s = 1 / (1 + np.exp(-z))
        return (g * (s - y) / z.shape[0],)

    return logits.tape.record(out, (logits,), backward)
