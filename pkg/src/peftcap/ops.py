"""Differentiable primitives recorded on the active tape.

Shapes follow two conventions throughout the package: weights are rank-2 and
activations are rank-2 ``(tokens, d)`` or rank-3 ``(batch, tokens, d)``.
Broadcasting is deliberately restricted to scalar-vs-tensor, equal shapes,
and trailing-shape bias addition; anything else raises ``ShapeError`` so the
gradient of every primitive stays auditable.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .autodiff import RankError, ShapeError, Tape, Tensor, active_tape

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MASK_FILL = -1e30  # finite stand-in for -inf; exp underflows to exactly 0.0


class EmptyLossError(ValueError):
    """Cross-entropy was asked to average over zero counted positions."""


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           make_backward) -> Tensor:
    """Wrap ``out_data``, recording the pullback if a tape is active."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        flags = tuple(t.requires_grad for t in inputs)
        tape.record(op, inputs, out, make_backward(flags))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` rank-2 or rank-3 stacked and ``b`` rank-2.

    Gradients: ``da = g @ b^T``; ``db = a^T @ g`` (summed over any leading
    batch axis).
    """
    if b.data.ndim != 2 or a.data.ndim < 2:
        raise ShapeError(f"matmul needs (.., m, k) @ (k, n); got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def make_backward(flags):
        def bw(g):
            da = g @ b_data.T if flags[0] else None
            if flags[1]:
                k = a_data.shape[-1]
                n = g.shape[-1]
                db = a_data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = None
            return da, db
        return bw

    return _apply("matmul", (a, b), out, make_backward)


def transpose(x: Tensor) -> Tensor:
    """Rank-2 transpose; gradient is the transpose back."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs rank-2, got {x.shape}")
    return _apply("transpose", (x,), np.ascontiguousarray(x.data.T),
                  lambda flags: lambda g: (np.ascontiguousarray(g.T),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every leading slice of ``x`` (``b.shape`` a suffix of ``x.shape``)."""
    if b.data.ndim >= x.data.ndim or x.data.shape[x.data.ndim - b.data.ndim:] != b.data.shape:
        raise ShapeError(f"add_bias needs trailing shapes to match: {x.shape} + {b.shape}")
    lead = tuple(range(x.data.ndim - b.data.ndim))

    def make_backward(flags):
        def bw(g):
            dx = g if flags[0] else None
            db = g.sum(axis=lead) if flags[1] else None
            return dx, db
        return bw

    return _apply("add_bias", (x, b), x.data + b.data, make_backward)


def tile_batch(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis; gradient sums the copies."""
    out = np.repeat(x.data[None], n, axis=0)
    return _apply("tile_batch", (x,), out,
                  lambda flags: lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# elementwise


def _binary(op: str, a: Tensor, b: Tensor, fwd, da_fn, db_fn) -> Tensor:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op} supports equal or scalar shapes only: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data

    def reduce_to(g, shape):
        if g.shape == shape:
            return g
        return g.sum().reshape(shape)  # scalar operand broadcast against tensor

    def make_backward(flags):
        def bw(g):
            da = reduce_to(da_fn(g, a_data, b_data), a_data.shape) if flags[0] else None
            db = reduce_to(db_fn(g, a_data, b_data), b_data.shape) if flags[1] else None
            return da, db
        return bw

    return _apply(op, (a, b), fwd(a_data, b_data), make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", (x,), x.data * c,
                  lambda flags: lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    return _apply("relu", (x,), np.where(mask, x.data, 0.0),
                  lambda flags: lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _apply("exp", (x,), out, lambda flags: lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x_data = x.data
    return _apply("log", (x,), np.log(x_data),
                  lambda flags: lambda g: (g / x_data,))


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: ``x * Phi(x)``; derivative ``Phi(x) + x * phi(x)``."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    x_data = x.data

    def make_backward(flags):
        def bw(g):
            pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT2PI
            return (g * (phi_cdf + x_data * pdf),)
        return bw

    return _apply("gelu", (x,), x.data * phi_cdf, make_backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "relu": relu, "exp": exp, "log": log}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by kind; ``scale`` takes (tensor, float), the rest Tensors."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; "
                         f"expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# shape surgery


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along ``axis``; gradient scatters into zeros."""
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {x.shape}")
    if not 0 <= start < stop <= x.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{stop}] invalid for shape {x.shape} axis {axis}")
    idx = tuple(slice(None) if d != axis else slice(start, stop)
                for d in range(x.data.ndim))
    shape = x.data.shape

    def make_backward(flags):
        def bw(g):
            dx = np.zeros(shape)
            dx[idx] = g
            return (dx,)
        return bw

    return _apply("narrow", (x,), np.ascontiguousarray(x.data[idx]), make_backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; gradient splits back."""
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_backward(flags):
        def bw(g):
            outs = []
            for i, flag in enumerate(flags):
                if not flag:
                    outs.append(None)
                    continue
                idx = tuple(slice(None) if d != axis else slice(offsets[i], offsets[i + 1])
                            for d in range(g.ndim))
                outs.append(np.ascontiguousarray(g[idx]))
            return outs
        return bw

    return _apply("concat", tuple(parts),
                  np.concatenate([p.data for p in parts], axis=axis), make_backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); gradient scatter-adds rows."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 table, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"gather ids outside [0, {table.data.shape[0]})")
    shape = table.data.shape

    def make_backward(flags):
        def bw(g):
            dt = np.zeros(shape)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, shape[1]))
            return (dt,)
        return bw

    return _apply("gather_rows", (table,), table.data[ids], make_backward)


# ---------------------------------------------------------------------------
# normalization and attention


def _softmax_raw(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to one."""
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    y = _softmax_raw(x.data, ax)

    def make_backward(flags):
        def bw(g):
            dot = (g * y).sum(axis=ax, keepdims=True)
            return (y * (g - dot),)
        return bw

    return _apply("softmax", (x,), y, make_backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature width {d}")
    if eps < 0:
        raise ValueError("layer_norm eps must be >= 0")
    if d == 1 and eps == 0.0:
        raise ShapeError("layer_norm on width-1 rows with eps=0 divides by zero")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    g_data = gamma.data

    def make_backward(flags):
        def bw(g):
            dxhat = g * g_data
            if flags[0]:
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                dx = (dxhat - m1 - xhat * m2) * inv_std
            else:
                dx = None
            lead = tuple(range(g.ndim - 1))
            dgamma = (g * xhat).sum(axis=lead) if flags[1] else None
            dbeta = g.sum(axis=lead) if flags[2] else None
            return dx, dgamma, dbeta
        return bw

    return _apply("layer_norm", (x, gamma, beta), xhat * g_data + beta.data,
                  make_backward)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              causal: bool = False) -> Tensor:
    """Fused multi-head scaled dot-product attention.

    ``q`` is ``(T_q, d)`` or ``(B, T_q, d)``; ``k``/``v`` match with their own
    token count. Heads are split internally so callers stay rank-2/3. The
    causal mask adds a large negative constant above the diagonal before the
    softmax, which underflows to an exact zero weight.
    """
    if q.data.ndim not in (2, 3) or k.data.ndim != q.data.ndim or v.data.ndim != q.data.ndim:
        raise ShapeError(f"attention ranks disagree: {q.shape}, {k.shape}, {v.shape}")
    d = q.data.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    if k.data.shape != v.data.shape or k.data.shape[-1] != d:
        raise ShapeError(f"attention k/v shapes disagree: {k.shape} vs {v.shape}")
    squeeze = q.data.ndim == 2
    qd = q.data[None] if squeeze else q.data
    kd = k.data[None] if squeeze else k.data
    vd = v.data[None] if squeeze else v.data
    if causal and qd.shape[1] != kd.shape[1]:
        raise ShapeError("causal attention needs matching query/key lengths")

    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    qh = _split_heads(qd, n_heads)          # (B, h, Tq, dh)
    kh = _split_heads(kd, n_heads)
    vh = _split_heads(vd, n_heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * inv_sqrt
    if causal:
        t = scores.shape[-1]
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, _MASK_FILL, scores)
    weights = _softmax_raw(scores, -1)       # (B, h, Tq, Tk)
    out = _merge_heads(weights @ vh)
    if squeeze:
        out = out[0]

    def make_backward(flags):
        def bw(g):
            gh = _split_heads(g[None] if squeeze else g, n_heads)
            dw = gh @ vh.transpose(0, 1, 3, 2)
            dv_h = weights.transpose(0, 1, 3, 2) @ gh
            ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
            ds *= inv_sqrt
            dq_h = ds @ kh
            dk_h = ds.transpose(0, 1, 3, 2) @ qh
            dq = _merge_heads(dq_h)
            dk = _merge_heads(dk_h)
            dv = _merge_heads(dv_h)
            if squeeze:
                dq, dk, dv = dq[0], dk[0], dv[0]
            return (dq if flags[0] else None,
                    dk if flags[1] else None,
                    dv if flags[2] else None)
        return bw

    return _apply("attention", (q, k, v), out, make_backward)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _apply("sum", (x,), np.asarray(x.data.sum()),
                  lambda flags: lambda g: (np.full(shape, float(g)),))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax over positions whose target is counted.

    ``logits`` is ``(.., V)``; ``targets`` holds one class id per leading
    position, with ``ignore_index`` marking positions that contribute zero
    loss and zero gradient. Raises ``EmptyLossError`` if nothing is counted.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim < 2:
        raise RankError(f"cross_entropy needs (.., V) logits, got {logits.shape}")
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match "
                         f"logits leading shape {logits.data.shape[:-1]}")
    vocab = logits.data.shape[-1]
    counted = targets != ignore_index
    if not counted.any():
        raise EmptyLossError("all positions ignored: loss undefined")
    if targets[counted].min() < 0 or targets[counted].max() >= vocab:
        raise ShapeError(f"target ids outside [0, {vocab})")

    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    flat_counted = counted.reshape(-1)
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + flat_logits.max(axis=-1)
    rows = np.arange(flat_logits.shape[0])
    nll = lse - flat_logits[rows, flat_targets.clip(0, vocab - 1)]
    n = int(flat_counted.sum())
    loss = np.asarray(nll[flat_counted].sum() / n)
    shape = logits.data.shape

    def make_backward(flags):
        def bw(g):
            probs = _softmax_raw(flat_logits, -1)
            probs[rows, flat_targets.clip(0, vocab - 1)] -= 1.0
            probs[~flat_counted] = 0.0
            return ((float(g) / n) * probs.reshape(shape),)
        return bw

    return _apply("cross_entropy", (logits,), loss, make_backward)
