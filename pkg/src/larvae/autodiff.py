"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every op executed while a Tape is active appends one entry
(output, inputs, backward rule) in execution order, so the tape is already
topologically sorted and backward() is a single reverse sweep. Tensors built
outside a tape are plain values.

Implicit broadcasting in elementwise ops is restricted to the scalar and
trailing-dimension cases; anything richer must go through the explicit
`broadcast` op.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class DomainError(ValueError):
    """Input outside an op's numerical domain."""

    def __init__(self, op, detail):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """A float64 array plus gradient slot.

    `data` is the n-d array; `values` exposes the flat row-major view the
    serialization code writes. `grad`, when populated, matches `data`'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data.reshape(-1)

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Wrap an array as a non-differentiable Tensor."""
    return Tensor(x)


# ---------------------------------------------------------------------------
# tape

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of ops; one tape per training step, one per thread."""

    __slots__ = ("entries", "_outer")

    def __init__(self):
        self.entries = []
        self._outer = None

    def __enter__(self):
        self._outer = getattr(_STATE, "tape", None)
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._outer
        return False

    def backward(self, root):
        backward(self, root)


def _record(out, inputs, rule):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append((out, inputs, rule))


def backward(tape, root):
    """Populate grads of every requires_grad tensor on the tape.

    Nodes that do not reach `root` end up with zero grads. Accumulates into
    existing `grad` arrays (zero_grad first for a fresh pass).
    """
    if root.data.size != 1:
        raise ShapeError("backward: root must be scalar, got", root.data.shape)
    if root.grad is None:
        root.grad = np.ones_like(root.data)
    else:
        root.grad = root.grad + np.ones_like(root.data)
    for out, inputs, rule in reversed(tape.entries):
        g = out.grad
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in inputs)
        if not any(needs):
            continue
        for t, gt in zip(inputs, rule(g, needs)):
            if gt is None:
                continue
            if t.grad is None:
                t.grad = np.array(gt)  # copy: rules may alias the output grad
            else:
                t.grad += gt
    for out, inputs, _ in tape.entries:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        if out.requires_grad and out.grad is None:
            out.grad = np.zeros_like(out.data)


def zero_grad(tensors):
    """Reset grads to zero arrays (accepts any iterable or dict of Tensors)."""
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# broadcasting helpers (scalar + trailing-dimension only)


def _check_elementwise(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(op, sa, sb)


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_like(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def rule(g, needs):
        return (
            _reduce_to(g, a.data.shape) if needs[0] else None,
            _reduce_to(g, b.data.shape) if needs[1] else None,
        )

    _record(out, (a, b), rule)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def rule(g, needs):
        return (
            _reduce_to(g, a.data.shape) if needs[0] else None,
            _reduce_to(-g, b.data.shape) if needs[1] else None,
        )

    _record(out, (a, b), rule)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def rule(g, needs):
        return (
            _reduce_to(g * b.data, a.data.shape) if needs[0] else None,
            _reduce_to(g * a.data, b.data.shape) if needs[1] else None,
        )

    _record(out, (a, b), rule)
    return out


def scalar_mul(x, c):
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c, x.requires_grad)

    def rule(g, needs):
        return (g * c,)

    _record(out, (x,), rule)
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div", "zero denominator")
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def rule(g, needs):
        ga = _reduce_to(g / b.data, a.data.shape) if needs[0] else None
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None
        return ga, gb

    _record(out, (a, b), rule)
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad)

    def rule(g, needs):
        return (g * (x.data > 0.0),)

    _record(out, (x,), rule)
    return out


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        d = np.exp(x.data)
    if not np.all(np.isfinite(d)):
        raise DomainError("exp", "overflow to non-finite value")
    out = Tensor(d, x.requires_grad)

    def rule(g, needs):
        return (g * d,)

    _record(out, (x,), rule)
    return out


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log", "non-positive input")
    out = Tensor(np.log(x.data), x.requires_grad)

    def rule(g, needs):
        return (g / x.data,)

    _record(out, (x,), rule)
    return out


def square(x):
    x = _as_tensor(x)
    out = Tensor(x.data * x.data, x.requires_grad)

    def rule(g, needs):
        return (g * (2.0 * x.data),)

    _record(out, (x,), rule)
    return out


def sqrt(x):
    x = _as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt", "negative input")
    d = np.sqrt(x.data)
    out = Tensor(d, x.requires_grad)

    def rule(g, needs):
        return (g * (0.5 / d),)

    _record(out, (x,), rule)
    return out


def _stable_sigmoid(d):
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = Tensor(s, x.requires_grad)

    def rule(g, needs):
        return (g * s * (1.0 - s),)

    _record(out, (x,), rule)
    return out


def softplus(x):
    x = _as_tensor(x)
    out = Tensor(np.logaddexp(0.0, x.data), x.requires_grad)

    def rule(g, needs):
        return (g * _stable_sigmoid(x.data),)

    _record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# reductions and structure ops


def tensor_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    out = Tensor(np.sum(x.data, axis=axes, keepdims=keepdims), x.requires_grad)

    def rule(g, needs):
        return (_expand_like(g, x.data.shape, axes, keepdims),)

    _record(out, (x,), rule)
    return out


def tensor_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    if axes is None:
        count = x.data.size
    else:
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    if count == 0:
        raise DomainError("mean", "reduction over zero elements")
    out = Tensor(np.sum(x.data, axis=axes, keepdims=keepdims) / count, x.requires_grad)

    def rule(g, needs):
        return (_expand_like(g / count, x.data.shape, axes, keepdims),)

    _record(out, (x,), rule)
    return out


def broadcast(x, shape):
    """Explicit broadcast to `shape` (numpy rules); backward sums it away."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        d = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast", x.data.shape, shape) from None
    out = Tensor(np.ascontiguousarray(d), x.requires_grad)

    def rule(g, needs):
        return (_reduce_to(g, x.data.shape),)

    _record(out, (x,), rule)
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        d = np.reshape(x.data, shape)
    except ValueError:
        raise ShapeError("reshape", x.data.shape, shape) from None
    out = Tensor(d, x.requires_grad)

    def rule(g, needs):
        return (g.reshape(x.data.shape),)

    _record(out, (x,), rule)
    return out


def concat_last(*tensors):
    """Concatenate along the last axis."""
    ts = [_as_tensor(t) for t in tensors]
    lead = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.shape[:-1] != lead or t.data.ndim != ts[0].data.ndim:
            raise ShapeError("concat", ts[0].data.shape, t.data.shape)
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1),
                 any(t.requires_grad for t in ts))
    widths = [t.data.shape[-1] for t in ts]

    def rule(g, needs):
        grads, lo = [], 0
        for t, w, need in zip(ts, widths, needs):
            grads.append(g[..., lo:lo + w] if need else None)
            lo += w
        return grads

    _record(out, tuple(ts), rule)
    return out


def slice_last(x, start, stop):
    """Slice [start:stop] along the last axis."""
    x = _as_tensor(x)
    last = x.data.shape[-1]
    if not (0 <= start <= stop <= last):
        raise ShapeError(f"slice [{start}:{stop}] on last axis of", x.data.shape)
    out = Tensor(np.ascontiguousarray(x.data[..., start:stop]), x.requires_grad)

    def rule(g, needs):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    _record(out, (x,), rule)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def rule(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    _record(out, (a, b), rule)
    return out


def logsumexp(x, axis):
    """Overflow-safe log-sum-exp along one axis (typically the batch axis)."""
    x = _as_tensor(x)
    axis = axis % x.data.ndim
    if x.data.shape[axis] == 0:
        raise DomainError("logsumexp", "empty reduction axis")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = Tensor(np.squeeze(m + np.log(s), axis=axis), x.requires_grad)

    def rule(g, needs):
        return (np.expand_dims(g, axis) * (e / s),)

    _record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# 2-D convolutions (direct, via im2col; desk-scale images only)


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    b, c, _, _ = xp_shape
    dxp = np.zeros(xp_shape, dtype=np.float64)
    dc = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, :, i, j]
    return dxp


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2-D convolution. x: (B,Cin,H,W), w: (Cout,Cin,kh,kw), bias: (Cout,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", x.data.shape, w.data.shape)
    b_, ci, h, wd = x.data.shape
    co, _, kh, kw = w.data.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input", x.data.shape, w.data.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(co, -1)
    y = np.matmul(wm, cols).reshape(b_, co, ho, wo)
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError("conv2d bias", bias.data.shape, (co,))
        y = y + bias.data[:, None, None]
        inputs.append(bias)
    out = Tensor(y, any(t.requires_grad for t in inputs))

    def rule(g, needs):
        g2 = g.reshape(b_, co, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(wm.T, g2)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd]
        if needs[1]:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(needs)]

    _record(out, tuple(inputs), rule)
    return out


def conv_transpose2d(x, w, bias=None, stride=1, padding=0):
    """Transposed 2-D convolution (adjoint of conv2d with the same geometry).

    x: (B,Cin,h,w), w: (Cin,Cout,kh,kw); output (B,Cout,(h-1)*stride-2p+kh, ...).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError("transposed-conv2d", x.data.shape, w.data.shape)
    b_, ci, h, wd = x.data.shape
    _, co, kh, kw = w.data.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError("transposed-conv2d: degenerate output", x.data.shape, w.data.shape)
    wm = w.data.reshape(ci, -1)  # (Cin, Cout*kh*kw)
    x2 = x.data.reshape(b_, ci, h * wd)
    cols = np.matmul(wm.T, x2)  # (B, Cout*kh*kw, h*w)
    yp_shape = (b_, co, ho + 2 * padding, wo + 2 * padding)
    yp = _col2im(cols, yp_shape, kh, kw, stride, h, wd)
    y = yp[:, :, padding:padding + ho, padding:padding + wo]
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError("transposed-conv2d bias", bias.data.shape, (co,))
        y = y + bias.data[:, None, None]
        inputs.append(bias)
    out = Tensor(np.ascontiguousarray(y), any(t.requires_grad for t in inputs))

    def rule(g, needs):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _im2col(gp, kh, kw, stride, h, wd)  # (B, Cout*kh*kw, h*w)
        gx = gw = gb = None
        if needs[0]:
            gx = np.matmul(wm, gcols).reshape(x.data.shape)
        if needs[1]:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(needs)]

    _record(out, tuple(inputs), rule)
    return out


# ---------------------------------------------------------------------------
# generic dispatch + gradient checking

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed-conv2d": conv_transpose2d,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "broadcast": broadcast,
    "reshape": reshape,
    "concat": concat_last,
    "slice": slice_last,
    "logsumexp": logsumexp,
}


def forward_op(kind, *inputs, **attrs):
    """Dispatch an op by kind string (see _OPS for the registry)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def op_kinds():
    return tuple(_OPS)


@dataclass
class GradCheckReport:
    """Max relative error per parameter plus an overall pass flag."""

    per_param: dict = field(default_factory=dict)
    worst: float = 0.0
    tol: float = 1e-4
    passed: bool = True


def grad_check(f, params, step=1e-5, tol=1e-4):
    """Compare tape gradients of scalar f() against central finite differences.

    `params` is a dict or sequence of requires_grad Tensors that f reads.
    Relative error uses denominator max(|analytic|, |fd|, 1), so near-zero
    gradients are checked absolutely. f must be deterministic (freeze any
    noise) and finite at all perturbed points.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", t) for i, t in enumerate(params)]
    zero_grad([t for _, t in named])
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check: f must be scalar, got", out.data.shape)
    if not np.isfinite(out.data.item()):
        raise DomainError("grad_check", "non-finite value of f")
    tape.backward(out)
    analytic = {name: t.grad.copy() for name, t in named}

    report = GradCheckReport(tol=tol)
    for name, t in named:
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().data.item()
            flat[i] = orig - step
            fm = f().data.item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError("grad_check", f"non-finite f at perturbed {name}[{i}]")
            fd = (fp - fm) / (2.0 * step)
            rel = abs(a[i] - fd) / max(abs(a[i]), abs(fd), 1.0)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.worst = max(report.worst, worst)
    report.passed = report.worst <= tol
    return report
