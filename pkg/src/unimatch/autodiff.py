"""Reverse-mode automatic differentiation on a recording tape.

Dense float64 tensors wrapping numpy arrays.  Every primitive registers a
VJP that is itself expressed through tape operations, so gradients are
ordinary tape nodes and can be differentiated again (double backprop, used
by the Wasserstein gradient penalty).  Two special operators are provided:
``grad_reverse`` (identity forward, negated gradient backward) and
``spectral_normalize`` (one power-iteration step per call, the normalizing
scalar treated as a constant in the backward pass).

Tapes are thread-local: one live tape must never be shared between
threads, but independent tapes may run in parallel over frozen tensors.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.grad_enabled = True
    return _local


class Tape:
    """Ordered list of recorded operations.

    Backward passes visit entries in exact reverse recording order.  VJP
    evaluation may append new entries to the same tape; those are ignored
    by the sweep that created them (they are never ancestors of its root)
    but participate in later sweeps, which is what makes the gradient
    penalty differentiable with respect to critic parameters.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False


class no_grad:
    """Context manager that disables recording (pure numpy evaluation)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


class tape_scope:
    """Yield the active tape when recording; otherwise push a private one.

    Loss builders that need a backward pass internally (the gradient
    penalty) use this so they also work for value-only evaluation.
    """

    def __enter__(self):
        st = _state()
        self._own = not (st.tapes and st.grad_enabled)
        if self._own:
            self._prev = st.grad_enabled
            st.grad_enabled = True
            self._tape = Tape()
            return self._tape.__enter__()
        return st.tapes[-1]

    def __exit__(self, *exc):
        if self._own:
            self._tape.__exit__(*exc)
            _state().grad_enabled = self._prev
        return False


def _check_finite(arr):
    # a single reduction: any NaN/Inf makes the sum non-finite (values large
    # enough to overflow the sum are treated as divergence too)
    if not np.isfinite(np.sum(arr)):
        raise NumericsError("non-finite value at op boundary")


class Tensor:
    """Dense float64 value with an optional gradient slot."""

    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value, requires_grad=False):
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr)
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        out = cls.__new__(cls)
        out.value = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x):
    return as_tensor(x)


def parameter(value):
    return Tensor(value, requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape))


def _apply(value, inputs, vjp):
    """Wrap an op result; record on the active tape when gradients flow."""
    _check_finite(value)
    st = _state()
    rg = st.grad_enabled and bool(st.tapes) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, rg)
    if rg:
        st.tapes[-1].entries.append((out, inputs, vjp))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _apply(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _apply(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _apply(out, (a, b), lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def recip(a):
    a = as_tensor(a)
    out = 1.0 / a.value
    y = None

    def vjp(g):
        return (scale(mul(g, mul(y, y)), -1.0),)

    res = _apply(out, (a,), vjp)
    y = res
    return res


def div(a, b):
    return mul(as_tensor(a), recip(b))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.value @ b.value
    return _apply(out, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected matrix, got shape {a.shape}")
    return _apply(a.value.T.copy(), (a,), lambda g: (transpose(g),))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _apply(a.value * c, (a,), lambda g: (scale(g, c),))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    return _apply(a.value.reshape(shape), (a,), lambda g: (reshape(g, old),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    out = np.broadcast_to(a.value, shape).copy()
    return _apply(out, (a,), lambda g: (_unbroadcast(g, old),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 shadows builtins on purpose
    a = as_tensor(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        gv = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kd = list(in_shape)
            for ax in axes:
                kd[ax] = 1
            gv = reshape(gv, kd)
        elif not keepdims and axis is None:
            gv = reshape(gv, (1,) * len(in_shape)) if in_shape else gv
        return (broadcast_to(gv, in_shape),)

    return _apply(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    y = None

    def vjp(g):
        return (scale(mul(g, recip(y)), 0.5),)

    res = _apply(out, (a,), vjp)
    y = res
    return res


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    y = None

    def vjp(g):
        return (mul(g, y),)

    res = _apply(out, (a,), vjp)
    y = res
    return res


def log(a):
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericsError("log: non-positive input")
    return _apply(np.log(a.value), (a,), lambda g: (mul(g, recip(a)),))


def sigmoid(a):
    a = as_tensor(a)
    v = a.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    y = None

    def vjp(g):
        return (mul(g, mul(y, sub(1.0, y))),)

    res = _apply(out, (a,), vjp)
    y = res
    return res


def relu(a):
    a = as_tensor(a)
    val = a.value

    def vjp(g):
        return (mul(g, constant((val > 0).astype(np.float64))),)

    return _apply(np.maximum(val, 0.0), (a,), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    v = a.value - a.value.max(axis=axis, keepdims=True)
    ev = np.exp(v)
    out = ev / ev.sum(axis=axis, keepdims=True)
    y = None

    def vjp(g):
        gy = mul(g, y)
        return (mul(y, sub(g, sum(gy, axis=axis, keepdims=True))),)

    res = _apply(out, (a,), vjp)
    y = res
    return res


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    for t in tensors:
        if t.ndim != nd:
            raise DimensionError(
                f"concat: rank mismatch {[t.shape for t in tensors]}"
            )
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(narrow(g, axis, start, n))
            start += n
        return tuple(grads)

    return _apply(out, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis (the tape's `slice` op)."""
    a = as_tensor(a)
    if axis >= a.ndim or start + length > a.shape[axis]:
        raise DimensionError(
            f"slice: [{start}:{start + length}] on axis {axis} of shape {a.shape}"
        )
    idx = tuple(
        slice(start, start + length) if d == axis else slice(None) for d in range(a.ndim)
    )
    shape = a.shape

    def vjp(g):
        return (pad_zeros(g, axis, start, shape[axis] - start - length),)

    return _apply(a.value[idx].copy(), (a,), vjp)


def pad_zeros(a, axis, before, after):
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.value, widths)
    n = a.shape[axis]

    def vjp(g):
        return (narrow(g, axis, before, n),)

    return _apply(out, (a,), vjp)


def take_rows(a, indices):
    """Gather rows of a matrix by integer index (embedding lookup)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows: expected matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    n_rows = a.shape[0]

    def vjp(g):
        return (scatter_rows(g, idx, n_rows),)

    return _apply(a.value[idx].copy(), (a,), vjp)


def scatter_rows(a, indices, n_rows):
    """Scatter-add rows into a zero matrix; adjoint of take_rows."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((n_rows, a.shape[1]))
    np.add.at(out, idx, a.value)

    def vjp(g):
        return (take_rows(g, idx),)

    return _apply(out, (a,), vjp)


def l2norm(a, axis=None, keepdims=False):
    return sqrt(sum(square(a), axis=axis, keepdims=keepdims))


def grad_reverse(a):
    """Identity in the forward pass; negates the gradient in the backward."""
    a = as_tensor(a)
    return _apply(a.value, (a,), lambda g: (scale(g, -1.0),))


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; the max shift is a detached constant."""
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = sub(a, constant(m))
    res = log(sum(exp(shifted), axis=axis, keepdims=True))
    res = add(res, constant(m))
    if not keepdims:
        ax = axis % a.ndim
        out_shape = tuple(n for d, n in enumerate(a.shape) if d != ax)
        res = reshape(res, out_shape)
    return res


_OPS = {
    "matmul": lambda ins, kw: matmul(ins[0], ins[1]),
    "add": lambda ins, kw: add(ins[0], ins[1]),
    "mul": lambda ins, kw: mul(ins[0], ins[1]),
    "concat": lambda ins, kw: concat(ins, **kw),
    "sigmoid": lambda ins, kw: sigmoid(ins[0]),
    "relu": lambda ins, kw: relu(ins[0]),
    "softmax": lambda ins, kw: softmax(ins[0], **kw),
    "log": lambda ins, kw: log(ins[0]),
    "sum": lambda ins, kw: sum(ins[0], **kw),
    "mean": lambda ins, kw: mean(ins[0], **kw),
    "square": lambda ins, kw: square(ins[0]),
    "sqrt": lambda ins, kw: sqrt(ins[0]),
    "l2norm": lambda ins, kw: l2norm(ins[0], **kw),
    "transpose": lambda ins, kw: transpose(ins[0]),
    "slice": lambda ins, kw: narrow(ins[0], **kw),
    "scale": lambda ins, kw: scale(ins[0], **kw),
}


def record(op_kind, inputs, **kwargs):
    """Apply a named primitive to `inputs` and record it on the active tape."""
    if op_kind not in _OPS:
        raise ContractError(f"unknown op kind {op_kind!r}")
    inputs = [as_tensor(t) for t in inputs]
    return _OPS[op_kind](inputs, kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar `output` with respect to each tensor in `wrt`.

    Returns one Tensor per entry of `wrt`; tensors that do not participate
    in `output` get zeros.  With ``create_graph=True`` the VJP evaluations
    are themselves recorded, so the returned gradients can be
    differentiated again.
    """
    if output.size != 1:
        raise ContractError(f"grad: output must be scalar, got shape {output.shape}")
    st = _state()
    if not st.tapes:
        raise ContractError("grad: no active tape")
    tape = st.tapes[-1]
    entries = list(tape.entries)
    gmap = {id(output): constant(np.ones_like(output.value))}
    ctx = _NullCtx() if create_graph else no_grad()
    with ctx:
        for out, inputs, vjp in reversed(entries):
            g = gmap.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = gmap.get(id(t))
                gmap[id(t)] = gi if prev is None else add(prev, gi)
    results = []
    for p in wrt:
        g = gmap.get(id(p))
        if g is None:
            g = constant(np.zeros_like(p.value))
        elif g.shape != p.shape:
            g = reshape(g, p.shape)
        results.append(g)
    return results


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(loss, wrt):
    """Populate `.grad` (numpy) on every tensor in `wrt` for a scalar loss."""
    gs = grad(loss, wrt, create_graph=False)
    for p, g in zip(wrt, gs):
        p.grad = g.value
    return gs


def input_gradient(critic_apply, x):
    """Gradient of a per-row scalar critic with respect to its input rows.

    The result is built out of tape operations, so a penalty constructed
    from it remains differentiable with respect to the critic parameters.
    Without an active tape (value-only evaluation) a private tape is used
    and the plain gradient values are returned.
    """

    def _run(create_graph):
        out = critic_apply(x)
        n = x.shape[0] if x.ndim > 0 else 1
        if out.size != n:
            raise ContractError(
                f"input_gradient: critic must be scalar per row, got {out.shape} for {x.shape}"
            )
        (g,) = grad(sum(out), [x], create_graph=create_graph)
        return g

    st = _state()
    if st.tapes and st.grad_enabled:
        return _run(create_graph=True)
    prev = st.grad_enabled
    st.grad_enabled = True
    try:
        with Tape():
            return _run(create_graph=False)
    finally:
        st.grad_enabled = prev


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

_SN_TINY = 1e-12


@dataclass
class SpectralState:
    """Power-iteration vectors for one weight matrix."""

    u: np.ndarray
    v: np.ndarray
    n_iters: int = 0
    degenerate: bool = False

    @classmethod
    def initialize(cls, w_value, rng, warmup=20):
        m, n = w_value.shape
        u = rng.standard_normal(m)
        u /= np.linalg.norm(u)
        state = cls(u=u, v=np.zeros(n), n_iters=0)
        for _ in range(max(1, warmup)):
            state._step(w_value)
        return state

    def _step(self, w_value):
        wu = w_value.T @ self.u
        nv = np.linalg.norm(wu)
        if nv < _SN_TINY:
            self.degenerate = True
            return False
        v = wu / nv
        wv = w_value @ v
        nu = np.linalg.norm(wv)
        if nu < _SN_TINY:
            self.degenerate = True
            return False
        self.u = wv / nu
        self.v = v
        self.n_iters += 1
        self.degenerate = False
        return True


def spectral_normalize(W, state):
    """One power-iteration step, then W divided by the estimated top
    singular value.  No gradient flows through the estimate."""
    W = as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"spectral_normalize: expected matrix, got {W.shape}")
    if state.u.shape[0] != W.shape[0]:
        raise DimensionError(
            f"spectral_normalize: state u dim {state.u.shape[0]} vs matrix {W.shape}"
        )
    if not state._step(W.value):
        return W
    sigma = float(state.u @ W.value @ state.v)
    if not np.isfinite(sigma) or abs(sigma) < _SN_TINY:
        state.degenerate = True
        return W
    return scale(W, 1.0 / sigma)
