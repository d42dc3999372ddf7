"""Tape-based reverse-mode autodiff over dense float64 numpy arrays.

The op set is intentionally small: exactly what the sequence decoder and the
variational objectives need (matmul, broadcast arithmetic, nonlinearities,
softmax, layer norm, windowed causal attention, concat/slice, reductions).
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "concat",
    "softmax",
    "layer_norm",
    "attention",
    "squared_error",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite data is required."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of operations; creation order is a topological order.

    A tape is single-threaded. Tensors created while no tape is active are
    plain immutable values and never receive gradients.
    """

    def __init__(self):
        self._ops = []  # (out, inputs, backward_fn)

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out, inputs, backward_fn):
        self._ops.append((out, inputs, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires-grad leaf."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self._ops}
        for out, inputs, backward_fn in reversed(self._ops):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for t, g in zip(inputs, backward_fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:  # leaf: expose accumulated gradient
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    # defer += until all uses folded in via the grads dict
        # flush leaf grads
        for out, inputs, _ in self._ops:
            for t in inputs:
                key = id(t)
                if key in grads and t.requires_grad:
                    t.grad += grads.pop(key)
        if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += grads.pop(id(loss))


class Tensor:
    """Dense float64 array plus an optional gradient slot.

    requires_grad marks trainable leaves; derived tensors inherit the flag so
    the tape knows which backward rules to run.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: (_unbroadcast(g / b, a.shape),
                                        _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return _unary(self, lambda a: a ** p, lambda g, a, out: g * p * a ** (p - 1))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        # 1-D operands route through reshape so the 2-D backward rule applies
        if a.ndim == 1 and b.ndim == 1:
            return (self * other).sum()
        if a.ndim == 1:
            return (self.reshape(1, -1) @ other)[..., 0, :]
        if b.ndim == 1:
            return (self @ other.reshape(-1, 1))[..., :, 0]
        need_a, need_b = self.requires_grad, other.requires_grad

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if need_a else None
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if need_b else None
            return ga, gb

        return _make(a @ b, (self, other), backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _make(self.data.reshape(shape), (self,),
                     lambda g: (g.reshape(old),))

    def swapaxes(self, ax1, ax2):
        return _make(np.swapaxes(self.data, ax1, ax2), (self,),
                     lambda g: (np.swapaxes(g, ax1, ax2),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        out = self.data[idx]
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        return _make(out, (self,), backward)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, self.data.shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self):
        return _unary(self, np.exp, lambda g, a, out: g * out)

    def log(self):
        return _unary(self, np.log, lambda g, a, out: g / a)

    def tanh(self):
        return _unary(self, np.tanh, lambda g, a, out: g * (1.0 - out * out))

    def relu(self):
        return _unary(self, lambda a: np.maximum(a, 0.0),
                      lambda g, a, out: g * (a > 0.0))

    def gelu(self):
        # tanh approximation, the transformer default
        c = np.sqrt(2.0 / np.pi)
        a = self.data
        a2 = a * a
        t = np.tanh(c * (a + 0.044715 * (a2 * a)))

        def backward(g):
            dt = (1.0 - t * t) * c * (1.0 + 0.134145 * a2)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)

        return _make(0.5 * a * (1.0 + t), (self,), backward)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward_fn)
    return out


def _unary(t: Tensor, fwd, bwd) -> Tensor:
    data = fwd(t.data)
    return _make(data, (t,), lambda g: (bwd(g, t.data, data),))


def _binary(a: Tensor, b, fwd, bwd) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not conform: {e}") from None

    def backward(g):
        ga, gb = bwd(g, a.data, b.data)
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _make(data, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input to softmax")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (t,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x = t.data
    gamma, beta = _lift(gamma), _lift(beta)
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (t, gamma, beta), backward)


def squared_error(a: Tensor, b) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    d = _lift(a) - _lift(b)
    return (d * d).sum()


def attention(q: Tensor, k: Tensor, v: Tensor, window: int | None = None) -> Tensor:
    """Scaled dot-product attention over the -2 axis.

    q: (..., T, d), k/v: (..., S, d). With window=w, query i attends only to
    keys j in [i-w+1, i] (causal sliding window; requires S == T). window=None
    is full bidirectional attention (used for cross-attending to latent
    tokens, which carry no positions).
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape[:-1] != v.data.shape[:-1]:
        raise ShapeError(f"attention shapes do not conform: q{q.shape} k{k.shape} v{v.shape}")
    if k.data.shape[-2] == 0:
        raise ShapeError("attention over an empty key axis")
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    if window is None:
        return _attention_dense(q, k, v, scale, None)
    T, S = q.data.shape[-2], k.data.shape[-2]
    if T != S:
        raise ShapeError(f"windowed attention needs square T, got T={T} S={S}")
    if T <= 2 * window:
        i = np.arange(T)[:, None]
        j = np.arange(T)[None, :]
        mask = np.where((j > i) | (j < i - window + 1), -np.inf, 0.0)
        return _attention_dense(q, k, v, scale, mask)
    return _attention_banded(q, k, v, scale, window)


def _attention_dense(q, k, v, scale, mask):
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ k.data) * scale
        dk = (np.swapaxes(ds, -1, -2) @ q.data) * scale
        return (_unbroadcast(dq, q.shape), _unbroadcast(dk, k.shape),
                _unbroadcast(dv, v.shape))

    return _make(out, (q, k, v), backward)


def _swv(x, W):
    return np.lib.stride_tricks.sliding_window_view(x, W, axis=-2)


def _band_gather(band, x, W):
    """sum_delta band[j+delta, W-1-delta] * x[j+delta] along the -2 axis.

    Adjoint of the banded gather: routes per-slot cotangents back to key
    positions without a scatter loop (flip the band, pad the tail, read the
    window diagonal).
    """
    pad = [(0, 0)] * (band.ndim - 2) + [(0, W - 1), (0, 0)]
    dsf = np.pad(band[..., ::-1], pad)
    xpad = np.pad(x, pad)
    diag = np.einsum("...jww->...jw", _swv(dsf, W))
    return (_swv(xpad, W) @ diag[..., None])[..., 0]


def _attention_banded(q, k, v, scale, window):
    """Sliding-window path: materializes (T, W) score bands, not (T, T).

    Band slot (t, w) refers to key index t - (W-1) + w, so w = W-1 is self.
    """
    T = q.data.shape[-2]
    W = window
    lead = q.data.shape[:-2]
    pad = [(0, 0)] * len(lead) + [(W - 1, 0), (0, 0)]
    kwin = _swv(np.pad(k.data, pad), W)  # (..., T, d, W) strided view
    vwin = _swv(np.pad(v.data, pad), W)
    qs = q.data * scale
    scores = (qs[..., None, :] @ kwin)[..., 0, :]
    invalid = (np.arange(T)[:, None] - (W - 1) + np.arange(W)[None, :]) < 0
    scores[..., invalid] = -np.inf
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = (vwin @ p[..., None])[..., 0]

    def backward(g):
        dp = (g[..., None, :] @ vwin)[..., 0, :]
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (kwin @ ds[..., None])[..., 0] * scale
        dk = _band_gather(ds, qs, W)
        dv = _band_gather(p, g, W)
        return (_unbroadcast(dq, q.shape), _unbroadcast(dk, k.shape),
                _unbroadcast(dv, v.shape))

    return _make(out, (q, k, v), backward)
