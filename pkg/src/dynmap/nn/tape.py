"""Tensors and a tape-based reverse-mode differentiator.

The trainer owns a :class:`Tape`; every op is a method on it and appends a
backward closure to an explicit list.  ``Tape(record=False)`` runs the same
forward code without bookkeeping, for inference.
"""
from __future__ import annotations

import numpy as np

from . import functional as F


class NonFiniteError(FloatingPointError):
    """An op produced NaN or infinity."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} dtype={self.data.dtype}>"

    def item(self) -> float:
        return float(self.data)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(ax, keepdims=True)
    return g


class Tape:
    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.entries = []

    # -------------------------------------------------------- plumbing

    def _out(self, data, inputs, backward, op):
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        req = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=req)
        if req:
            self.entries.append(((out,), backward))
        return out

    def _outs(self, datas, inputs, backward, op):
        if self.check_finite and not all(np.all(np.isfinite(d)) for d in datas):
            raise NonFiniteError(f"{op} produced non-finite values")
        req = self.record and any(t.requires_grad for t in inputs)
        outs = tuple(Tensor(d, requires_grad=req) for d in datas)
        if req:
            self.entries.append((outs, backward))
        return outs

    def backward(self, loss: Tensor, grad=None):
        """Propagate from ``loss``; parameter gradients accumulate."""
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.data.dtype)
        for outs, fn in reversed(self.entries):
            grads = [o.grad for o in outs]
            if all(g is None for g in grads):
                continue
            fn(*grads)
        self.entries.clear()

    # -------------------------------------------------------- elementwise

    def add(self, a, b):
        a, b = as_tensor(a), as_tensor(b)

        def bw(g):
            _acc(a, g)
            _acc(b, g)
        return self._out(a.data + b.data, (a, b), bw, "add")

    def sub(self, a, b):
        a, b = as_tensor(a), as_tensor(b)

        def bw(g):
            _acc(a, g)
            _acc(b, -g)
        return self._out(a.data - b.data, (a, b), bw, "sub")

    def mul(self, a, b):
        a, b = as_tensor(a), as_tensor(b)

        def bw(g):
            _acc(a, g * b.data)
            _acc(b, g * a.data)
        return self._out(a.data * b.data, (a, b), bw, "mul")

    def scale(self, a, s: float):
        a = as_tensor(a)
        return self._out(a.data * s, (a,), lambda g: _acc(a, g * s), "scale")

    def relu(self, x):
        mask = x.data > 0
        return self._out(x.data * mask, (x,), lambda g: _acc(x, g * mask), "relu")

    def elu(self, x):
        y = F.elu(x.data)
        return self._out(y, (x,), lambda g: _acc(x, F.elu_grad(y, g.astype(y.dtype, copy=False))), "elu")

    def tanh(self, x):
        y = np.tanh(x.data)
        return self._out(y, (x,), lambda g: _acc(x, g * (1.0 - y * y)), "tanh")

    def sigmoid(self, x):
        y = F.sigmoid(x.data)
        return self._out(y, (x,), lambda g: _acc(x, g * y * (1.0 - y)), "sigmoid")

    def activation(self, x, name: str):
        return getattr(self, name)(x)

    # -------------------------------------------------------- shape

    def reshape(self, x, shape):
        old = x.shape
        return self._out(x.data.reshape(shape), (x,), lambda g: _acc(x, g.reshape(old)), "reshape")

    def concat(self, xs, axis=-1):
        xs = [as_tensor(x) for x in xs]
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

        def bw(g):
            for x, part in zip(xs, np.split(g, sizes, axis=axis)):
                _acc(x, part)
        return self._out(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")

    def stack(self, xs, axis=0):
        xs = list(xs)

        def bw(g):
            for k, x in enumerate(xs):
                _acc(x, np.take(g, k, axis=axis))
        return self._out(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")

    def take(self, x, index, axis=0):
        """``x`` indexed at a single position (or slice) along ``axis``."""
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        sl = tuple(sl)

        def bw(g):
            full = np.zeros_like(x.data)
            full[sl] = g
            _acc(x, full)
        return self._out(x.data[sl], (x,), bw, "take")

    def detach(self, x):
        return Tensor(x.data)

    # -------------------------------------------------------- layers

    def dense(self, x, W, b):
        x = as_tensor(x)
        if x.shape[-1] != W.shape[0]:
            raise ValueError(f"dense: input width {x.shape[-1]} != weight rows {W.shape[0]}")
        lead = x.shape[:-1]
        x2 = x.data.reshape(-1, x.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            dx, dW, db = F.dense_backward(g2, x2, W.data)
            _acc(x, dx.reshape(x.shape))
            _acc(W, dW)
            _acc(b, db)
        y = F.dense_forward(x2, W.data, b.data).reshape(lead + (W.shape[1],))
        return self._out(y, (x, W, b), bw, "dense")

    def conv2d(self, x, W, b, stride=1, pad=0):
        x = as_tensor(x)
        y, cols = F.conv2d_forward(x.data, W.data, b.data, stride, pad, return_cols=True)

        def bw(g):
            if x.requires_grad:
                _acc(x, F.conv2d_backward_input(g, W.data, x.shape, stride, pad))
            _acc(W, F.conv2d_backward_weight(g, None, W.shape, stride, pad, cols=cols))
            _acc(b, g.sum((0, 1, 2)))
        return self._out(y, (x, W, b), bw, "conv2d")

    def deconv2d(self, x, W, b, stride=1, pad=0):
        x = as_tensor(x)
        y = F.deconv2d_forward(x.data, W.data, b.data, stride, pad)

        def bw(g):
            dx, dW, db = F.deconv2d_backward(g, x.data, W.data, stride, pad)
            _acc(x, dx)
            _acc(W, dW)
            _acc(b, db)
        return self._out(y, (x, W, b), bw, "deconv2d")

    def lstm_cell(self, x, h, c, Wx, Wh, b):
        x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
        h_new, c_new, cache = F.lstm_cell_forward(x.data, h.data, c.data, Wx.data, Wh.data, b.data)

        def bw(gh, gc):
            dx, dh, dc, dWx, dWh, db = F.lstm_cell_backward(gh, gc, cache, Wx.data, Wh.data)
            _acc(x, dx)
            _acc(h, dh)
            _acc(c, dc)
            _acc(Wx, dWx)
            _acc(Wh, dWh)
            _acc(b, db)
        return self._outs((h_new, c_new), (x, h, c, Wx, Wh, b), bw, "lstm_cell")

    # -------------------------------------------------------- reductions and losses

    def sum(self, x):
        return self._out(np.asarray(x.data.sum(dtype=np.float64)), (x,),
                         lambda g: _acc(x, np.full(x.shape, g)), "sum")

    def weighted_sum(self, terms):
        """``sum(w * t)`` over ``(weight, scalar tensor)`` pairs."""
        terms = [(float(w), t) for w, t in terms]
        val = np.asarray(sum(w * float(t.data) for w, t in terms), dtype=np.float64)

        def bw(g):
            for w, t in terms:
                _acc(t, g * w)
        return self._out(val, [t for _, t in terms], bw, "weighted_sum")

    def l1_loss(self, pred, target, batch_dims=1):
        """Mean over the leading ``batch_dims`` axes of the per-sample L1 sum."""
        pred, target = as_tensor(pred), as_tensor(target)
        if pred.shape != target.shape:
            raise ValueError(f"l1_loss: shape {pred.shape} != {target.shape}")
        d = pred.data.astype(np.float64) - target.data
        n = int(np.prod(pred.shape[:batch_dims]))
        val = np.abs(d).sum() / n

        def bw(g):
            s = np.sign(d) * (g / n)
            _acc(pred, s)
            _acc(target, -s)
        return self._out(np.asarray(val), (pred, target), bw, "l1_loss")

    def l2_loss(self, pred, target, batch_dims=1):
        """Mean over the leading axes of the per-sample squared error sum."""
        pred, target = as_tensor(pred), as_tensor(target)
        if pred.shape != target.shape:
            raise ValueError(f"l2_loss: shape {pred.shape} != {target.shape}")
        d = pred.data.astype(np.float64) - target.data
        n = int(np.prod(pred.shape[:batch_dims]))
        val = (d * d).sum() / n

        def bw(g):
            s = 2.0 * d * (g / n)
            _acc(pred, s)
            _acc(target, -s)
        return self._out(np.asarray(val), (pred, target), bw, "l2_loss")

    def l2_norm_loss(self, pred, target, batch_dims=1):
        """Mean over the leading axes of the per-sample Euclidean distance."""
        pred, target = as_tensor(pred), as_tensor(target)
        if pred.shape != target.shape:
            raise ValueError(f"l2_norm_loss: shape {pred.shape} != {target.shape}")
        d = pred.data.astype(np.float64) - target.data
        lead = pred.shape[:batch_dims]
        d2 = d.reshape(lead + (-1,))
        norms = np.sqrt((d2 * d2).sum(-1))
        n = int(np.prod(lead))
        val = norms.sum() / n

        def bw(g):
            safe = np.where(norms > 0, norms, 1.0)
            s = (d2 / safe[..., None]) * (g / n)
            s = np.where(norms[..., None] > 0, s, 0.0).reshape(pred.shape)
            _acc(pred, s)
            _acc(target, -s)
        return self._out(np.asarray(val), (pred, target), bw, "l2_norm_loss")
