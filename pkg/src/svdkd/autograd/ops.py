"""Differentiable operations over :class:`Tensor`.

Image tensors are NHWC, convolution kernels HWIO.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Function, ShapeError, Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, a, b) from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.saved = (a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, a, c=1.0):
        self.saved = (DTYPE(c),)
        return a * DTYPE(c)

    def backward(self, g):
        return (g * self.saved[0],)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * self.saved[0],)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        mask = a > 0
        self.saved = (mask,)
        return np.where(mask, a, DTYPE(0))

    def backward(self, g):
        return (g * self.saved[0],)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        shape = tuple(int(s) for s in shape)
        if -1 not in shape and int(np.prod(shape)) != a.size:
            raise ShapeError(self.name, a.shape, shape)
        self.saved = (a.shape,)
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(self.name, a.shape, shape) from None

    def backward(self, g):
        return (g.reshape(self.saved[0]),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None):
        self.saved = (a.shape, axis)
        return np.asarray(a.sum(axis=axis), dtype=DTYPE)

    def backward(self, g):
        shape, axis = self.saved
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
        return (np.broadcast_to(g, shape).astype(DTYPE),)


class Take(Function):
    """Gather along one axis; indices are constants of the graph."""

    name = "take"

    def forward(self, a, indices=None, axis=0):
        indices = np.asarray(indices, dtype=np.intp)
        self.saved = (a.shape, indices, axis)
        return np.take(a, indices, axis=axis)

    def backward(self, g):
        shape, indices, axis = self.saved
        out = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.name, a.shape, b.shape)
        _broadcast_shape(self.name, a.shape[:-2], b.shape[:-2])
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.saved
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _conv_padding(padding: str, kh: int, kw: int) -> tuple:
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding == "same":
        return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2
    raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, stride=1, padding="same"):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(self.name, x.shape, w.shape, detail="NHWC input, HWIO kernel")
        if stride < 1:
            raise ValueError("conv2d: stride must be >= 1")
        kh, kw, cin, cout = w.shape
        top, bottom, left, right = _conv_padding(padding, kh, kw)
        if top or bottom or left or right:
            xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        else:
            xp = x
        n, hp, wp, _ = xp.shape
        if hp < kh or wp < kw:
            raise ShapeError(self.name, x.shape, w.shape, detail="kernel larger than input")
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        # (n, ho, wo, cin, kh, kw) view, strided
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
        out = cols @ w.reshape(kh * kw * cin, cout)
        self.saved = (cols, w, x.shape, xp.shape, (top, left), stride, (ho, wo))
        return out.reshape(n, ho, wo, cout)

    def backward(self, g):
        cols, w, xshape, xpshape, (top, left), stride, (ho, wo) = self.saved
        kh, kw, cin, cout = w.shape
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        if not self.needs_grad[0]:
            return None, gw
        n = g.shape[0]
        gxp = np.zeros(xpshape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                part = (g2 @ w[i, j].T).reshape(n, ho, wo, cin)
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += part
        gx = gxp[:, top:top + xshape[1], left:left + xshape[2], :]
        return gx, gw


class MaxPool2d(Function):
    name = "maxpool2d"

    def forward(self, x, size=2):
        if x.ndim != 4:
            raise ShapeError(self.name, x.shape, detail="expected NHWC")
        n, h, w, c = x.shape
        ho, wo = h // size, w // size
        if ho == 0 or wo == 0:
            raise ShapeError(self.name, x.shape, detail=f"pool size {size} exceeds input")
        xc = x[:, : ho * size, : wo * size, :]
        blocks = xc.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        self.saved = (x.shape, idx, size)
        return out

    def backward(self, g):
        shape, idx, size = self.saved
        n, h, w, c = shape
        ho, wo = g.shape[1], g.shape[2]
        onehot = np.zeros((n, ho, wo, c, size * size), dtype=DTYPE)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        blocks = onehot.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros(shape, dtype=DTYPE)
        gx[:, : ho * size, : wo * size, :] = blocks.reshape(n, ho * size, wo * size, c)
        return (gx,)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy over the samples selected by ``mask``.

    With no selected samples the loss is 0 and so is its gradient.
    """

    name = "softmax_cross_entropy"

    def forward(self, logits, labels=None, mask=None):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
            raise ShapeError(self.name, logits.shape, labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError(f"{self.name}: label out of range [0, {logits.shape[1]})")
        mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        count = int(mask.sum())
        rows = np.arange(labels.size)
        nll = -logp[rows, labels]
        loss = nll[mask].sum() / count if count else 0.0
        self.saved = (np.exp(logp), labels, mask, count)
        return np.asarray(loss, dtype=DTYPE)

    def backward(self, g):
        probs, labels, mask, count = self.saved
        if count == 0:
            return (np.zeros(probs.shape, dtype=DTYPE),)
        d = probs.copy()
        d[np.arange(labels.size), labels] -= 1.0
        d *= mask[:, None] / count
        return ((d * g).astype(DTYPE),)


class L2Norm(Function):
    name = "l2_norm"

    def forward(self, a):
        norm = np.sqrt(np.sum(a.astype(np.float64) ** 2))
        self.saved = (a, norm)
        return np.asarray(norm, dtype=DTYPE)

    def backward(self, g):
        a, norm = self.saved
        if norm == 0:
            return (np.zeros_like(a),)
        return ((g * a / norm).astype(DTYPE),)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, c: float) -> Tensor:
    return Scale.apply(a, c=c)


def exp(a) -> Tensor:
    return Exp.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Sum.apply(a, axis=axis)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def take(a, indices, axis: int = 0) -> Tensor:
    return Take.apply(a, indices=indices, axis=axis)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x, w, stride: int = 1, padding: str = "same") -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def maxpool2d(x, size: int = 2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


def softmax_cross_entropy(logits, labels, mask: Optional[np.ndarray] = None) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels, mask=mask)


def l2_norm(a) -> Tensor:
    return L2Norm.apply(a)


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _REGISTRY[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known: {sorted(_REGISTRY)}") from None
    return fn(*inputs, **kwargs)


_REGISTRY = {
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "add": add,
    "mul": mul,
    "reshape": reshape,
    "softmax_cross_entropy": softmax_cross_entropy,
    "l2_norm": l2_norm,
    "exp": exp,
    "sub": sub,
    "scale": scale,
    "sum": sum,
    "take": take,
}
