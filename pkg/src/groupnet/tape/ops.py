"""Differentiable primitives over dense NCHW arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bitcore import ConvGeometry
from .tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def custom(value, parents, backward_fn, op="custom"):
    """Wrap a precomputed ``value`` as a node with a user-supplied backward rule."""
    parents = [as_tensor(p) for p in parents]
    return Tensor.from_op(np.asarray(value), parents, backward_fn, op)


def _operands(a, b):
    """Tensors for a binary op; bare scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b):
    a, b = _operands(a, b)
    out = a.data + b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b):
    a, b = _operands(a, b)
    out = a.data - b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b):
    a, b = _operands(a, b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), back, "mul")


def index(a, idx):
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out), (a,), back, "index")


def reshape(a, shape):
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum(a, axis=None):
    out = np.asarray(a.data.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), back, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / n)


def relu(a):
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    t = np.tanh(a.data)
    return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(a):
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype, copy=False)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elementwise(kind, *inputs):
    """Dispatch by name: ``relu``, ``tanh``, ``sigmoid`` (one input) or ``add`` (two)."""
    if kind == "add":
        return add(*inputs)
    fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    (x,) = inputs
    return fn(x)


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    """Channel-major patches ``(n, c, kh, kw, oh, ow)`` of a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride]
    return cols


def conv2d(x, w, stride=1, padding=0, dilation=1, geom: ConvGeometry | None = None):
    """Cross-correlation of ``x (n, c, h, w)`` with ``w (o, c, kh, kw)``, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if geom is None:
        geom = ConvGeometry.for_tensors(x.shape, w.shape, stride, padding, dilation)
    elif tuple(x.shape[1:]) != (geom.in_channels, geom.input_h, geom.input_w) or tuple(w.shape) != (
        geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w
    ):
        raise ValueError(f"conv2d: shapes {x.shape}, {w.shape} do not match {geom}")
    s, p, d = geom.stride, geom.padding, geom.dilation
    oh, ow = geom.output_h, geom.output_w
    n = x.shape[0]
    o, c, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, d, oh, ow).reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, oh, ow)

    def back(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * d, j * d
                    dxp[:, :, r0 : r0 + s * (oh - 1) + 1 : s, c0 : c0 + s * (ow - 1) + 1 : s] += dcols[:, :, i, j]
            gx = dxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else dxp
        return gx, gw

    return Tensor.from_op(out, (x, w), back, "conv2d")


def linear(x, w, b=None):
    """``x (n, i) @ w.T (i, o) + b``."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def back(g):
        grads = [g @ w.data if x.requires_grad else None, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return Tensor.from_op(out, parents, back, "linear")


def global_avg_pool(x):
    """``(n, c, h, w) -> (n, c)``."""
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return Tensor.from_op(
        out,
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),),
        "global_avg_pool",
    )


def _interp_matrix(n_in, n_out, dtype):
    """Bilinear resampling matrix with half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def upsample_bilinear(x, size):
    """Resize ``(n, c, h, w)`` to ``(n, c, *size)``; a fixed linear map."""
    x = as_tensor(x)
    uh = _interp_matrix(x.shape[2], size[0], x.dtype)
    uw = _interp_matrix(x.shape[3], size[1], x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw, optimize=True)
    return Tensor.from_op(
        out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", uh, g, uw, optimize=True),), "upsample"
    )


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy.

    ``logits`` is ``(n, k)`` or dense ``(n, k, h, w)`` with ``labels``
    ``(n,)`` or ``(n, h, w)`` respectively.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim == 4:
        k = z.shape[1]
        z = z.transpose(0, 2, 3, 1).reshape(-1, k)
    flat = labels.reshape(-1)
    if flat.shape[0] != z.shape[0]:
        raise ValueError(f"{flat.shape[0]} labels for {z.shape[0]} predictions")
    lp = log_softmax(z, axis=1)
    rows = np.arange(flat.shape[0])
    loss = -lp[rows, flat].mean()

    def back(g):
        p = np.exp(lp)
        p[rows, flat] -= 1.0
        p *= g / flat.shape[0]
        if logits.ndim == 4:
            n, k, h, w = logits.shape
            p = p.reshape(n, h, w, k).transpose(0, 3, 1, 2)
        return (p.astype(logits.dtype, copy=False),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="bn.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="bn.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def fold(self):
        """Eval-mode ``(scale, shift)`` with ``bn(x) == scale * x + shift``."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - self.running_mean * scale


def batchnorm(x, state: BatchNormState, training: bool):
    """Batch normalisation over all axes except channel axis 1."""
    x = as_tensor(x)
    if x.shape[0] == 0:
        raise ValueError("batchnorm on an empty batch")
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm: input {x.shape} does not have {state.channels} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    gamma, beta = state.gamma, state.beta
    g_b = gamma.data.reshape(bshape)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        count = x.data.size // state.channels
        mom = state.momentum
        unbiased = v * count / max(count - 1, 1)
        state.running_mean = (1 - mom) * state.running_mean + mom * m
        state.running_var = (1 - mom) * state.running_var + mom * unbiased
        state.num_batches += 1
    else:
        m, v, count = state.running_mean, state.running_var, None
    inv = 1.0 / np.sqrt(v + state.eps)
    xhat = (x.data - m.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * g_b + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * g_b
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (dxhat - s1 / count - xhat * s2 / count) * inv.reshape(bshape)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "batchnorm")
