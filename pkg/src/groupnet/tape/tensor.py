"""Reverse-mode autodiff core: the ``Tensor`` node and the backward sweep."""

from __future__ import annotations

import numpy as np

_FLOATS = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type in _FLOATS:
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A value in the computation graph.

    Leaves are created directly; interior nodes come from the functions in
    :mod:`groupnet.tape.ops`.  ``backward_fn`` maps the output gradient to a
    tuple of input gradients (``None`` for inputs that need none).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in out.parents)
        out.backward_fn = backward_fn if out.requires_grad else None
        out.op = op
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar, resolved lazily to avoid an import cycle with ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def backward(self, params=None, allow_unused=True):
        return backward(self, params=params, allow_unused=allow_unused)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root):
    """Post-order over nodes that require grad; raises on a cycle."""
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError(f"cycle detected in graph at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                pm = state.get(id(p))
                if pm == 1:
                    raise RuntimeError(f"cycle detected in graph at {p!r}")
                if pm is None:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, params=None, allow_unused=True):
    """Backpropagate from a scalar ``loss``.

    Leaf gradients are accumulated into ``.grad``.  Returns a dict mapping
    each requested parameter (default: every reachable leaf that requires
    grad) to its gradient array.  Unreachable requested parameters get a zero
    gradient, or raise when ``allow_unused`` is false.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    reached = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            reached[id(node)] = node
            continue
        in_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {pg.shape} != input shape {p.data.shape}"
                )
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    if params is None:
        return {node: node.grad for node in reached.values()}
    out = {}
    for p in params:
        if id(p) not in reached:
            if not allow_unused:
                label = p.name or repr(p)
                raise ValueError(f"parameter {label} is detached from the loss")
            out[p] = np.zeros_like(p.data)
        else:
            out[p] = p.grad
    return out
