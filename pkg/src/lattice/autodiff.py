"""Reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and records the operation that produced it; backward()
walks the tape in reverse topological order and accumulates gradients into
every reachable leaf.  Broadcasting is supported everywhere through an
unbroadcast reduction on the way back.  The op set is deliberately small:
just what the model, the scans, and the training loop need.
"""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

__all__ = ["Var", "as_var", "concat", "stack", "einsum"]

ArrayLike = Union[np.ndarray, float, int]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad (a broadcast result's gradient) back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev: tuple = ()

    # -- construction helpers -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _make(self, data, parents, backward):
        out = Var(data)
        if any(p.requires_grad or p._prev for p in parents):
            out.requires_grad = any(p.requires_grad for p in parents)
            out._prev = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad):
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            # safe to adopt without copying: accumulation below always
            # allocates a fresh array instead of mutating in place
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)

        def backward(g):
            self._accum(g)
            other._accum(g)

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)

        def backward(g):
            self._accum(g * other.data)
            other._accum(g * self.data)

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)

        def backward(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / (other.data * other.data))

        return self._make(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are differentiable here")

        def backward(g):
            self._accum(g * p * self.data ** (p - 1))

        return self._make(self.data ** p, (self,), backward)

    def __matmul__(self, other):
        other = as_var(other)
        out_data = self.data @ other.data

        def backward(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:
                self._accum(g * b)
                other._accum(g * a)
            elif a.ndim == 1:
                self._accum(g @ np.swapaxes(b, -1, -2))
                other._accum(np.einsum("...i,...j->...ij", a, g)
                             if b.ndim > 2 else np.outer(a, g))
            elif b.ndim == 1:
                self._accum(np.einsum("...i,j->...ij", g, b)
                            if a.ndim > 2 else np.outer(g, b))
                other._accum(np.einsum("...ij,...i->j", a, g)
                             if a.ndim > 2 else a.T @ g)
            else:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
                self._accum(_unbroadcast(ga, a.shape))
                other._accum(_unbroadcast(gb, b.shape))

        return self._make(out_data, (self, other), backward)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)

        return self._make(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._accum(g / self.data)

        return self._make(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accum(g * 0.5 / out_data)

        return self._make(out_data, (self,), backward)

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accum(g * s * (1.0 - s))

        return self._make(s, (self,), backward)

    def tanh(self):
        th = np.tanh(self.data)

        def backward(g):
            self._accum(g * (1.0 - th * th))

        return self._make(th, (self,), backward)

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accum(g * s * (1.0 + self.data * (1.0 - s)))

        return self._make(self.data * s, (self,), backward)

    def gelu(self):
        """tanh-approximation gelu: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = c * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + th)

        def backward(g):
            sech2 = 1.0 - th * th
            d_inner = c * (1.0 + 3 * 0.044715 * x * x)
            self._accum(g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

        return self._make(out_data, (self,), backward)

    def relu_floor(self, floor: float = 0.0):
        """max(x, floor) with pass-through subgradient on the active side."""
        mask = self.data > floor

        def backward(g):
            self._accum(g * mask)

        return self._make(np.maximum(self.data, floor), (self,), backward)

    def abs(self):
        sgn = np.sign(self.data)

        def backward(g):
            self._accum(g * sgn)

        return self._make(np.abs(self.data), (self,), backward)

    # -- reductions and reshapes ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.data.shape))

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def backward(g):
            self._accum(np.asarray(g).reshape(old))

        return self._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 0:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(g):
            self._accum(np.transpose(np.asarray(g), inv))

        return self._make(np.transpose(self.data, axes), (self,), backward)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, np.integer, slice)) for p in parts)

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:
                # basic indexing never selects an element twice
                full[idx] += np.asarray(g)
            else:
                np.add.at(full, idx, np.asarray(g))
            self._accum(full)

        return self._make(self.data[idx], (self,), backward)

    def take_rows(self, indices: np.ndarray):
        """Embedding-style gather of rows; duplicate indices accumulate."""
        indices = np.asarray(indices)

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, indices, np.asarray(g))
            self._accum(full)

        return self._make(self.data[indices], (self,), backward)

    def detach(self) -> "Var":
        return Var(self.data.copy())

    # -- autodiff driver ---------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        # iterative DFS; tapes from long scans overflow the recursion limit
        topo: list = []
        seen = set()
        stack_ = [self]
        while stack_:
            node = stack_[-1]
            if id(node) in seen:
                stack_.pop()
                continue
            ready = True
            for p in node._prev:
                if id(p) not in seen:
                    stack_.append(p)
                    ready = False
            if ready:
                seen.add(id(node))
                topo.append(node)
                stack_.pop()
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def concat(vars_: Sequence[Var], axis: int = 0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.data.shape[axis] for v in vars_]
    out_data = np.concatenate([v.data for v in vars_], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g = np.asarray(g)
        for v, a, b in zip(vars_, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            v._accum(g[tuple(sl)])

    return vars_[0]._make(out_data, tuple(vars_), backward)


def stack(vars_: Sequence[Var], axis: int = 0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out_data = np.stack([v.data for v in vars_], axis=axis)

    def backward(g):
        g = np.asarray(g)
        for i, v in enumerate(vars_):
            v._accum(np.take(g, i, axis=axis))

    return vars_[0]._make(out_data, tuple(vars_), backward)


def _einsum_backward_one(subscripts_in, sub_out, grad, operands, which):
    """Gradient of einsum w.r.t. operand `which` by swapping subscripts."""
    my_sub = subscripts_in[which]
    other_subs = [s for i, s in enumerate(subscripts_in) if i != which]
    other_ops = [operands[i] for i in range(len(operands)) if i != which]
    in_subs = [sub_out] + other_subs
    in_ops = [grad] + other_ops
    covered = set("".join(in_subs))
    missing = [c for c in my_sub if c not in covered]
    if missing:
        # axes summed out in the forward pass: broadcast the gradient back
        shape_of = {}
        for s, op in zip(subscripts_in, operands):
            for c, n in zip(s, op.shape):
                shape_of[c] = n
        for c in missing:
            in_subs.append(c)
            in_ops.append(np.ones(shape_of[c]))
    spec = ",".join(in_subs) + "->" + my_sub
    return np.einsum(spec, *in_ops)


def einsum(subscripts: str, *vars_: Var) -> Var:
    """Differentiable einsum (explicit output subscripts, no ellipsis)."""
    if "->" not in subscripts or "." in subscripts:
        raise ShapeError("einsum spec must be explicit, e.g. 'ij,jk->ik'")
    lhs, sub_out = subscripts.split("->")
    subs_in = lhs.split(",")
    vs = [as_var(v) for v in vars_]
    if len(subs_in) != len(vs):
        raise ShapeError("einsum: operand count mismatch")
    datas = [v.data for v in vs]
    out_data = np.einsum(subscripts, *datas)

    def backward(g):
        g = np.asarray(g)
        for i, v in enumerate(vs):
            v._accum(_einsum_backward_one(subs_in, sub_out, g, datas, i))

    return vs[0]._make(out_data, tuple(vs), backward)
