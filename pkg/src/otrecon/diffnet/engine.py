"""A small tape-based reverse-mode differentiation engine.

Only the primitives the primal-dual network and its losses need are provided.
Tensors are ``(channels, height, width)`` arrays (scalars for losses). Every
op returns a new :class:`Tensor` that remembers its parents and a closure
that pushes its output gradient back to them; :meth:`Tensor.backward` runs
the closures in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, NumericalBreakdownError

_RECORDING = True
DEBUG_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _RECORDING
    prev, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        order, seen = [], set()

        def visit(t):
            # iterative DFS; the network is deep enough to hit recursion limits
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self._accumulate(np.ones_like(self.data) if seed is None else seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if DEBUG_FINITE and not np.all(np.isfinite(node.grad)):
                    raise NumericalBreakdownError(f"non-finite gradient at {node!r}")


def _make(data, parents, backward, name=None):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _RECORDING and any(p.requires_grad for p in parents)
    if DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NumericalBreakdownError(f"non-finite activation in {name}")
    if not needs:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, name=name, _parents=parents, _backward=backward)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


# -- elementwise / structural ops --------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def concat(tensors) -> Tensor:
    """Concatenate along the channel axis."""
    tensors = list(tensors)
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=0), tensors, backward, "concat")


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ContractError(f"channel slice [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full)

    return _make(x.data[start:stop], (x,), backward, "channels")


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        x._accumulate(g * factor)

    return _make(x.data * x.data.dtype.type(factor), (x,), backward, "scale")


def cast(x: Tensor, dtype) -> Tensor:
    def backward(g):
        x._accumulate(g.astype(x.data.dtype))

    return _make(x.data.astype(dtype), (x,), backward, "cast")


# -- network layers -----------------------------------------------------------

def _im2col(x):
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (c, h, w, 3, 3)
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding (output keeps the spatial size)."""
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ContractError("conv2d supports 3x3 kernels only")
    if x.data.ndim != 3 or x.shape[0] != c_in:
        raise ContractError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    _, h, w = x.shape
    cols = _im2col(x.data)
    wmat = weight.data.reshape(c_out, c_in * 9)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, h, w)

    def backward(g):
        g2 = g.reshape(c_out, h * w)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, 3, 3, h, w)
            dpad = np.zeros((c_in, h + 2, w + 2), dtype=x.data.dtype)
            for ky in range(3):
                for kx in range(3):
                    dpad[:, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
            x._accumulate(dpad[:, 1:-1, 1:-1])

    return _make(out, (x, weight, bias), backward, "conv2d")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel parametric ReLU."""
    a = slope.data[:, None, None]
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.where(pos, g, a * g))
        if slope.requires_grad:
            slope._accumulate(np.sum(np.where(pos, 0, x.data) * g, axis=(1, 2)))

    return _make(out, (x, slope), backward, "prelu")


def linear_operator(x: Tensor, forward, adjoint, out_shape, name="operator") -> Tensor:
    """Apply a fixed linear map channel by channel; its backward applies ``adjoint``."""
    out = np.stack([forward(ch) for ch in x.data]).reshape((x.shape[0],) + tuple(out_shape))

    def backward(g):
        x._accumulate(np.stack([adjoint(ch) for ch in g]).reshape(x.shape))

    return _make(out, (x,), backward, name)


# -- reductions used by losses -----------------------------------------------

def mean_squared_error(x: Tensor, target: np.ndarray) -> Tensor:
    """``sum((x - target)**2) / n`` computed in float64."""
    diff = x.data.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(x.shape)
    n = diff.size

    def backward(g):
        x._accumulate((2.0 / n * float(g) * diff).astype(x.data.dtype))

    return _make(np.float64(np.sum(diff * diff) / n), (x,), backward, "mse")


def custom_scalar(x: Tensor, value: float, grad_wrt_x: np.ndarray, name="custom") -> Tensor:
    """Scalar node whose gradient with respect to ``x`` was computed externally."""

    def backward(g):
        x._accumulate((float(g) * grad_wrt_x).reshape(x.shape).astype(x.data.dtype))

    return _make(np.float64(value), (x,), backward, name)
