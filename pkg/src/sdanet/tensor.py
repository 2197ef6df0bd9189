"""Define-by-run rank-4 tensors with reverse-mode differentiation.

Only the operations the network needs are provided: stride-1 dilated
convolution, relu/sigmoid, channel concatenation, add/mul (with single-channel
broadcast), plus the handful of reductions the losses use.  Values are stored
as float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels


class Tensor:
    """A float64 array of shape ``(batch, channels, height, width)`` in a graph.

    Scalars produced by reductions are kept as shape ``(1, 1, 1, 1)``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor expects rank-4 data, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, op=op)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation; ``bias`` is stored as shape ``(1, outC, 1, 1)``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    O, C, kh, kw = weight.shape
    if x.shape[1] != C:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {C}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if bias.size != O:
        raise ValueError(f"bias has {bias.size} elements for {O} output channels")
    b = bias.data.reshape(O)
    out = _kernels.conv_forward(x.data, weight.data, b, dilation, padding)

    def _bw(g):
        gx, gw, gb = _kernels.conv_backward(x.data, weight.data, g, dilation, padding)
        return gx, gw, gb.reshape(bias.shape)

    return _result(out, (x, weight, bias), _bw, "conv2d")


def same_padding(kernel_size: int, dilation: int = 1) -> int:
    if kernel_size % 2 == 0:
        raise ValueError("same padding is only defined for odd kernels")
    return dilation * (kernel_size - 1) // 2


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of mapping it to zero
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the range open: large logits would otherwise round to exactly 0 or 1
    s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels shape mismatch: {ref} vs {t.shape}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def _bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _result(out, tuple(inputs), _bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), _bw, "slice")


def _check_pair(a: Tensor, b: Tensor) -> bool:
    """True when ``b`` broadcasts over channels of ``a``."""
    if a.shape == b.shape:
        return False
    if b.shape[1] == 1 and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]:
        return True
    raise ValueError(f"incompatible shapes for elementwise op: {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _check_pair(a, b)

    def _bw(g):
        return g, (g.sum(axis=1, keepdims=True) if bcast else g)

    return _result(a.data + b.data, (a, b), _bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _check_pair(a, b)

    def _bw(g):
        gb = g * a.data
        return g * b.data, (gb.sum(axis=1, keepdims=True) if bcast else gb)

    return _result(a.data * b.data, (a, b), _bw, "mul")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def sub_const(x: Tensor, target: np.ndarray) -> Tensor:
    """``x - target`` where ``target`` is a constant array of the same shape."""
    x = _as_tensor(x)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != x.shape:
        raise ValueError(f"target shape {target.shape} does not match {x.shape}")
    return _result(x.data - target, (x,), lambda g: (g,), "sub_const")


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _result(x.data.sum().reshape(1, 1, 1, 1), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over channel and spatial axes, giving shape ``(N, 1, 1, 1)``."""
    x = _as_tensor(x)
    shape = x.shape
    return _result(x.data.sum(axis=(1, 2, 3), keepdims=True), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum_per_sample")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, state = [], {}
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
        assert mark != 1, "cycle in differentiation graph"
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) != 2:
                assert state.get(id(p)) != 1, "cycle in differentiation graph"
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node requiring grad.

    Calling twice without clearing grads accumulates; the trainer clears them
    every step.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg
