"""Tape-based reverse-mode differentiation for the network's layer set.

Volumetric tensors are channels-last with a leading batch axis,
``(B, D, H, W, C)``. Operations record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient::

    with Tape() as tape:
        loss = mse(conv3d(x, w, b), target)
    grads = backward(tape, loss, params)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pvhnet import kernels
from pvhnet.errors import InconsistentOutputShape, NonScalarLoss, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor; ``state`` holds per-parameter optimizer accumulators."""

    __slots__ = ("name", "state")

    def __init__(self, name: str, value, dtype=None):
        super().__init__(np.array(value, dtype=dtype), requires_grad=True)
        self.name = name
        self.state: dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, output: Tensor, inputs, backward) -> None:
        self.nodes.append(Node(output, tuple(inputs), backward))


_TAPES: list[Tape] = []


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data: np.ndarray, inputs, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_TAPES))
    if out.requires_grad:
        _TAPES[-1].record(out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Parameter] = ()) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires a gradient. Every entry of
    ``params`` gets a gradient, zero if the parameter did not reach the loss.
    Returns the parameter gradients keyed by name.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            leaves.setdefault(key, t)
    if not tape.nodes and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        if key in grads:
            t.grad = grads[key].astype(t.dtype, copy=False)
    out = {}
    for p in params:
        if id(p) not in grads:
            p.grad = np.zeros_like(p.data)
        out[p.name] = p.grad
    return out


def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = math.ceil(size / s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(spatial, ksize, stride, padding):
    """Output spatial size and (lo, hi) pads per axis."""
    if padding == "same":
        geo = [_same_pads(n, k, s) for n, k, s in zip(spatial, ksize, stride)]
        return tuple(g[0] for g in geo), tuple((g[1], g[2]) for g in geo)
    if padding == "valid":
        out = tuple((n - k) // s + 1 for n, k, s in zip(spatial, ksize, stride))
        if min(out) < 1:
            raise ShapeMismatch(f"kernel {ksize} larger than input {spatial}")
        return out, ((0, 0),) * 3
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected three values, got {v}")
    return v


def _check_kernel(x: Tensor, kernel: Tensor, bias: Tensor, in_axis: int, out_axis: int):
    if x.data.ndim != 5:
        raise ShapeMismatch(f"expected (B, D, H, W, C) input, got {x.shape}")
    if kernel.data.ndim != 5:
        raise ShapeMismatch(f"expected (k, k, k, Cin, Cout) kernel, got {kernel.shape}")
    if kernel.shape[in_axis] != x.shape[-1]:
        raise ShapeMismatch(f"input has {x.shape[-1]} channels, kernel expects {kernel.shape[in_axis]}")
    if bias.shape != (kernel.shape[out_axis],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({kernel.shape[out_axis]},)")
    if any(k % 2 == 0 for k in kernel.shape[:3]):
        raise ShapeMismatch(f"kernel size must be odd, got {kernel.shape[:3]}")


def _crop(arr, pads):
    (a0, a1), (b0, b1), (c0, c1) = pads
    return arr[:, a0:arr.shape[1] - a1, b0:arr.shape[2] - b1, c0:arr.shape[3] - c1]


def _pad(arr, pads, dtype):
    if not any(p for pair in pads for p in pair):
        return np.ascontiguousarray(arr, dtype=dtype)
    return np.pad(arr.astype(dtype, copy=False), ((0, 0), *pads, (0, 0)))


def conv3d(x, kernel, bias, stride=1, padding: str = "same") -> Tensor:
    """Strided 3D cross-correlation; ``same`` gives ``ceil(n / stride)`` outputs."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_kernel(x, kernel, bias, 3, 4)
    dtype = kernel.dtype
    stride = _triple(stride)
    ksize = kernel.shape[:3]
    _, pads = _conv_geometry(x.shape[1:4], ksize, stride, padding)
    xp = _pad(x.data, pads, dtype)
    w = np.ascontiguousarray(kernel.data)
    out = kernels.conv3d_forward(xp, w, stride) + bias.data

    def back(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        gx = None
        if x.requires_grad:
            gx = _crop(kernels.conv3d_backward_input(g, w, stride, xp.shape[1:4]), pads)
        gw = kernels.conv3d_backward_weight(xp, g, ksize, stride) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 1, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, kernel, bias), back)


def deconv3d(x, kernel, bias, stride=1, output_shape=None, padding: str = "same") -> Tensor:
    """Transposed convolution, the linear adjoint of :func:`conv3d`.

    ``kernel`` has shape ``(k, k, k, Cout, Cin)``: it is the kernel of the
    forward convolution mapping ``Cout`` channels on ``output_shape`` to this
    layer's ``Cin`` input channels. ``output_shape`` resolves the stride
    ambiguity and must map back onto the input size under that convolution.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_kernel(x, kernel, bias, 4, 3)
    dtype = kernel.dtype
    stride = _triple(stride)
    ksize = kernel.shape[:3]
    spatial_in = x.shape[1:4]
    if output_shape is None:
        if padding == "same":
            output_shape = tuple(n * s for n, s in zip(spatial_in, stride))
        else:
            output_shape = tuple((n - 1) * s + k for n, s, k in zip(spatial_in, stride, ksize))
    output_shape = _triple(output_shape)
    try:
        back_size, pads = _conv_geometry(output_shape, ksize, stride, padding)
    except ShapeMismatch as exc:
        raise InconsistentOutputShape(str(exc)) from None
    if tuple(back_size) != tuple(spatial_in):
        raise InconsistentOutputShape(
            f"output_shape {output_shape} convolves to {back_size}, not input {spatial_in}")
    padded = tuple(n + lo + hi for n, (lo, hi) in zip(output_shape, pads))
    w = np.ascontiguousarray(kernel.data)
    xd = np.ascontiguousarray(x.data, dtype=dtype)
    full = kernels.conv3d_backward_input(xd, w, stride, padded)
    out = _crop(full, pads) + bias.data

    def back(g):
        gp = _pad(g, pads, dtype)
        gx = kernels.conv3d_forward(gp, w, stride) if x.requires_grad else None
        gw = kernels.conv3d_backward_weight(gp, xd, ksize, stride) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 1, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, kernel, bias), back)


def maxpool3d(x, window=2, stride=2) -> tuple[Tensor, np.ndarray]:
    """Max over (valid) windows; returns the pooled tensor and flat argmax indices."""
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeMismatch(f"expected (B, D, H, W, C) input, got {x.shape}")
    window, stride = _triple(window), _triple(stride)
    if min(window) < 1 or min(stride) < 1:
        raise ValueError("window and stride must be >= 1")
    if any(w > n for w, n in zip(window, x.shape[1:4])):
        raise ShapeMismatch(f"pool window {window} larger than input {x.shape[1:4]}")
    out, argmax = kernels.maxpool3d_forward(np.ascontiguousarray(x.data), window, stride)

    def back(g):
        return (kernels.maxpool3d_backward(np.ascontiguousarray(g, dtype=x.dtype), argmax, x.shape),)

    return _result(out, (x,), back), argmax


def fully_connected(x, weights, bias) -> Tensor:
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.data.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeMismatch(
            f"fully_connected: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    out = x.data @ weights.data + bias.data

    def back(g):
        gx = g @ weights.data.T if x.requires_grad else None
        gw = None
        if weights.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weights, bias), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def mean_combine(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mean_combine")
    return _result((a.data + b.data) * 0.5, (a, b), lambda g: (g * 0.5, g * 0.5))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mse(prediction, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    _same_shape(prediction, target, "mse")
    diff = prediction.data - target.data
    m = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=prediction.dtype)

    def back(g):
        gd = (2.0 / m) * g * diff
        return gd, -gd

    return _result(out, (prediction, target), back)
