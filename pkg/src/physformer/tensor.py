"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a node in a computation graph while at least one
input requires gradients; ``backward`` replays the graph once in reverse
topological order and then releases it. All storage is float64 and
row-major. Rank 5 (batch x channel x time x height x width) is the
largest layout the rest of the package uses, but nothing here caps rank.

Broadcasting is supported for the elementwise arithmetic ops; gradients
of broadcast operands are summed back to the operand shape. The model
code only relies on the leading-batch and per-channel-bias patterns.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "backward",
    "concat",
    "exp",
    "log",
    "relu",
    "elu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm_inference",
    "conv3d",
    "maxpool_spatial",
    "avgpool3d",
    "repeat_temporal",
    "pad_temporal_replicate",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend graph recording (inference / oracle evaluations)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 n-d array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @staticmethod
    def _result(data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                backward_fn: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _nonscalar(self)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flags})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axes=None, keepdims: bool = False):
        return sum_over(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return mean_over(self, axes, keepdims)

    def backward(self) -> None:
        backward(self)


def _nonscalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.data.shape}")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- graph traversal -----------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The loss must be scalar. Gradients of shared subexpressions accumulate
    by summation. The recorded graph is released as it is traversed, so a
    second backward through the same nodes is not possible.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                held = pending.get(id(parent))
                pending[id(parent)] = pgrad if held is None else held + pgrad
            node._backward = None
            node._parents = ()
        elif node.requires_grad:
            node.grad = grad if node.grad is None else node.grad + grad


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(data, "add", (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(data, "sub", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, "mul", (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.data.shape} with {b.data.shape}") from None

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(data, "div", (a, b), backward_fn)


def neg(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward_fn(g):
        return (-g,)

    return Tensor._result(-x.data, "neg", (x,), backward_fn)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**p for a constant real exponent."""
    x = _as_tensor(x)
    p = float(exponent)
    data = x.data ** p

    def backward_fn(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._result(data, "power", (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def backward_fn(g):
        return (g * data,)

    return Tensor._result(data, "exp", (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward_fn(g):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), "log", (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def backward_fn(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), "relu", (x,), backward_fn)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    positive = x.data > 0.0
    data = np.where(positive, x.data, alpha * np.expm1(x.data))

    def backward_fn(g):
        # d/dx alpha*(e^x - 1) = alpha*e^x = value + alpha on the negative side
        return (g * np.where(positive, 1.0, data + alpha),)

    return Tensor._result(data, "elu", (x,), backward_fn)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Stacked dims must match exactly, or ``b`` may be 2-d."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}")
    shared = b.data.ndim > 2
    if shared and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: stacked dims differ, {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if not shared and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return Tensor._result(data, "matmul", (a, b), backward_fn)


# -- reductions and shape ops --------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_over(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes_t = _normalize_axes(axes, x.data.ndim)
    data = x.data.sum(axis=axes_t, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, x.data.shape),)

    return Tensor._result(data, "sum", (x,), backward_fn)


def mean_over(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes_t = _normalize_axes(axes, x.data.ndim)
    count = 1
    for ax in axes_t:
        count *= x.data.shape[ax]
    data = x.data.mean(axis=axes_t, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g / count, x.data.shape),)

    return Tensor._result(data, "mean", (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    return Tensor._result(data, "reshape", (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward_fn(g):
        return (g.transpose(inverse),)

    return Tensor._result(data, "transpose", (x,), backward_fn)


def getitem(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)
    data = x.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)

    def backward_fn(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, key, g)
        return (buf,)

    return Tensor._result(data, "slice", (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return Tensor._result(data, "concat", tensors, backward_fn)


# -- normalization and activations over axes ------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return Tensor._result(s, "softmax", (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def backward_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(data, "log_softmax", (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1,
               eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then apply a per-entry scale and shift.

    ``gamma`` and ``beta`` are rank-1 with length equal to the normalized
    axis extent.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: scale/shift must have shape ({n},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv
    param_shape = [1] * x.data.ndim
    param_shape[axis] = n
    gamma_b = gamma.data.reshape(param_shape)
    data = normalized * gamma_b + beta.data.reshape(param_shape)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward_fn(g):
        dgamma = (g * normalized).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dnorm = g * gamma_b
        dx = inv * (dnorm
                    - dnorm.mean(axis=axis, keepdims=True)
                    - normalized * (dnorm * normalized).mean(axis=axis, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor._result(data, "layer_norm", (x, gamma, beta), backward_fn)


def batch_norm_inference(x: Tensor, gamma: Tensor, beta: Tensor,
                         mean: np.ndarray, var: np.ndarray,
                         eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalize with fixed per-channel statistics (no gradient to them)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if gamma.data.shape != (n,) or beta.data.shape != (n,) or mean.shape != (n,) or var.shape != (n,):
        raise ShapeError(f"batch_norm_inference: per-channel arrays must have shape ({n},)")
    param_shape = [1] * x.data.ndim
    param_shape[axis] = n
    inv = (1.0 / np.sqrt(var + eps)).reshape(param_shape)
    normalized = (x.data - mean.reshape(param_shape)) * inv
    data = normalized * gamma.data.reshape(param_shape) + beta.data.reshape(param_shape)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)
    gamma_b = gamma.data.reshape(param_shape)

    def backward_fn(g):
        dx = g * gamma_b * inv
        dgamma = (g * normalized).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return Tensor._result(data, "batch_norm_inference", (x, gamma, beta), backward_fn)


# -- video primitives ----------------------------------------------------


def _conv_taps(kt: int, kh: int, kw: int):
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                yield a, b, c


def _tap_slice(kt, kh, kw, stride, out_shape):
    st, sh, sw = stride
    to, ho, wo = out_shape
    return (slice(None), slice(None),
            slice(kt, kt + (to - 1) * st + 1, st),
            slice(kh, kh + (ho - 1) * sh + 1, sh),
            slice(kw, kw + (wo - 1) * sw + 1, sw))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int, int] = (1, 1, 1),
           padding: tuple[int, int, int] = (0, 0, 0),
           depthwise: bool = False) -> Tensor:
    """3-d cross-correlation over a (batch, channel, T, H, W) tensor.

    ``weight`` is (out, in, kT, kH, kW); a depthwise conv uses
    (channels, 1, kT, kH, kW) and applies each slice to its own channel.
    Zero padding. Output extent per axis is floor((n + 2p - k)/s) + 1.

    The dense path gathers windows into a patch matrix and runs one
    matrix product; its backward scatters the patch gradient back with
    one strided addition per kernel tap.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d: need rank-5 input and weight, got {x.data.shape} and {weight.data.shape}")
    batch, channels, t_in, h_in, w_in = x.data.shape
    out_ch, w_in_ch, k_t, k_h, k_w = weight.data.shape
    if depthwise:
        if w_in_ch != 1 or out_ch != channels:
            raise ShapeError(
                f"conv3d depthwise: weight {weight.data.shape} must be ({channels}, 1, kT, kH, kW) "
                f"for input {x.data.shape}")
    elif w_in_ch != channels:
        raise ShapeError(
            f"conv3d: input has {channels} channels (shape {x.data.shape}) but weight expects "
            f"{w_in_ch} (shape {weight.data.shape})")
    if bias is not None and bias.data.shape != (out_ch,):
        raise ShapeError(f"conv3d: bias must have shape ({out_ch},), got {bias.data.shape}")
    p_t, p_h, p_w = padding
    s_t, s_h, s_w = stride
    t_out = (t_in + 2 * p_t - k_t) // s_t + 1
    h_out = (h_in + 2 * p_h - k_h) // s_h + 1
    w_out = (w_in + 2 * p_w - k_w) // s_w + 1
    if t_out < 1 or h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv3d: zero-extent output for input {x.data.shape}, kernel {weight.data.shape}, "
            f"stride {stride}, padding {padding}")
    padded = any(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p_t, p_t), (p_h, p_h), (p_w, p_w))) if padded else x.data
    out_shape = (t_out, h_out, w_out)

    if depthwise:
        out = np.zeros((batch, channels, t_out, h_out, w_out))
        for a, b, c in _conv_taps(k_t, k_h, k_w):
            window = xp[_tap_slice(a, b, c, stride, out_shape)]
            out += window * weight.data[:, 0, a, b, c][None, :, None, None, None]
        patches = None
        w_matrix = None
    else:
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k_t, k_h, k_w), axis=(2, 3, 4))
        windows = windows[:, :, ::s_t, ::s_h, ::s_w]
        # (rows, C * kT * kH * kW) patch matrix, rows ordered (B, To, Ho, Wo)
        patches = np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
            batch * t_out * h_out * w_out, channels * k_t * k_h * k_w)
        w_matrix = weight.data.reshape(out_ch, -1)
        out = np.ascontiguousarray(
            (patches @ w_matrix.T).reshape(batch, t_out, h_out, w_out, out_ch)
            .transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, out_ch, 1, 1, 1)

    def backward_fn(g):
        need_dx = x.requires_grad
        need_dw = weight.requires_grad
        dx = None
        dw = None
        if depthwise:
            dxp = np.zeros_like(xp) if need_dx else None
            dw = np.zeros_like(weight.data) if need_dw else None
            for a, b, c in _conv_taps(k_t, k_h, k_w):
                tap = _tap_slice(a, b, c, stride, out_shape)
                if need_dw:
                    dw[:, 0, a, b, c] = np.einsum("bcthw,bcthw->c", xp[tap], g)
                if need_dx:
                    dxp[tap] += g * weight.data[:, 0, a, b, c][None, :, None, None, None]
        else:
            g_rows = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, out_ch)
            if need_dw:
                dw = (g_rows.T @ patches).reshape(weight.data.shape)
            dxp = None
            if need_dx:
                dxp = np.zeros_like(xp)
                dpatches = (g_rows @ w_matrix).reshape(
                    batch, t_out, h_out, w_out, channels, k_t, k_h, k_w)
                for a, b, c in _conv_taps(k_t, k_h, k_w):
                    tap = _tap_slice(a, b, c, stride, out_shape)
                    dxp[tap] += dpatches[:, :, :, :, :, a, b, c].transpose(0, 4, 1, 2, 3)
        if need_dx:
            dx = dxp[:, :, p_t:p_t + t_in, p_h:p_h + h_in, p_w:p_w + w_in] if padded else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, "conv3d", parents, backward_fn)


def maxpool_spatial(x: Tensor) -> Tensor:
    """1x2x2 max pooling: halves H and W, leaves T unchanged."""
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool_spatial: need rank-5 input, got {x.data.shape}")
    batch, channels, t, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool_spatial: spatial extents must be even, got {x.data.shape}")
    cells = (x.data.reshape(batch, channels, t, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 3, 5, 4, 6)
             .reshape(batch, channels, t, h // 2, w // 2, 4))
    winners = cells.argmax(axis=5)
    data = np.take_along_axis(cells, winners[..., None], axis=5)[..., 0]

    def backward_fn(g):
        buf = np.zeros_like(cells)
        np.put_along_axis(buf, winners[..., None], g[..., None], axis=5)
        dx = (buf.reshape(batch, channels, t, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 3, 5, 4, 6)
              .reshape(batch, channels, t, h, w))
        return (dx,)

    return Tensor._result(np.ascontiguousarray(data), "maxpool_spatial", (x,), backward_fn)


def avgpool3d(x: Tensor, kernel: tuple[int, int, int]) -> Tensor:
    """Non-overlapping average pooling with stride equal to the kernel.

    Extents that do not divide evenly are floor-cropped, matching the
    tokenizer's floor arithmetic.
    """
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"avgpool3d: need rank-5 input, got {x.data.shape}")
    batch, channels, t, h, w = x.data.shape
    k_t, k_h, k_w = kernel
    if k_t < 1 or k_h < 1 or k_w < 1 or k_t > t or k_h > h or k_w > w:
        raise ShapeError(f"avgpool3d: kernel {kernel} invalid for input {x.data.shape}")
    t_out, h_out, w_out = t // k_t, h // k_h, w // k_w
    crop = x.data[:, :, :t_out * k_t, :h_out * k_h, :w_out * k_w]
    blocks = crop.reshape(batch, channels, t_out, k_t, h_out, k_h, w_out, k_w)
    data = blocks.mean(axis=(3, 5, 7))
    volume = k_t * k_h * k_w

    def backward_fn(g):
        spread = np.broadcast_to(
            (g / volume)[:, :, :, None, :, None, :, None],
            (batch, channels, t_out, k_t, h_out, k_h, w_out, k_w))
        dx = np.zeros_like(x.data)
        dx[:, :, :t_out * k_t, :h_out * k_h, :w_out * k_w] = spread.reshape(
            batch, channels, t_out * k_t, h_out * k_h, w_out * k_w)
        return (dx,)

    return Tensor._result(data, "avgpool3d", (x,), backward_fn)


def repeat_temporal(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling along T: each frame repeats ``factor`` times."""
    x = _as_tensor(x)
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"repeat_temporal: factor must be >= 1, got {factor}")
    if x.data.ndim != 5:
        raise ShapeError(f"repeat_temporal: need rank-5 input, got {x.data.shape}")
    batch, channels, t, h, w = x.data.shape
    data = np.repeat(x.data, factor, axis=2)

    def backward_fn(g):
        return (g.reshape(batch, channels, t, factor, h, w).sum(axis=3),)

    return Tensor._result(data, "repeat_temporal", (x,), backward_fn)


def pad_temporal_replicate(x: Tensor, amount: int = 1) -> Tensor:
    """Replicate the first and last frame ``amount`` times along T."""
    x = _as_tensor(x)
    amount = int(amount)
    if amount < 0:
        raise ValueError(f"pad_temporal_replicate: amount must be >= 0, got {amount}")
    if amount == 0:
        return x
    if x.data.ndim != 5:
        raise ShapeError(f"pad_temporal_replicate: need rank-5 input, got {x.data.shape}")
    data = np.pad(x.data, ((0, 0), (0, 0), (amount, amount), (0, 0), (0, 0)), mode="edge")

    def backward_fn(g):
        dx = g[:, :, amount:-amount].copy()
        dx[:, :, 0] += g[:, :, :amount].sum(axis=2)
        dx[:, :, -1] += g[:, :, -amount:].sum(axis=2)
        return (dx,)

    return Tensor._result(data, "pad_temporal_replicate", (x,), backward_fn)
