"""
Small reverse-mode automatic differentiation engine on top of numpy.

A ``Tensor`` wraps an ndarray and remembers the operation that produced it.
Calling ``backward`` on a scalar walks the recorded graph in reverse
topological order (the ``Tape``) and accumulates exact gradients into every
tensor that requires them.

Conventions:
  * convolution is cross-correlation (no kernel flip), NCHW layout;
  * max-pool ties go to the first cell of the window in row-major order;
  * bilinear upsampling uses ``align_corners=False`` semantics;
  * broadcasting is limited to tensor-with-scalar and equal shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "conv2d",
    "depthwise_conv2d",
    "max_pool2d",
    "upsample_bilinear",
    "layer_norm",
    "channel_norm",
    "relu",
    "sigmoid",
    "silu",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "elementwise",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "tsum",
    "tmean",
    "backward",
    "grad_check",
]


class Tensor:
    """n-dimensional array node of a computation graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


@dataclass
class Tape:
    """Recorded operations of one graph, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)
    consumed: bool = False

    def reset(self) -> None:
        """Clear intermediate gradients so that the graph can be replayed."""
        for node in self.nodes:
            if node._parents:
                node.grad = None
        self.consumed = False


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> Tape:
    """Populate ``grad`` on every tensor of the graph that requires it."""
    if output.size != 1:
        raise ValueError(f"backward needs a single-element output, got shape {output.shape}")
    if output._tape is not None and output._tape.consumed:
        raise StateError("backward already ran on this graph; call Tape.reset() first")
    nodes = _topological(output)
    tape = output._tape or Tape(nodes)
    tape.nodes = nodes
    output.grad = np.ones_like(output.data)
    for node in reversed(nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + g
    tape.consumed = True
    output._tape = tape
    return tape


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    if a.shape != b.shape and a.size == 1 and a.ndim > b.ndim and b.size != 1:
        raise DimensionError(f"{op}: scalar operand has more axes than {b.shape}")
    if a.shape != b.shape and b.size == 1 and b.ndim > a.ndim and a.size != 1:
        raise DimensionError(f"{op}: scalar operand has more axes than {a.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        ga = g / b.data
        return _reduce_to(ga, a.shape), _reduce_to(-ga * out, b.shape)

    return _make(out, (a, b), grad_fn, "div")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu_values(v: np.ndarray) -> np.ndarray:
    return v * _sigmoid(v)


def silu_derivative(v: np.ndarray) -> np.ndarray:
    s = _sigmoid(v)
    return s * (1.0 + v * (1.0 - s))


def silu(x) -> Tensor:
    x = as_tensor(x)
    return _make(silu_values(x.data), (x,), lambda g: (g * silu_derivative(x.data),), "silu")


_ELEMENTWISE = {
    "silu": silu,
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
}


def elementwise(op_name: str, *args) -> Tensor:
    """Dispatch by name; kept for callers that build graphs from configs."""
    try:
        fn = _ELEMENTWISE[op_name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_name!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _make(out, (x,), grad_fn, "sum")


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands need >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents differ (a axis -1 = {a.shape[-1]}, b axis -2 = {b.shape[-2]})"
        )
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} disagree")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} disagree")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.ndim > a.ndim:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# convolution, pooling, resampling, normalization


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor | None, groups_depthwise: bool) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv: input must be [B,C,H,W], got {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv: kernel must be [Cout,Cin,kh,kw], got {w.shape}")
    if groups_depthwise:
        if w.shape[0] != x.shape[1] or w.shape[1] != 1:
            raise DimensionError(
                f"depthwise conv: kernel axes (Cout, Cin)={w.shape[:2]} must be ({x.shape[1]}, 1)"
            )
    elif w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv: input channel axis 1 = {x.shape[1]} != kernel axis 1 = {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv: bias shape {b.shape} != ({w.shape[0]},)")


def _pad(v: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return v
    return np.pad(v, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _out_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    if k > n + 2 * padding:
        raise DimensionError(f"conv: kernel extent {k} exceeds padded input extent on axis {axis}")
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [B,Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    _check_conv_shapes(x, w, b, groups_depthwise=False)
    _, _, H, W = x.shape
    _, _, kh, kw = w.shape
    Ho = _out_extent(H, kh, stride, padding, "H (2)")
    Wo = _out_extent(W, kw, stride, padding, "W (3)")
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)  # B,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,Cout
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # B,Ho,Wo,Cin,kh,kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, grad_fn, "conv2d")


def depthwise_conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation; ``w`` has shape [C,1,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv_shapes(x, w, b, groups_depthwise=True)
    _, _, H, W = x.shape
    _, _, kh, kw = w.shape
    Ho = _out_extent(H, kh, 1, padding, "H (2)")
    Wo = _out_extent(W, kw, 1, padding, "W (3)")
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, 1)  # B,C,Ho,Wo,kh,kw
    k = w.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, k)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def grad_fn(g):
        gw = np.einsum("bchw,bchwij->cij", g, win)[:, None] if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho, j : j + Wo] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, grad_fn, "depthwise_conv2d")


def max_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"max_pool2d: extents H={H}, W={W} (axes 2, 3) not divisible by {k}")
    blocks = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // k, W // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        routed = np.zeros((B, C, H // k, W // k, k * k), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        routed = routed.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(B, C, H, W),)

    return _make(out, (x,), grad_fn, "max_pool2d")


def bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """Interpolation weights [factor*n, n] for align_corners=False resampling."""
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    mat = np.zeros((m, n))
    rows = np.arange(m)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear: input must be [B,C,H,W], got {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    uh = bilinear_matrix(x.shape[2], factor).astype(x.data.dtype)
    uw = bilinear_matrix(x.shape[3], factor).astype(x.data.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", uh, x.data, uw, optimize=True)
    return _make(
        out,
        (x,),
        lambda g: (np.einsum("ph,bcpq,qw->bchw", uh, g, uw, optimize=True),),
        "upsample_bilinear",
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({D},) for last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


def channel_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization across the channel axis of an NCHW map, per pixel."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"channel_norm: input must be [B,C,H,W], got {x.shape}")
    y = layer_norm(transpose(x, (0, 2, 3, 1)), gamma, beta, eps)
    return transpose(y, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# verification harness


def grad_check(fn, inputs, h: float = 1e-5) -> float:
    """Max relative deviation between reverse-mode and central-difference gradients.

    ``inputs`` is a Tensor or a sequence of Tensors; ``fn`` receives them in
    the same structure and must return a single-element Tensor. The error of
    each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    single = isinstance(inputs, Tensor) or not isinstance(inputs, (list, tuple))
    arrays = [np.array(as_tensor(inputs).data, dtype=np.float64)] if single else [
        np.array(as_tensor(t).data, dtype=np.float64) for t in inputs
    ]

    def call(arrs, requires_grad=False):
        ts = [Tensor(a, requires_grad=requires_grad) for a in arrs]
        out = fn(ts[0]) if single else fn(*ts)
        return ts, out

    ts, out = call(arrays, requires_grad=True)
    backward(out)
    worst = 0.0
    for k, (t, base) in enumerate(zip(ts, arrays)):
        analytic = t.grad if t.grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            fp = call(arrays)[1].data.sum()
            base[idx] = orig - h
            fm = call(arrays)[1].data.sum()
            base[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)
