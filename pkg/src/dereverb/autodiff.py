"""Dense float64 tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the dereverberation model needs:
strided/dilated/transposed 1-D convolutions, channel mixing, activations,
global layer normalisation, pooling, and the elementwise/reduction
primitives they are built from.  Graphs are define-by-run: every op
returns a fresh ``Tensor`` whose backward rule closes over its parents,
and gradients accumulate additively across fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "GraphError",
    "set_debug_checks",
    "backward",
    "zero_grads",
    "relu",
    "prelu",
    "softmax",
    "matmul",
    "linear",
    "conv1d",
    "depthwise_conv1d",
    "pointwise_conv1d",
    "transposed_conv1d",
    "global_avg_pool",
    "global_layer_norm",
    "numerical_gradient",
    "numerical_gradient_at",
    "max_relative_error",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy the op contract."""


class ConfigError(ValueError):
    """Structurally invalid configuration (kernel size, stride, padding)."""


class GraphError(RuntimeError):
    """Autodiff graph misuse, e.g. backward from a non-scalar node."""


_debug_finite = False


def set_debug_checks(enabled: bool) -> None:
    """Assert finiteness after every op (slow; for tests and debugging).

    When disabled (the default) non-finite values propagate.
    """
    global _debug_finite
    _debug_finite = bool(enabled)


class Tensor:
    """A node in the computation graph.

    Holds a float64 ndarray value plus, for nodes that participate in
    differentiation, a gradient accumulator of the same shape and a
    backward rule over the parent nodes.  Values are treated as immutable
    once created; parameter updates mutate ``data`` in place only between
    forward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op (debug checks enabled)")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias an array the producing op still references
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; graph depth can exceed the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every leaf's .grad.

    Gradients add into pre-existing ``grad`` arrays on leaves, so batch
    items may be backpropagated one at a time and reduced by summation.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- elementwise / reduction primitives -----------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    n = float(exponent)
    out_data = a.data**n

    def bwd(g):
        _accum(a, g * n * a.data ** (n - 1.0))

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), bwd)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.full(a.shape, g / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.shape).copy())

    return _make(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {a.shape}")
    out_data = a.data.T.copy()

    def bwd(g):
        _accum(a, g.T)

    return _make(out_data, (a,), bwd)


def getitem(a, key) -> Tensor:
    # basic indexing only (ints/slices); views have no repeated elements,
    # so the scatter in the backward rule is a plain slice-add
    a = _as_tensor(a)
    out_data = a.data[key].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(out_data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def bwd(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def bwd(g):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def bwd(g):
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))

    else:
        raise ShapeError(f"matmul supports rank 1-2 operands, got {a.shape} @ {b.shape}")
    return _make(out_data, (a, b), bwd)


# -- activations -----------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), bwd)


def prelu(a, slope) -> Tensor:
    """PReLU with one learnable scalar slope (shape (1,)) per instance."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    if slope.size != 1:
        raise ShapeError(f"prelu slope must be a single scalar, got shape {slope.shape}")
    s = slope.data.reshape(-1)[0]
    neg = a.data <= 0.0
    out_data = np.where(neg, s * a.data, a.data)

    def bwd(g):
        _accum(a, g * np.where(neg, s, 1.0))
        _accum(slope, np.array([(g * np.where(neg, a.data, 0.0)).sum()]).reshape(slope.shape))

    return _make(out_data, (a, slope), bwd)


def softmax(a) -> Tensor:
    """Numerically stable softmax over a rank-1 tensor."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"softmax expects a rank-1 tensor, got shape {a.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def bwd(g):
        _accum(a, y * (g - float(g @ y)))

    return _make(y, (a,), bwd)


# -- convolutions -----------------------------------------------------------


def conv1d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 1-D cross-correlation.

    x: [C_in, L], kernel: [C_out, C_in, K] -> [C_out, L_out] with
    L_out = floor((L + 2*padding - K) / stride) + 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2:
        raise ShapeError(f"conv1d input must be rank 2 [channels, length], got shape {x.shape}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be rank 3 [out, in, taps], got shape {kernel.shape}")
    c_in, length = x.shape
    c_out, k_in, ksize = kernel.shape
    if k_in != c_in:
        raise ShapeError(
            f"conv1d: kernel input channels (axis 1) = {k_in} != input channels (axis 0) = {c_in}"
        )
    if ksize < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"conv1d: need K >= 1, stride >= 1, padding >= 0; got K={ksize}, stride={stride}, padding={padding}")
    if length + 2 * padding < ksize:
        raise ShapeError(
            f"conv1d: kernel taps K={ksize} exceed padded length {length + 2 * padding} (input axis 1)"
        )

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    l_out = (length + 2 * padding - ksize) // stride + 1
    patches = np.empty((c_in, ksize, l_out))
    for j in range(ksize):
        patches[:, j, :] = xp[:, j : j + stride * l_out : stride]
    out_data = kernel.data.reshape(c_out, c_in * ksize) @ patches.reshape(c_in * ksize, l_out)

    def bwd(g):
        if kernel.requires_grad:
            _accum(kernel, (g @ patches.reshape(c_in * ksize, l_out).T).reshape(kernel.shape))
        if x.requires_grad:
            dpatches = (kernel.data.reshape(c_out, c_in * ksize).T @ g).reshape(c_in, ksize, l_out)
            dxp = np.zeros_like(xp)
            for j in range(ksize):
                dxp[:, j : j + stride * l_out : stride] += dpatches[:, j, :]
            _accum(x, dxp[:, padding : padding + length] if padding else dxp)

    return _make(out_data, (x, kernel), bwd)


def depthwise_conv1d(x, kernel, dilation: int = 1) -> Tensor:
    """Per-channel dilated cross-correlation preserving length.

    x: [G, L], kernel: [G, P] with P odd; symmetric zero padding of
    (P-1)*dilation/2 per side keeps the frame count unchanged.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d expects rank-2 operands, got {x.shape} and {kernel.shape}")
    g_ch, length = x.shape
    k_ch, taps = kernel.shape
    if k_ch != g_ch:
        raise ShapeError(f"depthwise_conv1d: kernel rows {k_ch} != input channels {g_ch}")
    if taps % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd to preserve length, got P={taps}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")

    pad = (taps - 1) * dilation // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    out_data = np.zeros_like(x.data)
    for p in range(taps):
        out_data += kernel.data[:, p : p + 1] * xp[:, p * dilation : p * dilation + length]

    def bwd(g):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for p in range(taps):
                dk[:, p] = (g * xp[:, p * dilation : p * dilation + length]).sum(axis=1)
            _accum(kernel, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for p in range(taps):
                dxp[:, p * dilation : p * dilation + length] += g * kernel.data[:, p : p + 1]
            _accum(x, dxp[:, pad : pad + length] if pad else dxp)

    return _make(out_data, (x, kernel), bwd)


def pointwise_conv1d(x, kernel) -> Tensor:
    """Channel mixing per frame: x [G, L], kernel [G, H] -> [H, L]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"pointwise_conv1d expects rank-2 operands, got {x.shape} and {kernel.shape}")
    if kernel.shape[0] != x.shape[0]:
        raise ShapeError(
            f"pointwise_conv1d: kernel rows (axis 0) = {kernel.shape[0]} != input channels (axis 0) = {x.shape[0]}"
        )
    out_data = kernel.data.T @ x.data

    def bwd(g):
        if kernel.requires_grad:
            _accum(kernel, x.data @ g.T)
        if x.requires_grad:
            _accum(x, kernel.data @ g)

    return _make(out_data, (x, kernel), bwd)


def transposed_conv1d(x, kernel, stride: int) -> Tensor:
    """Overlap-add of kernel-weighted frames (adjoint of strided conv1d).

    x: [N, L_x], kernel: [N, K] -> [1, (L_x-1)*stride + K].
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"transposed_conv1d expects rank-2 operands, got {x.shape} and {kernel.shape}")
    n_ch, l_x = x.shape
    k_ch, ksize = kernel.shape
    if k_ch != n_ch:
        raise ShapeError(f"transposed_conv1d: kernel rows {k_ch} != input channels {n_ch}")
    if stride < 1 or ksize % stride != 0:
        raise ConfigError(f"transposed_conv1d: stride {stride} must divide kernel size {ksize}")

    frames = kernel.data.T @ x.data  # [K, L_x]
    l_time = (l_x - 1) * stride + ksize
    out_data = np.zeros((1, l_time))
    for j in range(ksize):
        out_data[0, j : j + stride * l_x : stride] += frames[j]

    def bwd(g):
        gframes = np.empty_like(frames)
        for j in range(ksize):
            gframes[j] = g[0, j : j + stride * l_x : stride]
        if kernel.requires_grad:
            _accum(kernel, x.data @ gframes.T)
        if x.requires_grad:
            _accum(x, kernel.data @ gframes)

    return _make(out_data, (x, kernel), bwd)


# -- layer helpers -----------------------------------------------------------


def linear(x, weight, bias) -> Tensor:
    """Affine map weight [D_out, D_in] @ x [D_in] + bias [D_out]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or x.ndim != 1:
        raise ShapeError(f"linear expects weight rank 2 and input rank 1, got {weight.shape} and {x.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight columns {weight.shape[1]} != input size {x.shape[0]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    return add(matmul(weight, x), bias)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over time: [H, L] -> [H]."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"global_avg_pool expects rank 2, got shape {x.shape}")
    return tensor_mean(x, axis=1)


def global_layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalise by the mean/variance over channels AND time jointly,
    then apply a per-channel affine (gain, bias)."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ConfigError(f"global_layer_norm eps must be positive, got {eps}")
    if x.ndim != 2:
        raise ShapeError(f"global_layer_norm expects rank 2, got shape {x.shape}")
    channels = x.shape[0]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(
            f"global_layer_norm: gain/bias must have shape ({channels},), got {gain.shape} and {bias.shape}"
        )
    mu = tensor_mean(x)
    centered = sub(x, mu)
    var = tensor_mean(mul(centered, centered))
    xhat = div(centered, power(add(var, eps), 0.5))
    return add(mul(reshape(gain, (channels, 1)), xhat), reshape(bias, (channels, 1)))


# -- gradient checking -------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() wrt every entry of x.

    x is perturbed in place while probing and restored afterwards.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def numerical_gradient_at(f: Callable[[], float], x: np.ndarray, index: int, h: float = 1e-5) -> float:
    """Central difference of scalar f() wrt a single flat index of x."""
    flat = x.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    fp = f()
    flat[index] = orig - h
    fm = f()
    flat[index] = orig
    return (fp - fm) / (2.0 * h)


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Infinity-norm relative disagreement between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
