"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation in this package (classifier forward passes,
the gradient-predicting autoencoder, margin losses) is expressed through the
operations here. Conventions, chosen once and relied on everywhere:

* float64 only; desk-scale problem sizes make precision cheaper than drift.
* convolutions are cross-correlations (no kernel flip).
* max-style operations break ties toward the first index in row-major order,
  so backward passes are deterministic.
* non-differentiable points (relu at 0, clamp boundaries handled per op)
  take the subgradient 0 / first-branch convention.

Gradient correctness is checked against central finite differences via
:func:`numeric_grad_check`, which is the independent oracle for this module.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ParamSet",
    "no_grad",
    "matmul",
    "fully_connected",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "batchnorm2d",
    "softmax",
    "log_softmax",
    "numeric_grad_check",
    "load_paramset",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 array plus an optional place in a recorded graph.

    Tensors produced by operations on graph-tracked inputs remember their
    parents and a backward closure; ``backward()`` on a scalar root then
    fills ``.grad`` on every tracked tensor it reaches. Tensors are treated
    as immutable values once created (optimizer steps mutate leaf ``.data``
    in place between graph constructions, never inside one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # -- basic introspection ------------------------------------------------

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root; fills ``.grad`` on leaves.

        The adjoint of the root is 1. Each recorded node is visited exactly
        once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _wrap(other)
        out = _node(self.data + other.data, (self, other), "add")
        if out._backward_fn is _PENDING:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward_fn = backward
        return out

    def __radd__(self, other) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other)
        out = _node(self.data - other.data, (self, other), "sub")
        if out._backward_fn is _PENDING:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))
            out._backward_fn = backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other)
        out = _node(self.data * other.data, (self, other), "mul")
        if out._backward_fn is _PENDING:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward_fn = backward
        return out

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other)
        out = _node(self.data / other.data, (self, other), "div")
        if out._backward_fn is _PENDING:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward_fn = backward
        return out

    def __neg__(self) -> "Tensor":
        out = _node(-self.data, (self,), "neg")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                a._accumulate(-g)
            out._backward_fn = backward
        return out

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        out = _node(self.data ** e, (self,), "pow")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                a._accumulate(g * e * a.data ** (e - 1.0))
            out._backward_fn = backward
        return out

    # -- elementwise nonlinearities ----------------------------------------

    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0.0), (self,), "relu")
        if out._backward_fn is _PENDING:
            mask = self.data > 0.0
            def backward(g, a=self):
                a._accumulate(g * mask)
            out._backward_fn = backward
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = _node(t, (self,), "tanh")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                a._accumulate(g * (1.0 - t * t))
            out._backward_fn = backward
        return out

    def exp(self) -> "Tensor":
        v = np.exp(self.data)
        out = _node(v, (self,), "exp")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                a._accumulate(g * v)
            out._backward_fn = backward
        return out

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,), "log")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                a._accumulate(g / a.data)
            out._backward_fn = backward
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clip to [lo, hi]; gradient passes only where the input is inside."""
        out = _node(np.clip(self.data, lo, hi), (self,), "clamp")
        if out._backward_fn is _PENDING:
            mask = (self.data >= lo) & (self.data <= hi)
            def backward(g, a=self):
                a._accumulate(g * mask)
            out._backward_fn = backward
        return out

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out._backward_fn is _PENDING:
            shape = self.data.shape
            def backward(g, a=self):
                gg = g
                if axis is not None and not keepdims:
                    axes = (axis,) if isinstance(axis, int) else tuple(axis)
                    gg = np.expand_dims(gg, tuple(ax % len(shape) for ax in axes))
                a._accumulate(np.broadcast_to(gg, shape).copy())
            out._backward_fn = backward
        return out

    def max(self) -> "Tensor":
        """Max over all elements; backward routes to the first argmax."""
        if self.data.size == 0:
            raise ValueError("max() of an empty tensor")
        flat_idx = int(np.argmax(self.data))
        out = _node(self.data.reshape(-1)[flat_idx], (self,), "max")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                contrib = np.zeros_like(a.data)
                contrib.reshape(-1)[flat_idx] = g.reshape(())
                a._accumulate(contrib)
            out._backward_fn = backward
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out._backward_fn is _PENDING:
            orig = self.data.shape
            def backward(g, a=self):
                a._accumulate(g.reshape(orig))
            out._backward_fn = backward
        return out

    def gather(self, indices) -> "Tensor":
        """Pick elements at flat indices; backward scatter-adds into place."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ValueError("gather() needs at least one index")
        if idx.min() < 0 or idx.max() >= self.data.size:
            raise ValueError(
                f"gather index out of range for tensor of size {self.data.size}"
            )
        out = _node(self.data.reshape(-1)[idx], (self,), "gather")
        if out._backward_fn is _PENDING:
            def backward(g, a=self):
                contrib = np.zeros(a.data.size)
                np.add.at(contrib, idx, g)
                a._accumulate(contrib.reshape(a.data.shape))
            out._backward_fn = backward
        return out


_PENDING: Callable[[np.ndarray], None] = lambda g: None  # sentinel: node is tracked


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    """Create an output tensor, marking it tracked iff grads are wanted."""
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._parents = parents
        out._op = op
        out._backward_fn = _PENDING
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra and dense layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with standard reverse-mode rules."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out._backward_fn is _PENDING:
        def backward(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward_fn = backward
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer ``x @ weight + bias``; weight is (in_features, out_features)."""
    x = _wrap(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, x.size)
    if x.ndim != 2:
        raise ValueError(f"fully_connected expects 1-D or 2-D input, got {x.shape}")
    out = matmul(x, weight) + bias
    return out.reshape(out.shape[1]) if squeeze else out


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _promote_image(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{op} expects (C,H,W) or (N,C,H,W) input, got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is
    (C_out, C_in, k, k); ``bias`` is (C_out,). Output height is
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    x4, squeeze = _promote_image(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    n, c, h, w = x4.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(
            f"conv2d window {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwij,ocij->nohw", win, kernel.data, optimize=True)
    out_data += bias.data[None, :, None, None]
    out = _node(out_data, (x4, kernel, bias), "conv2d")
    if out._backward_fn is _PENDING:
        ho, wo = out_data.shape[2], out_data.shape[3]
        def backward(g, x4=x4, kernel=kernel, bias=bias):
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                kernel._accumulate(np.einsum("nohw,nchwij->ocij", g, win, optimize=True))
            if x4.requires_grad:
                d_win = np.einsum("nohw,ocij->nchwij", g, kernel.data, optimize=True)
                d_xp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        d_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            d_win[:, :, :, :, i, j]
                if padding:
                    d_xp = d_xp[:, :, padding:padding + h, padding:padding + w]
                x4._accumulate(d_xp)
        out._backward_fn = backward
    return out.reshape(out.shape[1:]) if squeeze else out


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_padding: int | tuple[int, int] = 0,
) -> Tensor:
    """Transposed 2-D convolution (the adjoint map of :func:`conv2d`).

    ``x`` is (C_in, H, W) or batched; ``kernel`` is (C_in, C_out, k, k).
    Output height is ``(H-1)*stride - 2*padding + k + output_padding`` with
    ``output_padding < stride`` appending zeros at the bottom/right edge; it
    exists to invert the rounding a strided conv applies to odd sizes.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    x4, squeeze = _promote_image(x, "conv_transpose2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(
            f"conv_transpose2d kernel must be (C_in, C_out, k, k), got {kernel.shape}"
        )
    c_in, c_out, k, _ = kernel.shape
    n, c, h, w = x4.shape
    if c != c_in:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {c}, kernel expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv_transpose2d bias must be ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d stride must be >= 1, got {stride}")
    oph, opw = (output_padding, output_padding) if isinstance(output_padding, int) \
        else output_padding
    if not (0 <= oph < stride and 0 <= opw < stride):
        raise ValueError(
            f"output_padding {(oph, opw)} must lie in [0, stride) for stride {stride}"
        )
    hf, wf = (h - 1) * stride + k + oph, (w - 1) * stride + k + opw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d output collapsed to nothing; check padding")
    contrib = np.einsum("nchw,coij->nohwij", x4.data, kernel.data, optimize=True)
    canvas = np.zeros((n, c_out, hf, wf))
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                contrib[:, :, :, :, i, j]
    out_data = canvas[:, :, padding:padding + ho, padding:padding + wo].copy()
    out_data += bias.data[None, :, None, None]
    out = _node(out_data, (x4, kernel, bias), "conv_transpose2d")
    if out._backward_fn is _PENDING:
        def backward(g, x4=x4, kernel=kernel, bias=bias):
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            g_can = np.zeros((n, c_out, hf, wf))
            g_can[:, :, padding:padding + ho, padding:padding + wo] = g
            win_g = sliding_window_view(g_can, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            win_g = win_g[:, :, :h, :w]
            if kernel.requires_grad:
                kernel._accumulate(
                    np.einsum("nchw,nohwij->coij", x4.data, win_g, optimize=True)
                )
            if x4.requires_grad:
                x4._accumulate(
                    np.einsum("nohwij,coij->nchw", win_g, kernel.data, optimize=True)
                )
        out._backward_fn = backward
    return out.reshape(out.shape[1:]) if squeeze else out


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; H and W must divide by ``window``.

    Backward routes each cell's adjoint to the first maximal position of its
    window in row-major order.
    """
    x = _wrap(x)
    x4, squeeze = _promote_image(x, "maxpool2d")
    n, c, h, w = x4.shape
    if window < 1:
        raise ValueError(f"maxpool2d window must be >= 1, got {window}")
    if h % window or w % window:
        raise ValueError(
            f"maxpool2d input {h}x{w} not divisible by window {window}"
        )
    ho, wo = h // window, w // window
    tiles = x4.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(n, c, ho, wo, window * window)
    idx = np.argmax(flat, axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = _node(out_data, (x4,), "maxpool2d")
    if out._backward_fn is _PENDING:
        def backward(g, x4=x4):
            d_flat = np.zeros((n, c, ho, wo, window * window))
            np.put_along_axis(d_flat, idx[..., None], g[..., None], axis=-1)
            d = d_flat.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
            x4._accumulate(d.reshape(n, c, h, w))
        out._backward_fn = backward
    return out.reshape(out.shape[1:]) if squeeze else out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization with the affine transform applied.

    Train mode normalizes with the current batch's per-channel statistics and
    updates the running stats in place by exponential moving average (unbiased
    variance in the running estimate). Eval mode uses the frozen running stats.
    Built from differentiable primitives, so gradients flow through the batch
    statistics in train mode.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm2d eps must be > 0, got {eps}")
    x = _wrap(x)
    x4, squeeze = _promote_image(x, "batchnorm2d")
    n, c, h, w = x4.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ValueError(f"batchnorm2d {name} must be ({c},), got {t.shape}")
    count = n * h * w
    if train:
        mu = x4.sum(axis=(0, 2, 3), keepdims=True) * (1.0 / count)
        centered = x4 - mu
        var = (centered * centered).sum(axis=(0, 2, 3), keepdims=True) * (1.0 / count)
        xhat = centered * ((var + eps) ** -0.5)
        with no_grad():
            unbiased = count / max(count - 1, 1)
            running_mean.data *= 1.0 - momentum
            running_mean.data += momentum * mu.data.reshape(c)
            running_var.data *= 1.0 - momentum
            running_var.data += momentum * unbiased * var.data.reshape(c)
    else:
        rm = Tensor(running_mean.data.reshape(1, c, 1, 1))
        rv = Tensor(running_var.data.reshape(1, c, 1, 1))
        xhat = (x4 - rm) * ((rv + eps) ** -0.5)
    out = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return out.reshape(out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized log-softmax (max subtraction before exp)."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(logp, (x,), "log_softmax")
    if out._backward_fn is _PENDING:
        p = np.exp(logp)
        def backward(g, x=x):
            x._accumulate(g - p * g.sum(axis=axis, keepdims=True))
        out._backward_fn = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax; outputs are nonnegative and sum to 1 per sample."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _node(s, (x,), "softmax")
    if out._backward_fn is _PENDING:
        def backward(g, x=x):
            x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# the finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray | Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Returns ``max_i |g_ad[i] - g_fd[i]| / max(1, |g_ad[i]|)`` where ``g_fd``
    comes from central differences with step ``h``. This function is the
    independent oracle for every differentiable operation in the package; it
    never uses the graph to produce the reference values.
    """
    if h <= 0:
        raise ValueError(f"numeric_grad_check step must be > 0, got {h}")
    base = x.data if isinstance(x, Tensor) else _as_array(x)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("numeric_grad_check requires a scalar-valued function")
    out.backward()
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    g_fd = np.zeros_like(base)
    flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xp.reshape(-1)[i] += h
            fp = f(Tensor(xp)).item()
            xm = base.copy()
            xm.reshape(-1)[i] -= h
            fm = f(Tensor(xm)).item()
            flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(g_ad))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


# ---------------------------------------------------------------------------
# named parameter collections and their binary container
# ---------------------------------------------------------------------------

_MAGIC = b"GPAT"
_VERSION = 1


class ParamSet:
    """Named tensors with a stable, deterministic iteration order.

    Insertion order is the iteration order; names are unique. Serializes to a
    flat binary container: magic ``GPAT``, version u32, entry count u32, then
    per entry a u16 name length, UTF-8 name, u8 rank, u32 dims, and the
    payload as little-endian float64 in row-major order. All header integers
    are little-endian.
    """

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._items.values())

    def copy(self) -> "ParamSet":
        """Deep copy: fresh data arrays, grads cleared, flags preserved."""
        out = ParamSet()
        for name, t in self._items.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: t.shape for name, t in self._items.items()}

    # -- container IO -------------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [
            _MAGIC,
            struct.pack("<I", _VERSION),
            struct.pack("<I", len(self._items)),
        ]
        for name, t in self._items.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name!r}")
            # asarray, not ascontiguousarray: the latter promotes rank 0 to 1
            arr = np.asarray(t.data, dtype="<f8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        view = memoryview(blob)
        if bytes(view[:4]) != _MAGIC:
            raise ValueError(
                f"bad container magic {bytes(view[:4])!r} at offset 0, expected {_MAGIC!r}"
            )
        version = struct.unpack_from("<I", view, 4)[0]
        if version != _VERSION:
            raise ValueError(f"unsupported container version {version}")
        count = struct.unpack_from("<I", view, 8)[0]
        offset = 12
        out = cls()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", view, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", view, offset)
            offset += 4 * rank
            n_items = int(np.prod(dims)) if rank else 1
            nbytes = 8 * n_items
            if offset + nbytes > len(blob):
                raise ValueError(
                    f"truncated container: entry {name!r} wants {nbytes} payload "
                    f"bytes at offset {offset}, file has {len(blob)}"
                )
            arr = np.frombuffer(view[offset:offset + nbytes], dtype="<f8").reshape(dims)
            offset += nbytes
            out.add(name, Tensor(arr.astype(np.float64)))
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def load_paramset(path) -> ParamSet:
    return ParamSet.load(path)
