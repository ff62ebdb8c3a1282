"""Double-precision N-d tensors with reverse-mode automatic differentiation.

The whole stack (scans, directional 2D scanning, deformable alignment, the
enhancement net) runs on this engine.  Storage is always float64, row-major
and contiguous; an operation is one graph node (a convolution is a single
node, not a loop of scalar nodes), so graphs stay small and numpy does the
heavy lifting.  Gradients accumulate into ``.grad`` until explicitly zeroed.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "ConfigurationError",
    "ContractError",
    "tensor",
    "zeros",
    "ones",
    "full",
    "concat",
    "matmul",
    "layer_norm",
    "conv2d",
    "conv_transpose2d",
    "gather_rows",
    "pad2d",
    "no_grad",
    "grad_enabled",
    "save_tensor",
    "load_tensor",
]


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigurationError(ValueError):
    """A size/stride/padding combination yields an impossible geometry."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated contract."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A float64 array plus an optional position in a computation graph.

    Leaf tensors created with ``requires_grad=True`` receive accumulated
    gradients in ``.grad`` after ``backward()``.  Interior nodes hold their
    parents and a closure that maps the output gradient to parent gradients;
    their own ``.grad`` is transient and not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # ---- basic introspection -------------------------------------------------

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
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # ---- graph management ----------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation of d(self)/d(leaf) into leaf ``.grad``.

        ``self`` must be a scalar.  Repeated calls without ``zero_grad`` add
        into the existing buffers.  Traversal is iterative so long op chains
        (e.g. unrolled recurrences) cannot hit the recursion limit.
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                # Leaf: persist the gradient.
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg
                else:
                    acc += pg

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, exponent):
        return powi(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    # method-style access for the common ops
    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), grad_fn)


def powi(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    data = a.data**p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(data, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def grad_fn(g):
        return (g * data,)

    return _node(data, (a,), grad_fn)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _node(data, (a,), grad_fn)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / data,)

    return _node(data, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - data * data),)

    return _node(data, (a,), grad_fn)


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated in the overflow-safe split form."""
    a = _wrap(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * sig,)

    return _node(data, (a,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(data, (a,), grad_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient is zero where the clamp is active."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def grad_fn(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    return _node(data, (a,), grad_fn)


# ---- reductions and shaping -----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(np.asarray(data, dtype=np.float64), (a,), grad_fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _node(data, (a,), grad_fn)


def transpose(a, *axes) -> Tensor:
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(data, (a,), grad_fn)


def _slice(a, key) -> Tensor:
    a = _wrap(a)
    data = np.ascontiguousarray(a.data[key])

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _node(data, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def grad_fn(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(np.ascontiguousarray(p) for p in pieces)

    return _node(data, tuple(tensors), grad_fn)


def gather_rows(a, indices, inverse=None) -> Tensor:
    """Select rows along axis 0: ``out[i] = a[indices[i]]``.

    When ``indices`` is a permutation, pass its inverse so the backward pass
    is a plain gather instead of a scatter-add.
    """
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    if inverse is not None:
        inv = np.asarray(inverse, dtype=np.intp)

        def grad_fn(g):
            return (np.ascontiguousarray(g[inv]),)

    else:

        def grad_fn(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

    return _node(data, (a,), grad_fn)


def pad2d_edges(a, top: int, bottom: int, left: int, right: int,
                mode: str = "zero") -> Tensor:
    """Pad the trailing two axes of a (C, H, W) tensor, per-edge amounts."""
    a = _wrap(a)
    if a.data.ndim != 3:
        raise DimensionError("padding expects a (C, H, W) tensor")
    if not (top or bottom or left or right):
        return a
    C, H, W = a.data.shape
    if mode == "zero":
        data = np.zeros((C, H + top + bottom, W + left + right))
        data[:, top : top + H, left : left + W] = a.data

        def grad_fn(g):
            return (np.ascontiguousarray(g[:, top : top + H, left : left + W]),)

        return _node(data, (a,), grad_fn)
    if mode in ("reflect", "edge"):
        if mode == "reflect" and (max(top, bottom) >= H or max(left, right) >= W):
            raise DimensionError("reflection padding must be smaller than the image")
        iy = np.pad(np.arange(H), (top, bottom), mode=mode)
        ix = np.pad(np.arange(W), (left, right), mode=mode)
        data = a.data[:, iy][:, :, ix]

        def grad_fn(g):
            gy = np.zeros((C, H, W + left + right))
            np.add.at(gy, (slice(None), iy), g)
            gx = np.zeros((C, H, W))
            np.add.at(gx, (slice(None), slice(None), ix), gy)
            return (gx,)

        return _node(data, (a,), grad_fn)
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d(a, pad_h: int, pad_w: int, mode: str = "zero") -> Tensor:
    """Symmetric two-axis padding of a (C, H, W) tensor."""
    return pad2d_edges(a, pad_h, pad_h, pad_w, pad_w, mode=mode)


# ---- matmul ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Standard 2-D matrix product with gradients for both operands."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), grad_fn)


# ---- layer normalization ----------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    C = x.data.shape[-1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError(
            f"gamma/beta must have shape ({C},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    data = gamma.data * xhat + beta.data

    def grad_fn(g):
        gxhat = g * gamma.data
        # d/dx of (x - mu) / sigma, folded into the usual three-term form
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (gxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), grad_fn)


# ---- 2-D convolution ---------------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    # Floor semantics: trailing positions that do not fit a full window are
    # dropped, the convention every conv stack uses for stride > 1.
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigurationError(
            f"kernel {k} does not fit input extent {n} with padding {pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(C, H, W) -> patch matrix (Ho*Wo, C*k*k) with (c, ky, kx) ordering."""
    C, H, W = x.shape
    Ho = _conv_out_size(H, k, stride, pad)
    Wo = _conv_out_size(W, k, stride, pad)
    if Ho == 0 or Wo == 0 or C == 0:
        return np.zeros((Ho * Wo, C * k * k)), Ho, Wo
    xp = x
    if pad > 0:
        xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
        xp[:, pad : pad + H, pad : pad + W] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(
        Ho * Wo, C * k * k
    )
    return cols, Ho, Wo


def _col2im(
    cols: np.ndarray, C: int, H: int, W: int, k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the (C, H, W) grid."""
    Ho = _conv_out_size(H, k, stride, pad)
    Wo = _conv_out_size(W, k, stride, pad)
    buf = np.zeros((C, H + 2 * pad, W + 2 * pad))
    if Ho == 0 or Wo == 0 or C == 0:
        return buf[:, pad : pad + H, pad : pad + W]
    patches = cols.reshape(Ho, Wo, C, k, k).transpose(2, 0, 1, 3, 4)
    for ky in range(k):
        ys = slice(ky, ky + (Ho - 1) * stride + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + (Wo - 1) * stride + 1, stride)
            buf[:, ys, xs] += patches[:, :, :, ky, kx]
    return np.ascontiguousarray(buf[:, pad : pad + H, pad : pad + W])


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, k, k), zero padding."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x:(C,H,W) and w:(Co,Ci,k,k)")
    C_out, C_in, k, k2 = w.data.shape
    if k != k2:
        raise DimensionError("conv2d kernels must be square")
    if k % 2 != 1:
        raise ConfigurationError("conv2d kernel size must be odd")
    if x.data.shape[0] != C_in:
        raise DimensionError(
            f"input has {x.data.shape[0]} channels, kernel expects {C_in}"
        )
    C, H, W = x.data.shape
    cols, Ho, Wo = _im2col(x.data, k, stride, pad)
    w_mat = w.data.reshape(C_out, C_in * k * k)
    # contiguous transpose: keeps this contraction bitwise-reproducible by
    # other patch-matrix producers (the deformable path) hitting the same gemm
    out_mat = cols @ np.ascontiguousarray(w_mat.T)
    data = out_mat.T.reshape(C_out, Ho, Wo)

    def grad_fn(g):
        g_mat = g.reshape(C_out, Ho * Wo).T
        gw = (g_mat.T @ cols).reshape(w.data.shape)
        gcols = g_mat @ w_mat
        gx = _col2im(gcols, C, H, W, k, stride, pad)
        return gx, gw

    return _node(data, (x, w), grad_fn)


def conv_transpose2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (the adjoint map of ``conv2d`` on the same geometry).

    ``x`` is (C_in, H, W); ``w`` is (C_in, C_out, k, k).  Output extent is
    ``(H - 1) * stride - 2 * pad + k``.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError("conv_transpose2d expects x:(C,H,W) and w:(Ci,Co,k,k)")
    C_in, C_out, k, k2 = w.data.shape
    if k != k2:
        raise DimensionError("conv_transpose2d kernels must be square")
    if x.data.shape[0] != C_in:
        raise DimensionError(
            f"input has {x.data.shape[0]} channels, kernel expects {C_in}"
        )
    C, H, W = x.data.shape
    H_out = (H - 1) * stride - 2 * pad + k
    W_out = (W - 1) * stride - 2 * pad + k
    if H_out < 0 or W_out < 0:
        raise ConfigurationError("transposed convolution output size is negative")
    x_mat = x.data.reshape(C_in, H * W).T
    w_mat = w.data.reshape(C_in, C_out * k * k)
    cols = x_mat @ w_mat
    data = _col2im(cols, C_out, H_out, W_out, k, stride, pad)

    def grad_fn(g):
        gcols, _, _ = _im2col(g, k, stride, pad)
        gx = (gcols @ w_mat.T).T.reshape(C_in, H, W)
        gw = (x_mat.T @ gcols).reshape(w.data.shape)
        return np.ascontiguousarray(gx), gw

    return _node(data, (x, w), grad_fn)


# ---- persistence -------------------------------------------------------------

_MAGIC = b"VSST"


def save_tensor(t: Tensor | np.ndarray, path) -> None:
    """Flat little-endian binary: magic, u32 rank, u64 dims, float64 payload."""
    arr = t.data if isinstance(t, Tensor) else _as_array(t)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ContractError(f"{path}: not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    if payload.size != count:
        raise ContractError(f"{path}: truncated tensor payload")
    return Tensor(payload.reshape(dims).copy())
