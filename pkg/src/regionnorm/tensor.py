"""Dense NCHW tensor engine with reverse-mode automatic differentiation.

Every primitive the rest of the package composes lives here: convolutions,
channel-axis pooling, elementwise math, reductions, and region-masked
moments.  Feature maps follow the NCHW layout; biases, per-channel affine
parameters and scalar losses use lower ranks.

Gradients are recorded on a thread-confined tape in execution order and
replayed in reverse by ``Tensor.backward``.  Any operation that produces a
non-finite value raises :class:`NumericError` immediately.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import EmptyRegionError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "no_grad",
    "grad_enabled",
    "active_tape",
    "clear_tape",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "abs_",
    "sum_",
    "mean_",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "channel_max_pool",
    "channel_avg_pool",
    "masked_moments",
]

# ---------------------------------------------------------------------------
# Element type selection: float32 for training runs, float64 for
# verification (finite-difference oracles need the extra precision).

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported element type {dt}; use float32 or float64")
    _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the element type (used by verification suites)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # One reduction instead of a full isfinite scan: any NaN/Inf poisons the
    # sum, and legitimate overflow cannot occur at this package's magnitudes.
    if not np.isfinite(arr.sum()):
        raise NumericError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# Gradient tape.


class GradTape:
    """Record of executed operations, in execution order.

    ``backward`` replays the record in reverse, firing each node at most
    once.  Nodes whose output never received a gradient are left in place
    (or dropped when ``clear=True``), so a discriminator update can run its
    backward pass without consuming the generator's pending nodes.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None, clear: bool = True) -> None:
        if grad is None:
            grad = np.ones_like(loss.data)
        if grad.shape != loss.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != loss shape {loss.data.shape}")
        loss.grad = np.array(grad, dtype=loss.data.dtype, copy=True)
        nodes = self._nodes
        for i in range(len(nodes) - 1, -1, -1):
            out, fn = nodes[i]
            if out.grad is not None:
                fn(out.grad)
                nodes[i] = None
        self._nodes = [] if clear else [n for n in nodes if n is not None]


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.enabled = True


_state = _ThreadState()


def active_tape() -> GradTape:
    """The calling thread's tape."""
    return _state.tape


def clear_tape() -> None:
    _state.tape.clear()


def grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    """Disable tape recording (inference / finite-difference evaluations)."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


# ---------------------------------------------------------------------------
# Tensor.


class Tensor:
    """A dense numeric array with optional gradient-tape participation.

    Data is treated as immutable once constructed; sharing tensors across
    threads for reading is safe.  ``grad`` is populated by ``backward`` and
    always matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=_default_dtype if dtype is None else dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValueError(f"unsupported element type {arr.dtype}")
        _ensure_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _from_op(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        _ensure_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autograd -----------------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data, disconnected from the tape."""
        return Tensor._from_op(self.data, False, "detach")

    def backward(self, grad: np.ndarray | None = None, clear: bool = True) -> None:
        """Backpropagate from this tensor through the thread's tape.

        Non-scalar tensors are seeded with ones (implicit sum reduction)
        unless an explicit ``grad`` array is given.
        """
        _state.tape.backward(self, grad=grad, clear=clear)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(scalar))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return abs_(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean_(self)


class Parameter(Tensor):
    """A learnable tensor.  ``name`` is the dotted path inside its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


# ---------------------------------------------------------------------------
# Recording helpers.


def _needs_grad(*tensors: Tensor) -> bool:
    return _state.enabled and any(t.requires_grad for t in tensors)


def _record(out: Tensor, backward_fn) -> None:
    if out.requires_grad:
        _state.tape.record(out, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_default_dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over broadcast dimensions back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise suite.


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._from_op(a.data + b.data, _needs_grad(a, b), "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._from_op(a.data - b.data, _needs_grad(a, b), "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._from_op(a.data * b.data, _needs_grad(a, b), "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b_data, a_data.shape))
        _accumulate(b, _unbroadcast(g * a_data, b_data.shape))

    _record(out, backward)
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor._from_op(-x.data, _needs_grad(x), "neg")

    def backward(g):
        _accumulate(x, -g)

    _record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._from_op(np.maximum(x.data, 0), _needs_grad(x), "relu")
    positive = x.data > 0

    def backward(g):
        _accumulate(x, g * positive)

    _record(out, backward)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = Tensor._from_op(np.where(x.data > 0, x.data, slope * x.data), _needs_grad(x), "leaky_relu")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def backward(g):
        _accumulate(x, g * factor)

    _record(out, backward)
    return out


def _sigmoid(arr: np.ndarray) -> np.ndarray:
    # Evaluate on the non-overflowing branch for each sign.
    pos = arr >= 0
    z = np.exp(np.where(pos, -arr, arr))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor._from_op(s, _needs_grad(x), "sigmoid")

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    _record(out, backward)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor._from_op(t, _needs_grad(x), "tanh")

    def backward(g):
        _accumulate(x, g * (1.0 - t * t))

    _record(out, backward)
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor._from_op(np.logaddexp(0.0, x.data).astype(x.data.dtype), _needs_grad(x), "softplus")
    x_data = x.data

    def backward(g):
        _accumulate(x, g * _sigmoid(x_data))

    _record(out, backward)
    return out


def abs_(x: Tensor) -> Tensor:
    out = Tensor._from_op(np.abs(x.data), _needs_grad(x), "abs")
    sign = np.sign(x.data)

    def backward(g):
        _accumulate(x, g * sign)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Reductions and shape ops.


def sum_(x: Tensor) -> Tensor:
    out = Tensor._from_op(x.data.sum(), _needs_grad(x), "sum")
    shape = x.data.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g, shape))

    _record(out, backward)
    return out


def mean_(x: Tensor) -> Tensor:
    out = Tensor._from_op(x.data.mean(), _needs_grad(x), "mean")
    shape, n = x.data.shape, x.data.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, shape))

    _record(out, backward)
    return out


def concat(tensors: list, axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), _needs_grad(*tensors), "concat"
    )
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            _accumulate(t, g[tuple(index)])
            start += size

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Convolution.  im2col views feed one GEMM per call; col2im is its
# scatter-add inverse and serves as the shared adjoint.


def _conv_out_size(size: int, k: int, stride: int, dilation: int) -> int:
    return (size - dilation * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, L) patch matrix.  Input is pre-padded."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, dilation)
    wo = _conv_out_size(w, kw, stride, dilation)
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(
    cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, dilation: int
) -> np.ndarray:
    """Scatter-add a patch matrix back onto a (pre-padded) image grid."""
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, dilation)
    wo = _conv_out_size(w, kw, stride, dilation)
    x = np.zeros(x_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            x[:, :, hs : hs + stride * ho : stride, ws : ws + stride * wo : stride] += cols[
                :, :, i, j
            ]
    return x


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ho = _conv_out_size(h + 2 * padding, kh, stride, dilation)
    wo = _conv_out_size(w + 2 * padding, kw, stride, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} (padding {padding})")

    x_padded = _pad_spatial(x.data, padding)
    cols = np.ascontiguousarray(_im2col(x_padded, kh, kw, stride, dilation))
    w_mat = weight.data.reshape(cout, -1)
    out_data = np.matmul(w_mat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._from_op(out_data, _needs_grad(*inputs), "conv2d")
    padded_shape = x_padded.shape

    def backward(g):
        g_mat = g.reshape(n, cout, ho * wo)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            g_cols = np.matmul(w_mat.T, g_mat)
            gx = _col2im(g_cols, padded_shape, kh, kw, stride, dilation)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gx)

    _record(out, backward)
    return out


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of ``conv2d``'s forward map.

    Weight layout is (Cin, Cout, kh, kw); output spatial size is
    (H - 1) * stride - 2 * padding + kh.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, cin, h, w = x.shape
    cin_w, cout, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input has {cin}, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({cout},)")
    h_full = (h - 1) * stride + kh
    w_full = (w - 1) * stride + kw
    ho, wo = h_full - 2 * padding, w_full - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output {ho}x{wo} is empty")

    w_mat = weight.data.reshape(cin, cout * kh * kw)
    x_mat = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w_mat.T, x_mat)
    full = _col2im(cols, (n, cout, h_full, w_full), kh, kw, stride, 1)
    out_data = full[:, :, padding : h_full - padding, padding : w_full - padding]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    else:
        out_data = np.ascontiguousarray(out_data)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._from_op(out_data, _needs_grad(*inputs), "conv_transpose2d")
    x_data = x.data

    def backward(g):
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        g_padded = _pad_spatial(g, padding)
        g_cols = np.ascontiguousarray(_im2col(g_padded, kh, kw, stride, 1))
        if weight.requires_grad:
            x_mat = x_data.reshape(n, cin, h * w)
            gw = np.matmul(x_mat, g_cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gx = np.matmul(w_mat, g_cols).reshape(n, cin, h, w)
            _accumulate(x, gx)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Channel-axis pooling (the spatial descriptor used by learnable region
# detection).


def channel_max_pool(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels: (N, C, H, W) -> (N, 1, H, W).

    The backward pass routes the gradient to the argmax channel, lowest
    index on ties.
    """
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"channel_max_pool expects NCHW input with C >= 1, got {x.shape}")
    idx = np.argmax(x.data, axis=1, keepdims=True)
    out = Tensor._from_op(np.take_along_axis(x.data, idx, axis=1), _needs_grad(x), "channel_max_pool")
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        _accumulate(x, gx)

    _record(out, backward)
    return out


def channel_avg_pool(x: Tensor) -> Tensor:
    """Per-pixel mean over channels: (N, C, H, W) -> (N, 1, H, W)."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"channel_avg_pool expects NCHW input with C >= 1, got {x.shape}")
    c = x.shape[1]
    out = Tensor._from_op(x.data.mean(axis=1, keepdims=True), _needs_grad(x), "channel_avg_pool")

    def backward(g):
        _accumulate(x, np.broadcast_to(g / c, x.data.shape))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Region-masked moments.


def as_mask_array(mask, n: int, h: int, w: int, dtype) -> np.ndarray:
    """Normalize a mask argument to a float (N, 1, H, W) array of 0/1."""
    bits = getattr(mask, "bits", mask)
    arr = np.asarray(bits)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr[None, None], (n, 1, arr.shape[0], arr.shape[1]))
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != (n, 1, h, w):
        raise ShapeError(f"mask shape {np.asarray(bits).shape} does not match feature ({n}, {h}, {w})")
    arr = arr.astype(dtype)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ShapeError("mask must be binary (0/1)")
    return arr


def masked_moments(x: Tensor, mask, selector: str = "inside") -> tuple[Tensor, Tensor]:
    """Population mean and variance over the selected mask region.

    ``selector`` picks the mask-1 pixels ("inside") or mask-0 pixels
    ("outside").  Returns per-instance, per-channel (N, C) tensors,
    differentiable with respect to ``x``.  Raises
    :class:`EmptyRegionError` when the selected region has no pixels.
    """
    if selector not in ("inside", "outside"):
        raise ValueError(f"unknown selector {selector!r}")
    if x.ndim != 4:
        raise ShapeError(f"masked_moments expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    m = as_mask_array(mask, n, h, w, x.data.dtype)
    if selector == "outside":
        m = 1.0 - m
    count = m.sum(axis=(2, 3))  # (N, 1)
    if np.any(count == 0):
        raise EmptyRegionError(f"selected region ({selector}) is empty")

    mean_data = (x.data * m).sum(axis=(2, 3)) / count
    centered = x.data - mean_data[:, :, None, None]
    var_data = (centered * centered * m).sum(axis=(2, 3)) / count

    needs = _needs_grad(x)
    mean_t = Tensor._from_op(mean_data, needs, "masked_moments.mean")
    var_t = Tensor._from_op(var_data, needs, "masked_moments.var")

    def backward_mean(g):
        _accumulate(x, (g / count)[:, :, None, None] * m)

    def backward_var(g):
        # d var / d x_i = 2 m_i (x_i - mean) / count; the mean's own
        # dependence cancels because the masked deviations sum to zero.
        _accumulate(x, (2.0 * g / count)[:, :, None, None] * centered * m)

    _record(mean_t, backward_mean)
    _record(var_t, backward_var)
    return mean_t, var_t
