"""Dense tensors with reverse-mode automatic differentiation.

Everything in the training stack runs on plain numpy arrays wrapped in
:class:`Tensor`. Operations executed while a :class:`Tape` is active append a
record with enough saved state to run the backward pass; ``Tape.backward``
replays those records in exact reverse execution order and accumulates
gradients into every tensor that requires them.

Forward math defaults to float32. All ops also accept float64 inputs so
gradient checks can re-run the same code at higher precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

__all__ = [
    "AutodiffError",
    "NumericalError",
    "Tensor",
    "TensorShape",
    "Tape",
    "recording",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "pow_scalar",
    "sqrt",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "reshape",
    "concat_channels",
    "slice_channels",
    "linear",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "softmax_rows",
    "l2_normalize_rows",
    "gather_rows",
    "take_per_row",
]

# Toggled off only by benchmarks; every op validates finiteness when on.
FINITE_CHECKS = True

_FLOAT_DTYPES = (np.float32, np.float64)

Scalar = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Scalar, Sequence]


class AutodiffError(Exception):
    """Invalid graph or tape usage."""


class NumericalError(AutodiffError):
    """An operation produced NaN or Inf."""


class TensorShape(NamedTuple):
    """Batch/channel/height/width shape of a 4-D image tensor."""

    n: int
    c: int
    h: int
    w: int

    @property
    def element_count(self) -> int:
        return self.n * self.c * self.h * self.w

    @classmethod
    def of(cls, t: "Tensor") -> "TensorShape":
        if t.data.ndim != 4:
            raise AutodiffError(f"expected a 4-D image tensor, got shape {t.shape}")
        return cls(*t.data.shape)


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self,
        data: TensorLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other: TensorLike) -> "Tensor":
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other: TensorLike) -> "Tensor":
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other: TensorLike) -> "Tensor":
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other: TensorLike) -> "Tensor":
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other: TensorLike) -> "Tensor":
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _as_tensor(x: TensorLike, dtype: np.dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node(NamedTuple):
    out: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the tape in reverse.

        Raises if the loss is not a scalar, is not connected to this tape,
        or if the tape has already been consumed (explicit-reset contract:
        build a fresh graph per step).
        """
        if self._consumed:
            raise AutodiffError("tape already consumed; record a new graph before calling backward again")
        if loss.data.size != 1:
            raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not any(node.out is loss for node in self._nodes):
            raise AutodiffError("loss is not an output of any operation on this tape (detached graph)")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            node.backward(out_grad)
            # Intermediate grads are not needed once propagated.
            node.out.grad = None


_ACTIVE_TAPE: Optional[Tape] = None


@contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Activate a tape so that ops executed in the block are recorded."""
    global _ACTIVE_TAPE
    if tape is None:
        tape = Tape()
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording inside the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op_name} produced non-finite values")


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None], op_name: str) -> Tensor:
    _check_finite(data, op_name)
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradients over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _emit(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _emit(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b_data, a.shape))
        _accumulate(b, _unbroadcast(g * a_data, b.shape))

    return _emit(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g / b_data, a.shape))
        _accumulate(b, _unbroadcast(-g * a_data / (b_data * b_data), b.shape))

    return _emit(data, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, -g)

    return _emit(-x.data, (x,), backward, "neg")


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no gradient w.r.t. the scalar)."""
    s = float(s)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s)

    return _emit(x.data * s, (x,), backward, "scale")


def pow_scalar(x: Tensor, p: float) -> Tensor:
    p = float(p)
    data = x.data**p
    x_data = x.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * p * x_data ** (p - 1.0))

    return _emit(data, (x,), backward, "pow_scalar")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * 0.5 / data)

    return _emit(data, (x,), backward, "sqrt")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * data)

    return _emit(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    x_data = x.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g / x_data)

    return _emit(data, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _emit(data, (x,), backward, "relu")


# ---------------------------------------------------------------------------
# Reductions and shape ops


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _spread(g, in_shape, axis, keepdims))

    return _emit(np.asarray(data), (x,), backward, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = _axis_count(x.shape, axis)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _spread(g, in_shape, axis, keepdims) / count)

    return _emit(np.asarray(data), (x,), backward, "reduce_mean")


def _axis_count(shape: tuple, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    count = 1
    for a in axis:
        count *= shape[a]
    return count


def _spread(g: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        if isinstance(axis, int):
            axis = (axis,)
        axis = tuple(a % len(in_shape) for a in axis)
        expanded = list(g.shape)
        for a in sorted(axis):
            expanded.insert(a, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, in_shape)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    in_shape = x.shape
    data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(in_shape))

    return _emit(data, (x,), backward, "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 4-D tensors along the channel axis, `a` first."""
    if a.ndim != 4 or b.ndim != 4:
        raise AutodiffError("concat_channels expects 4-D tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise AutodiffError(f"concat_channels requires matching n/h/w, got {a.shape} and {b.shape}")
    data = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _emit(data, (a, b), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4:
        raise AutodiffError("slice_channels expects a 4-D tensor")
    if not (0 <= start < stop <= x.shape[1]):
        raise AutodiffError(f"channel slice [{start}, {stop}) out of range for {x.shape[1]} channels")
    data = x.data[:, start:stop].copy()
    in_shape = x.shape

    def backward(g: np.ndarray) -> None:
        buf = np.zeros(in_shape, dtype=g.dtype)
        buf[:, start:stop] = g
        _accumulate(x, buf)

    return _emit(data, (x,), backward, "slice_channels")


# ---------------------------------------------------------------------------
# Layer ops


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map per sample: x (n, d_in) @ weight (d_out, d_in).T + bias."""
    if x.ndim != 2:
        raise AutodiffError(f"linear expects a 2-D input, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise AutodiffError(f"weight shape {weight.shape} does not match input width {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise AutodiffError(f"bias shape {bias.shape} does not match output width {weight.shape[0]}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    x_data, w_data = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ w_data)
        _accumulate(weight, g.T @ x_data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _emit(data, inputs, backward, "linear")


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise AutodiffError(
            f"conv2d geometry invalid: size={size}, kernel={k}, stride={stride}, padding={padding}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    h_out = _conv_out_dim(h, k, stride, padding)
    w_out = _conv_out_dim(w, k, stride, padding)
    if h_out <= 0 or w_out <= 0:
        raise AutodiffError(f"conv2d output dims must be positive, got {h_out}x{w_out}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = x[:, :, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride]
    return cols.reshape(n, c * k * k, h_out * w_out), h_out, w_out


def _col2im(gcols: np.ndarray, in_shape: tuple, k: int, stride: int, padding: int, h_out: int, w_out: int) -> np.ndarray:
    n, c, h, w = in_shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gcols = gcols.reshape(n, c, k, k, h_out, w_out)
    for ky in range(k):
        for kx in range(k):
            buf[:, :, ky : ky + stride * h_out : stride, kx : kx + stride * w_out : stride] += gcols[:, :, ky, kx]
    if padding:
        buf = buf[:, :, padding : padding + h, padding : padding + w]
    return buf


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.

    x: (n, c_in, h, w); weight: (c_out, c_in, k, k); output spatial dims are
    (h + 2*padding - k) / stride + 1 and the division must be exact.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise AutodiffError("conv2d expects 4-D input and weight")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise AutodiffError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise AutodiffError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise AutodiffError(f"invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (c_out,):
        raise AutodiffError(f"bias shape {bias.shape} does not match {c_out} output channels")

    n = x.shape[0]
    cols, h_out, w_out = _im2col(x.data, kh, stride, padding)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2[None], cols)  # (n, c_out, L)
    if bias is not None:
        out = out + bias.data[None, :, None]
    data = out.reshape(n, c_out, h_out, w_out)

    in_shape = x.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, c_out, h_out * w_out)
        _accumulate(weight, np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g2)
            _accumulate(x, _col2im(gcols, in_shape, kh, stride, padding, h_out, w_out))

    return _emit(data, inputs, backward, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping mean pooling; spatial dims must divide exactly."""
    if x.ndim != 4:
        raise AutodiffError("avg_pool2d expects a 4-D tensor")
    n, c, h, w = x.shape
    if stride != k:
        raise AutodiffError("avg_pool2d supports stride == kernel only")
    if h % k != 0 or w % k != 0:
        raise AutodiffError(f"avg_pool2d requires spatial dims divisible by {k}, got {h}x{w}")
    h_out, w_out = h // k, w // k
    data = x.data.reshape(n, c, h_out, k, w_out, k).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        spread = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, h_out, k, w_out, k))
        _accumulate(x, spread.reshape(n, c, h, w))

    return _emit(data, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane; (n, c, h, w) -> (n, c, 1, 1)."""
    if x.ndim != 4:
        raise AutodiffError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.shape
    if h * w < 1:
        raise AutodiffError("global_avg_pool requires a non-empty spatial plane")
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return _emit(data, (x,), backward, "global_avg_pool")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a 2-D tensor."""
    if x.ndim != 2:
        raise AutodiffError("softmax_rows expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * data).sum(axis=1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _emit(data, (x,), backward, "softmax_rows")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm (epsilon-guarded)."""
    if x.ndim != 2:
        raise AutodiffError("l2_normalize_rows expects a 2-D tensor")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    data = x.data / norms

    def backward(g: np.ndarray) -> None:
        dot = (g * data).sum(axis=1, keepdims=True)
        _accumulate(x, (g - data * dot) / norms)

    return _emit(data, (x,), backward, "l2_normalize_rows")


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by index (rows may repeat)."""
    if x.ndim != 2:
        raise AutodiffError("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise AutodiffError("gather_rows indices out of range")
    data = x.data[idx]
    in_shape = x.shape

    def backward(g: np.ndarray) -> None:
        buf = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        _accumulate(x, buf)

    return _emit(data, (x,), backward, "gather_rows")


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = x[i, cols[i]]."""
    if x.ndim != 2:
        raise AutodiffError("take_per_row expects a 2-D tensor")
    cols = np.asarray(cols, dtype=np.int64)
    n, k = x.shape
    if cols.shape != (n,) or (cols.size and (cols.min() < 0 or cols.max() >= k)):
        raise AutodiffError("take_per_row column indices out of range")
    rows = np.arange(n)
    data = x.data[rows, cols]

    def backward(g: np.ndarray) -> None:
        buf = np.zeros((n, k), dtype=g.dtype)
        buf[rows, cols] = g
        _accumulate(x, buf)

    return _emit(data, (x,), backward, "take_per_row")
