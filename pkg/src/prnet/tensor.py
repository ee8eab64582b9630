"""Dense NCHW arrays with tape-based reverse-mode differentiation.

Every operation in this module takes and returns :class:`Tensor` objects.
When a :class:`Tape` is active and at least one input requires a gradient,
the operation appends a node holding its backward rule to the tape.
:func:`backward` then walks the tape in reverse insertion order.

Arithmetic follows the dtype of the inputs: float32 by default, float64 when
the caller builds float64 tensors (used by the finite-difference checks).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution window does not tile the padded input."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(RuntimeError):
    """A differentiation precondition was violated."""


_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """An n-d float array, usually (N, C, H, W).

    ``requires_grad`` marks learnable leaves; outputs of recorded operations
    carry it too. ``grad_id`` is the index of the producing node on the tape,
    or None for leaves and untracked values.
    """

    __slots__ = ("data", "requires_grad", "grad_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in _FLOAT_TYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another dtype, keeping the learnable flag."""
        return Tensor(self.data.astype(dtype), dtype=dtype, requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __rsub__(self, other):
        return scalar_add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        output.grad_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(tuple(inputs), output, backward_fn))


class Gradients:
    """Result of :func:`backward`: gradient arrays keyed by tensor identity."""

    def __init__(self, grads: dict[int, tuple[Tensor, np.ndarray]]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._grads.get(id(t))
        if hit is not None and hit[0] is t:
            return hit[1]
        if t.requires_grad:
            return np.zeros_like(t.data)
        raise KeyError(f"{t!r} is not a learnable tensor")

    def __contains__(self, t: Tensor) -> bool:
        hit = self._grads.get(id(t))
        return hit is not None and hit[0] is t

    def __len__(self) -> int:
        return len(self._grads)


def _tracking(*inputs: Tensor) -> "Tape | None":
    tape = _active_tape()
    if tape is None:
        return None
    return tape if any(t.requires_grad for t in inputs) else None


def _checked(out: np.ndarray, op: str) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return _wrap(out)


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr, dtype=arr.dtype)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns the gradient of every learnable leaf reached from ``loss``; leaves
    that did not participate read as zeros. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    gid = loss.grad_id
    if gid is None or gid >= len(tape.nodes) or tape.nodes[gid].output is not loss:
        raise ContractError("loss was not produced on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad_id is None:
                prev = leaves.get(id(t))
                leaves[id(t)] = (t, gi if prev is None else prev[1] + gi)
            else:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi
    tape.nodes.clear()
    return Gradients(leaves)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = _checked(a.data + b.data, "add")
    tape = _tracking(a, b)
    if tape is not None:
        tape.record((a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = _checked(a.data - b.data, "sub")
    tape = _tracking(a, b)
    if tape is not None:
        tape.record((a, b), out, lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _same_shape("mul", a, b)
    out = _checked(a.data * b.data, "mul")
    tape = _tracking(a, b)
    if tape is not None:
        tape.record((a, b), out, lambda g: (g * b.data, g * a.data))
    return out


def scalar_mul(a: Tensor, c: float) -> Tensor:
    out = _checked(a.data * a.dtype.type(c), "scalar_mul")
    tape = _tracking(a)
    if tape is not None:
        tape.record((a,), out, lambda g: (g * a.dtype.type(c),))
    return out


def scalar_add(a: Tensor, c: float) -> Tensor:
    out = _checked(a.data + a.dtype.type(c), "scalar_add")
    tape = _tracking(a)
    if tape is not None:
        tape.record((a,), out, lambda g: (g,))
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (N, C_i, H, W) tensors along C, in argument order."""
    if not tensors:
        raise DimensionError("concat_channels: empty input list")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref[0], *ref[2:]):
            raise DimensionError(f"concat_channels: {t.shape} does not align with {ref}")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=1))
    tape = _tracking(*tensors)
    if tape is not None:
        bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

        def bw(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

        tape.record(tuple(tensors), out, bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.data, 0))
    tape = _tracking(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (g * (x.data > 0),))
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    out = _wrap(y)
    tape = _tracking(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (g * y * (1 - y),))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _wrap(y)
    tape = _tracking(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (g * (1 - y * y),))
    return out


tanh_op = tanh


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = _checked(np.asarray(x.data.sum(dtype=x.dtype)), "sum_all")
    tape = _tracking(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (np.full_like(x.data, g),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _checked(np.asarray(x.data.mean(dtype=x.dtype)), "mean_all")
    tape = _tracking(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (np.full_like(x.data, g / n),))
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements (a 0-d tensor)."""
    _same_shape("l1_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = _checked(np.asarray(np.abs(diff).mean(dtype=diff.dtype)), "l1_loss")
    tape = _tracking(pred, target)
    if tape is not None:

        def bw(g):
            s = np.sign(diff) * (g / n)
            return s, -s

        tape.record((pred, target), out, bw)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"kernel {k} with stride {stride}, padding {padding} does not tile extent {size}")
    return span // stride + 1


def _im2col(xh: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output sites, columns are (kh, kw, C) window entries.

    ``xh`` is a padded NHWC array.
    """
    n, c = xh.shape[0], xh.shape[3]
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::s, ::s]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    xh = x.transpose(0, 2, 3, 1)
    if p:
        return np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.ascontiguousarray(xh)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation of (N, C_in, H, W) with (C_out, C_in, k, k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({co},)")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: stride {stride}, padding {padding}")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    # weight as a (k*k*C_in, C_out) matrix matching the im2col column order
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, co)
    cols = _im2col(_pad_nhwc(x.data, padding), k, stride, ho, wo)
    y = cols @ wmat
    if bias is not None:
        y += bias.data
    out = _checked(np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)), "conv2d")

    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape = _tracking(*inputs)
    if tape is not None:

        def bw(g):
            gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
            gw = None
            if weight.requires_grad:
                gw = (cols.T @ gn).reshape(k, k, c, co).transpose(3, 2, 0, 1)
            gx = None
            if x.requires_grad:
                gx = _conv_input_grad(g, gn, weight.data, x.shape, stride, padding)
            if bias is None:
                return gx, gw
            return gx, gw, gn.sum(axis=0)

        tape.record(inputs, out, bw)
    return out


def _conv_input_grad(g, gn, weight, xshape, stride, padding):
    n, c, h, w = xshape
    co, _, k, _ = weight.shape
    ho, wo = g.shape[2:]
    q = k - 1 - padding
    if stride == 1 and q >= 0:
        # full correlation of the output gradient with the flipped kernel
        cg = _im2col(_pad_nhwc(g, q), k, 1, h, w)
        wflip = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * co, c)
        return np.ascontiguousarray((cg @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))
    # general stride: scatter the column gradient back onto the padded input
    dcols = (gn @ weight.transpose(0, 2, 3, 1).reshape(co, k * k * c)).reshape(n, ho, wo, k, k, c)
    gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=g.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, i, j]
    gxp = gxp[:, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardization with a learned affine map.

    Variance is the biased plane variance.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"instance_norm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"instance_norm: scale/shift must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + d.dtype.type(eps))
    xhat = centered * inv
    out = _checked(xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None],
                   "instance_norm")
    tape = _tracking(x, scale, shift)
    if tape is not None:

        def bw(g):
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gshift = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gh = g * scale.data[None, :, None, None]
                gx = inv * (gh - gh.mean(axis=(2, 3), keepdims=True)
                            - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True))
            return gx, gscale, gshift

        tape.record((x, scale, shift), out, bw)
    return out


def stack_batch(arrays: Iterable[np.ndarray], dtype=np.float32) -> Tensor:
    """Concatenate (1, C, H, W) arrays along the batch axis."""
    return Tensor(np.concatenate(list(arrays), axis=0), dtype=dtype)
