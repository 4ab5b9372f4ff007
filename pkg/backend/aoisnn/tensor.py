"""
Dense tensors with reverse-mode differentiation over a recorded tape.

Operations executed while a ``Tape`` is active (``with Tape() as tape:``)
and touching a parameter or an already-recorded tensor are appended to the
tape. ``backward(tape, root)`` sweeps the tape in reverse and accumulates
gradients into every parameter reached. Outside a tape the same operations
run as plain numpy arithmetic, which is what inference uses.
"""

import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, DimensionError, NumericError, RangeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


class Tensor:
    """Dense n-dimensional float64 array, optionally a trainable parameter."""

    __array_priority__ = 100  # keep numpy from hijacking reflected operators

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        """
        Args:
            data: Values; copied into a float64 array
            requires_grad: True for parameters that receive gradients
            name: Optional label used in error messages and checkpoints
        """
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Tuple["Tape", int]] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array if array.dtype == DTYPE else array.astype(DTYPE)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{label}{grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Node:
    __slots__ = ("parents", "vjp", "leaf")

    def __init__(self, parents: Tuple[int, ...], vjp: Optional[Vjp], leaf: Optional[Tensor] = None):
        self.parents = parents
        self.vjp = vjp
        self.leaf = leaf


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in execution order, so every node's parents precede it.
    Parameters enter the tape as leaf nodes the first time an operation
    reads them.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._leaves: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _index(self, tensor: Tensor) -> int:
        if tensor._node is not None and tensor._node[0] is self:
            return tensor._node[1]
        if tensor.requires_grad:
            index = self._leaves.get(id(tensor))
            if index is None:
                index = len(self.nodes)
                self.nodes.append(_Node((), None, leaf=tensor))
                self._leaves[id(tensor)] = index
            return index
        return -1

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or (tensor._node is not None and tensor._node[0] is self)

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp: Vjp) -> Tensor:
        indices = tuple(self._index(p) for p in parents)
        out._node = (self, len(self.nodes))
        self.nodes.append(_Node(indices, vjp))
        return out

    def parameters(self) -> List[Tensor]:
        """Parameters read by any recorded operation, in first-use order."""
        return [node.leaf for node in self.nodes if node.leaf is not None]


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPE))


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{op} produced non-finite values")


def _emit(value: np.ndarray, parents: Sequence[Tensor], vjp: Vjp, op: str, finite: bool = False) -> Tensor:
    if finite:
        _check_finite(value, op)
    out = Tensor._wrap(np.asarray(value))
    tape = current_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    av, bv = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        value = av / bv

    def vjp(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

    return _emit(value, (a, b), vjp, "div", finite=True)


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative values")
    value = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(value > 0, g / (2.0 * value), 0.0),)

    return _emit(value, (x,), vjp, "sqrt")


def stop_gradient(x: ArrayLike) -> Tensor:
    """Copy of ``x`` that the tape treats as a constant."""
    return Tensor._wrap(as_tensor(x).data.copy())


# -- shape ---------------------------------------------------------------------

def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from None
    return _emit(value, (x,), lambda g: (g.reshape(original),), "reshape")


def take(x: ArrayLike, index) -> Tensor:
    """numpy-style indexing; repeated indices accumulate their gradients."""
    x = as_tensor(x)
    try:
        value = x.data[index]
    except IndexError as exc:
        raise RangeError(f"index {index!r} out of range for shape {x.shape}: {exc}") from None
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(value, dtype=DTYPE), (x,), vjp, "take")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    value = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(count))

    return _emit(value, tensors, vjp, "stack")


# -- reductions ----------------------------------------------------------------

def sum(x: ArrayLike, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(x.data, axis=axis), (x,), vjp, "sum")


def mean(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis), 1.0 / count)


def min(x: ArrayLike) -> Tensor:  # noqa: A001
    """Smallest entry; the gradient goes to the first position holding it."""
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("min of an empty tensor")
    flat = int(np.argmin(x.data))
    return take(reshape(x, (-1,)), flat)


def max(x: ArrayLike) -> Tensor:  # noqa: A001
    """Largest entry; the gradient goes to the first position holding it."""
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("max of an empty tensor")
    flat = int(np.argmax(x.data))
    return take(reshape(x, (-1,)), flat)


# -- linear algebra --------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of ``a[m×k]`` and ``b[k×n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul", finite=True)


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(x: ArrayLike, kernels: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of ``x`` with ``kernels``.

    Args:
        x: Input of shape (c_in, h, w) or batched (n, c_in, h, w)
        kernels: Filters of shape (c_out, c_in, k, k)
        stride: Positive step between windows
        padding: Zero padding added on every spatial border

    Returns:
        Feature map of shape (c_out, h', w') or (n, c_out, h', w')
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    xv = x.data[None] if unbatched else x.data
    wv = kernels.data
    if xv.ndim != 4 or wv.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} and padding {padding} are invalid")
    n, c_in, h, w = xv.shape
    c_out, c_k, kh, kw = wv.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d: input {x.shape} has {c_in} channels, kernels {kernels.shape} expect {c_k}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernels {kernels.shape} larger than padded input {x.shape} (padding {padding})")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    value = np.tensordot(windows, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if unbatched:
        value = value[0]

    def vjp(g):
        g = g[None] if unbatched else g
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, wv, axes=([1], [0]))  # n, ho, wo, c_in, kh, kw
        grad_xp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
        return (grad_x[0] if unbatched else grad_x), grad_w

    return _emit(np.ascontiguousarray(value), (x, kernels), vjp, "conv2d", finite=True)


def avg_pool2d(x: ArrayLike, size: int) -> Tensor:
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"avg_pool2d: expected (c, h, w) or (n, c, h, w), got {x.shape}")
    h, w = x.shape[-2:]
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"avg_pool2d: window {size} larger than input {x.shape}")
    lead = x.shape[:-2]
    cropped = x.data[..., :ho * size, :wo * size]
    value = cropped.reshape(*lead, ho, size, wo, size).mean(axis=(-3, -1))
    shape = x.shape

    def vjp(g):
        spread = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        full = np.zeros(shape, dtype=DTYPE)
        full[..., :ho * size, :wo * size] = spread
        return (full,)

    return _emit(value, (x,), vjp, "avg_pool2d")


# -- classification ----------------------------------------------------------------

def _stable_softmax(values: np.ndarray, axis: int) -> np.ndarray:
    shifted = values - np.max(values, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.size == 0:
        raise ContractError("softmax of an empty tensor")
    if np.any(np.isnan(logits.data)):
        raise NumericError("softmax: NaN logits")
    probs = _stable_softmax(logits.data, axis)

    def vjp(g):
        return (probs * (g - np.sum(g * probs, axis=axis, keepdims=True)),)

    return _emit(probs, (logits,), vjp, "softmax", finite=True)


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if np.any(np.isnan(logits.data)):
        raise NumericError("log_softmax: NaN logits")
    shifted = logits.data - np.max(logits.data, axis=axis, keepdims=True)
    value = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(value)

    def vjp(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _emit(value, (logits,), vjp, "log_softmax", finite=True)


def cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """
    Negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Args:
        logits: Shape (n,) for one sample or (batch, n)
        labels: Class index, or one index per batch row

    Returns:
        Scalar loss, averaged over the batch rows
    """
    logits = as_tensor(logits)
    labels_arr = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[-1]
    if np.any(labels_arr < 0) or np.any(labels_arr >= classes):
        raise RangeError(f"cross_entropy: label {labels} outside [0, {classes})")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if labels_arr.ndim != 0:
            raise DimensionError(f"cross_entropy: one label expected for logits {logits.shape}")
        picked = take(logp, int(labels_arr))
        return mul(picked, -1.0)
    if labels_arr.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: labels {labels_arr.shape} do not match logits {logits.shape}")
    picked = take(logp, (np.arange(logits.shape[0]), labels_arr))
    return mul(mean(picked), -1.0)


def l2_norm(x: ArrayLike, epsilon: float = 0.0, axis=None) -> Tensor:
    """
    ``sqrt(sum(x**2) + epsilon**2)``.

    With ``axis`` set, the reduction runs over those axes only, giving one
    norm per remaining index (one per sample for batched activations).
    """
    if epsilon < 0:
        raise ContractError(f"l2_norm: epsilon must be non-negative, got {epsilon}")
    x = as_tensor(x)
    xv = x.data
    value = np.sqrt(np.sum(xv * xv, axis=axis) + epsilon * epsilon)

    def vjp(g):
        norm, grad = value, g
        if axis is not None:
            norm, grad = np.expand_dims(value, axis), np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(norm > 0, grad * xv / norm, 0.0),)

    return _emit(value, (x,), vjp, "l2_norm", finite=True)


# -- spiking nonlinearities -----------------------------------------------------------

def spike(v: ArrayLike, v_thr: float, width: float) -> Tensor:
    """Heaviside step ``v >= v_thr`` with a boxcar surrogate derivative of height ``1/width``."""
    v = as_tensor(v)
    if width <= 0:
        raise ContractError(f"spike: surrogate width must be positive, got {width}")
    value = (v.data >= v_thr).astype(DTYPE)
    window = (np.abs(v.data - v_thr) <= width / 2.0) / width
    return _emit(value, (v,), lambda g: (g * window,), "spike")


def clamp_linear(v: ArrayLike, v_thr: float, width: float) -> Tensor:
    """``clip((v - v_thr)/width + 0.5, 0, 1)``, whose derivative equals the spike surrogate."""
    v = as_tensor(v)
    if width <= 0:
        raise ContractError(f"clamp_linear: width must be positive, got {width}")
    window = (np.abs(v.data - v_thr) <= width / 2.0) / width
    value = np.clip((v.data - v_thr) / width + 0.5, 0.0, 1.0)
    return _emit(value, (v,), lambda g: (g * window,), "clamp_linear")


# -- differentiation ------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Accumulate d(root)/d(parameter) into ``parameter.grad``.

    Repeated calls add to existing gradients; call ``zero_grad`` between
    independent steps.

    Returns:
        Mapping from every parameter reached to its accumulated gradient
    """
    if root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._node is None or root._node[0] is not tape:
        raise ContractError("backward: root was not recorded on this tape")
    start = root._node[1]
    adjoints: List[Optional[np.ndarray]] = [None] * (start + 1)
    adjoints[start] = np.ones(root.shape, dtype=DTYPE)
    grads: Dict[Tensor, np.ndarray] = {}
    for index in range(start, -1, -1):
        g = adjoints[index]
        if g is None:
            continue
        adjoints[index] = None
        node = tape.nodes[index]
        if node.leaf is not None:
            param = node.leaf
            g = np.asarray(g, dtype=DTYPE).reshape(param.shape)
            param.grad = g.copy() if param.grad is None else param.grad + g
            grads[param] = param.grad
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent < 0 or pg is None:
                continue
            adjoints[parent] = pg if adjoints[parent] is None else adjoints[parent] + pg
    return grads


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros(p.shape, dtype=DTYPE)
