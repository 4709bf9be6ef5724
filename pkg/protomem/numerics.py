"""
MIT License

Copyright (c) 2024-present protomem contributors

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.

This module contains the dense tensor type used throughout protomem, along with a
define-by-run tape that provides reverse-mode differentiation for every operation
the captioner needs.
"""
import math
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .common import Enum
from .errors import ContractError, DimensionError, NonFiniteError, VocabularyError

DTYPE = np.float64
MASK_BIAS = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
_grad_state = threading.local()


class OpKind(Enum):
    LEAF = 'leaf'
    MATMUL = 'matmul'
    ADD = 'add'
    SUB = 'sub'
    MUL = 'mul'
    SCALE = 'scale'
    TRANSPOSE = 'transpose'
    GELU = 'gelu'
    SOFTMAX = 'softmax_rows'
    LOG_SOFTMAX = 'log_softmax_rows'
    LAYER_NORM = 'layer_norm'
    CROSS_ENTROPY = 'cross_entropy'
    TAKE_ROWS = 'take_rows'
    CONCAT_ROWS = 'concat_rows'
    CONCAT_COLS = 'concat_cols'
    SLICE_COLS = 'slice_cols'
    SUM = 'sum'


class TapeNode:
    """
    A single recorded operation on the tape.

    Attributes
    ----------
    op: :class:`OpKind`
        The operation that produced :attr:`value`.
    inputs: Tuple[Optional[:class:`TapeNode`], ...]
        The predecessor nodes, positionally matching the operation's tensor inputs.
        ``None`` marks an input that was a constant.
    value: :class:`numpy.ndarray`
        The forward value.
    adjoint: :class:`numpy.ndarray`
        The accumulated gradient of the backward root with respect to :attr:`value`.
        Zero until :func:`backward` has visited this node.
    """
    __slots__ = ('op', 'inputs', 'value', 'adjoint', '_vjp')

    def __init__(self, op: OpKind, inputs: Tuple[Optional['TapeNode'], ...], value: np.ndarray, vjp: Optional[VJP]):
        self.op: OpKind = op
        self.inputs: Tuple[Optional['TapeNode'], ...] = inputs
        self.value: np.ndarray = value
        self.adjoint: np.ndarray = np.zeros_like(value)
        self._vjp: Optional[VJP] = vjp

    def __repr__(self):
        return f'<TapeNode op={self.op} shape={self.value.shape}>'


class Tensor:
    """
    A dense, row-major array of 64-bit floats.

    Tensors created with ``requires_grad=True`` are tape leaves (parameters). Any operation
    with at least one taped input records a :class:`TapeNode`, unless executed inside :func:`no_grad`.

    Parameters
    ----------
    data: Any
        Anything :func:`numpy.array` accepts. The data is always copied.
    requires_grad: :class:`bool`
        Whether this tensor is a differentiable leaf.

    Raises
    ------
    :class:`NonFiniteError`
        If the data contains NaN or infinite values.
    """
    __slots__ = ('data', 'node')

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite('tensor', arr)
        self.data: np.ndarray = arr
        self.node: Optional[TapeNode] = TapeNode(OpKind.LEAF, (), arr, None) if requires_grad else None

    @classmethod
    def _wrap(cls, data: np.ndarray, node: Optional[TapeNode]) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.node = node
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def grad(self) -> Optional[np.ndarray]:
        """ The adjoint recorded by the most recent :func:`backward` that reached this tensor. """
        return None if self.node is None else self.node.adjoint

    @property
    def T(self) -> 'Tensor':  # pylint: disable=invalid-name
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f'item() requires a single element, got shape {self.shape}')
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """ Returns a copy of the underlying array. """
        return self.data.copy()

    def detach(self) -> 'Tensor':
        """ Returns a constant copy that shares no tape history. """
        return Tensor._wrap(self.data.copy(), None)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f'<Tensor shape={self.shape} requires_grad={self.requires_grad}>'


TensorLike = Union[Tensor, np.ndarray, Sequence, float]


def as_tensor(value: TensorLike) -> Tensor:
    """ Wraps ``value`` as a constant :class:`Tensor`, unless it already is one. """
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disables tape recording for the current thread.

    Example:

        .. code:: python

            with no_grad():
                logits = model.decode_teacher_forced(tokens, enc_out).logits
    """
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _check_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f'{op} produced non-finite values')


def _record(op: OpKind, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    _check_finite(op.value, out)

    if grad_enabled() and any(t.node is not None for t in inputs):
        node = TapeNode(op, tuple(t.node for t in inputs), out, vjp)
        return Tensor._wrap(out, node)

    return Tensor._wrap(out, None)


def _require_2d(op: str, *tensors: Tensor):
    for tensor in tensors:
        if tensor.ndim != 2:
            raise DimensionError(f'{op}: expected a 2-D tensor, got shape {tensor.shape}')


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Standard matrix product of a ``p×q`` and a ``q×r`` tensor.

    Raises
    ------
    :class:`DimensionError`
        If the inner dimensions disagree.
    """
    a, b = as_tensor(a), as_tensor(b)
    _require_2d('matmul', a, b)

    if a.shape[1] != b.shape[0]:
        raise DimensionError.mismatch('matmul', a.shape, b.shape)

    a_data, b_data = a.data, b.data
    return _record(OpKind.MATMUL, a_data @ b_data, (a, b),
                   lambda g: (g @ b_data.T, a_data.T @ g))


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Elementwise sum. ``b`` may also be a row vector matching the last dimension of ``a``,
    in which case it is added to every row.
    """
    a, b = as_tensor(a), as_tensor(b)

    if a.shape == b.shape:
        return _record(OpKind.ADD, a.data + b.data, (a, b), lambda g: (g, g))

    if _bias_compatible(a, b):
        return _record(OpKind.ADD, a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))

    raise DimensionError.mismatch('add', a.shape, b.shape)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    if a.shape == b.shape:
        return _record(OpKind.SUB, a.data - b.data, (a, b), lambda g: (g, -g))

    if _bias_compatible(a, b):
        return _record(OpKind.SUB, a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=0)))

    raise DimensionError.mismatch('sub', a.shape, b.shape)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """ Elementwise (Hadamard) product of two equally shaped tensors. """
    a, b = as_tensor(a), as_tensor(b)

    if a.shape != b.shape:
        raise DimensionError.mismatch('mul', a.shape, b.shape)

    a_data, b_data = a.data, b.data
    return _record(OpKind.MUL, a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _record(OpKind.SCALE, a.data * factor, (a,), lambda g: (g * factor,))


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _require_2d('transpose', a)
    return _record(OpKind.TRANSPOSE, a.data.T.copy(), (a,), lambda g: (g.T,))


def gelu(a: TensorLike) -> Tensor:
    """ GELU activation, tanh approximation. """
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _record(OpKind.GELU, out, (a,), vjp)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(logits: TensorLike) -> Tensor:
    """
    Row-wise softmax with per-row max subtraction.
    Every output row is nonnegative and sums to 1. A 1-D input is treated as a single row.
    """
    logits = as_tensor(logits)
    s = _softmax(logits.data)
    return _record(OpKind.SOFTMAX, s, (logits,),
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(logits: TensorLike) -> Tensor:
    logits = as_tensor(logits)
    out = _log_softmax(logits.data)
    s = np.exp(out)
    return _record(OpKind.LOG_SOFTMAX, out, (logits,),
                   lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """
    Normalizes each row of ``x`` to zero mean and unit variance, then applies ``gain`` and ``bias``.

    Parameters
    ----------
    x: :class:`Tensor`
        A ``p×d`` tensor.
    gain: :class:`Tensor`
        A length ``d`` tensor.
    bias: :class:`Tensor`
        A length ``d`` tensor.
    eps: :class:`float`
        Added to the variance. Must be positive.
    """
    if eps <= 0:
        raise ContractError(f'layer_norm eps must be positive, got {eps}')

    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _require_2d('layer_norm', x)

    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f'layer_norm: gain {gain.shape} and bias {bias.shape} must match row width of {x.shape}')

    centred = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + eps)
    x_hat = centred * inv_std
    gain_data = gain.data

    def vjp(g):
        d_hat = g * gain_data
        d_x = inv_std * (d_hat - d_hat.mean(axis=1, keepdims=True) - x_hat * (d_hat * x_hat).mean(axis=1, keepdims=True))
        return (d_x, (g * x_hat).sum(axis=0), g.sum(axis=0))

    return _record(OpKind.LAYER_NORM, x_hat * gain_data + bias.data, (x, gain, bias), vjp)


def cross_entropy(logits: TensorLike, targets: Sequence[int], ignore_index: int = -100) -> Tensor:
    """
    Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``,
    over the positions whose target is not ``ignore_index``.

    If every position is ignored, the loss is 0 and carries a zero gradient.

    Raises
    ------
    :class:`VocabularyError`
        If a target lies outside ``[0, V)`` and is not ``ignore_index``.
    """
    logits = as_tensor(logits)
    _require_2d('cross_entropy', logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows, vocab = logits.shape

    if targets.shape[0] != rows:
        raise DimensionError.mismatch('cross_entropy', logits.shape, targets.shape)

    keep = targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= vocab))

    if bad.any():
        raise VocabularyError(f'cross_entropy: target {int(targets[bad][0])} outside of vocabulary of size {vocab}')

    count = int(keep.sum())
    log_probs = _log_softmax(logits.data)
    picked = np.where(keep, targets, 0)
    nll = -log_probs[np.arange(rows), picked] * keep
    loss = np.array(nll.sum() / count if count else 0.0)

    def vjp(g):
        if not count:
            return (np.zeros_like(log_probs),)
        d_logits = np.exp(log_probs)
        d_logits[np.arange(rows), picked] -= 1.0
        return (d_logits * keep[:, None] * (g / count),)

    return _record(OpKind.CROSS_ENTROPY, loss, (logits,), vjp)


def take_rows(table: TensorLike, ids: Sequence[int]) -> Tensor:
    """
    Gathers rows of ``table`` (an embedding lookup).

    Raises
    ------
    :class:`VocabularyError`
        If an id is outside of ``[0, rows)``.
    """
    table = as_tensor(table)
    _require_2d('take_rows', table)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)

    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f'take_rows: id outside of [0, {table.shape[0]})')

    shape = table.shape

    def vjp(g):
        d_table = np.zeros(shape, dtype=DTYPE)
        np.add.at(d_table, ids, g)
        return (d_table,)

    return _record(OpKind.TAKE_ROWS, table.data[ids], (table,), vjp)


def concat_rows(tensors: Sequence[TensorLike]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _require_2d('concat_rows', *tensors)
    width = tensors[0].shape[1]

    for tensor in tensors[1:]:
        if tensor.shape[1] != width:
            raise DimensionError.mismatch('concat_rows', tensors[0].shape, tensor.shape)

    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _record(OpKind.CONCAT_ROWS, np.concatenate([t.data for t in tensors], axis=0), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=0)))


def concat_cols(tensors: Sequence[TensorLike]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _require_2d('concat_cols', *tensors)
    height = tensors[0].shape[0]

    for tensor in tensors[1:]:
        if tensor.shape[0] != height:
            raise DimensionError.mismatch('concat_cols', tensors[0].shape, tensor.shape)

    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _record(OpKind.CONCAT_COLS, np.concatenate([t.data for t in tensors], axis=1), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=1)))


def slice_cols(a: TensorLike, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    _require_2d('slice_cols', a)

    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f'slice_cols: [{start}:{stop}] out of range for shape {a.shape}')

    shape = a.shape

    def vjp(g):
        d_a = np.zeros(shape, dtype=DTYPE)
        d_a[:, start:stop] = g
        return (d_a,)

    return _record(OpKind.SLICE_COLS, a.data[:, start:stop].copy(), (a,), vjp)


def sum_all(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(OpKind.SUM, np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def _topological_order(root: TapeNode) -> List[TapeNode]:
    order: List[TapeNode] = []
    visited = set()
    stack: List[Tuple[TapeNode, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()

        if expanded:
            order.append(node)
            continue

        if node in visited:
            continue

        visited.add(node)
        stack.append((node, True))
        stack.extend((parent, False) for parent in node.inputs if parent is not None and parent not in visited)

    return order


def backward(root: Tensor) -> Dict[TapeNode, np.ndarray]:
    """
    Runs reverse-mode differentiation from a scalar ``root``.

    Every node reachable from ``root`` has its adjoint reset and then populated, visiting
    each node exactly once in reverse topological order.

    Parameters
    ----------
    root: :class:`Tensor`
        A single-element tensor produced on the tape.

    Raises
    ------
    :class:`ContractError`
        If ``root`` is not scalar, or was not recorded on a tape.

    Returns
    -------
    Dict[:class:`TapeNode`, :class:`numpy.ndarray`]
        The adjoints of every reached leaf (parameter) node.
    """
    if root.data.size != 1:
        raise ContractError(f'backward requires a scalar root, got shape {root.shape}')

    if root.node is None:
        raise ContractError('backward root was not recorded on a tape (no parameter contributed to it)')

    order = _topological_order(root.node)

    for node in order:
        node.adjoint = np.zeros_like(node.value)

    root.node.adjoint = np.ones_like(root.node.value)

    for node in reversed(order):
        if node._vjp is None:  # pylint: disable=protected-access
            continue

        grads = node._vjp(node.adjoint)  # pylint: disable=protected-access

        for parent, grad in zip(node.inputs, grads):
            if parent is not None and grad is not None:
                parent.adjoint += grad

    return {node: node.adjoint for node in order if node.op is OpKind.LEAF}


def grad_check(fn: Callable[[Tensor], Tensor], x: TensorLike, h: float = 1e-5) -> float:
    """
    Compares the tape gradient of ``fn`` at ``x`` with central finite differences.

    Parameters
    ----------
    fn: Callable[[:class:`Tensor`], :class:`Tensor`]
        A scalar-valued function.
    x: :class:`Tensor`
        The point to check at. Its data is copied.
    h: :class:`float`
        The finite-difference step. Must be positive.

    Returns
    -------
    :class:`float`
        The maximum over coordinates of ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError(f'grad_check step must be positive, got {h}')

    point = Tensor(as_tensor(x).data, requires_grad=True)
    grads = backward(fn(point))
    analytic = grads.get(point.node, np.zeros_like(point.data))
    base = point.data.copy()
    worst = 0.0

    with no_grad():
        for index in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[index] += h
            f_plus = fn(Tensor(shifted)).item()
            shifted[index] -= 2 * h
            f_minus = fn(Tensor(shifted)).item()
            numeric = (f_plus - f_minus) / (2 * h)
            exact = float(analytic[index])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))

    return worst
