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

Scaled dot-product and multi-head attention, optionally extended with memory slots.

Memory keys and values are always placed *before* the input keys and values, so the first
``m`` columns of every attention matrix belong to memory slots.
"""
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .numerics import (MASK_BIAS, Tensor, TensorLike, add, as_tensor, concat_cols,
                       concat_rows, matmul, scale, slice_cols, softmax_rows,
                       transpose)


@dataclass(frozen=True)
class AttentionConfig:
    """
    Shape of a multi-head attention block.

    Attributes
    ----------
    d_model: :class:`int`
        The model width. Must be divisible by ``heads``.
    heads: :class:`int`
        The number of attention heads.
    causal: :class:`bool`
        Whether queries may only attend to keys at or before their own position.
        Memory columns are never causally masked.
    memory_slots: :class:`int`
        The number of memory key/value pairs (``m``) each head attends to, in addition to its input.
    """
    d_model: int
    heads: int
    causal: bool = False
    memory_slots: int = 0

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0:
            raise ConfigError(f'd_model and heads must be positive (got {self.d_model}, {self.heads})')

        if self.d_model % self.heads != 0:
            raise ConfigError(f'd_model ({self.d_model}) must be divisible by heads ({self.heads})')

        if self.memory_slots < 0:
            raise ConfigError(f'memory_slots must be nonnegative, got {self.memory_slots}')

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


class SegmentEmbeddings:
    """
    A learnable pair of vectors added to keys, marking them as memory-origin or input-origin.
    Values are never touched.

    Attributes
    ----------
    mem_segment: :class:`Tensor`
        Added to every memory key. Length ``head_dim``.
    input_segment: :class:`Tensor`
        Added to every input key. Length ``head_dim``.
    """
    __slots__ = ('mem_segment', 'input_segment')

    def __init__(self, mem_segment: Tensor, input_segment: Tensor):
        if mem_segment.shape != input_segment.shape or mem_segment.ndim != 1:
            raise DimensionError.mismatch('segment embeddings', mem_segment.shape, input_segment.shape)

        self.mem_segment: Tensor = mem_segment
        self.input_segment: Tensor = input_segment

    @classmethod
    def zeros(cls, head_dim: int, requires_grad: bool = True) -> 'SegmentEmbeddings':
        return cls(Tensor(np.zeros(head_dim), requires_grad=requires_grad),
                   Tensor(np.zeros(head_dim), requires_grad=requires_grad))


class AttentionTrace:
    """
    The attention weights of one head (or a head average) for diagnostics.

    Attributes
    ----------
    weights: :class:`numpy.ndarray`
        A ``T_q × (m + T_k)`` matrix whose rows sum to 1. The first ``m`` columns are memory slots.
    memory_col_count: :class:`int`
        ``m``, the number of leading memory columns.
    mask: Optional[:class:`numpy.ndarray`]
        The boolean mask (``True`` = blocked) that was applied, if any.
    """
    __slots__ = ('weights', 'memory_col_count', 'mask')

    def __init__(self, weights: np.ndarray, memory_col_count: int, mask: Optional[np.ndarray] = None):
        self.weights: np.ndarray = weights
        self.memory_col_count: int = memory_col_count
        self.mask: Optional[np.ndarray] = mask

    @property
    def memory_weights(self) -> np.ndarray:
        return self.weights[:, :self.memory_col_count]

    @property
    def input_weights(self) -> np.ndarray:
        return self.weights[:, self.memory_col_count:]

    @classmethod
    def mean_over_heads(cls, traces: Sequence['AttentionTrace']) -> 'AttentionTrace':
        """ Averages per-head traces of one layer. Rows of the average still sum to 1. """
        if not traces:
            raise ContractError('Cannot average an empty list of traces')

        weights = np.mean([trace.weights for trace in traces], axis=0)
        return cls(weights, traces[0].memory_col_count, traces[0].mask)

    def __repr__(self):
        return f'<AttentionTrace shape={self.weights.shape} memory_cols={self.memory_col_count}>'


class AttentionResult(NamedTuple):
    output: Tensor
    traces: List[AttentionTrace]
    keys: List[np.ndarray]
    values: List[np.ndarray]


class MultiHeadParams:
    """ The projection weights of one multi-head attention block. """
    __slots__ = ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_o', 'b_o')
    NAMES = __slots__

    def __init__(self, **weights: Tensor):
        for name in self.NAMES:
            setattr(self, name, weights[name])

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator) -> 'MultiHeadParams':
        std = 1.0 / math.sqrt(d_model)
        weights = {}

        for name in cls.NAMES:
            shape = (d_model, d_model) if name.startswith('w_') else (d_model,)
            data = rng.normal(0.0, std, size=shape) if name.startswith('w_') else np.zeros(shape)
            weights[name] = Tensor(data, requires_grad=True)

        return cls(**weights)

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f'{prefix}.{name}', getattr(self, name)) for name in self.NAMES]


def attention_mask(batch: int, q_len: int, k_len: int, causal: bool = False,
                   key_padding: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """
    Builds the boolean mask (``True`` = blocked) for ``batch`` samples flattened into rows.

    Queries of sample ``b`` only see keys of sample ``b``. With ``causal``, query ``i`` additionally
    only sees keys ``j <= i + (k_len - q_len)``. ``key_padding`` is a ``batch × k_len`` boolean array
    marking padding keys, which are blocked for every query. Memory columns are not part of this
    mask; :func:`multi_head_attention` prepends them unblocked.

    Returns
    -------
    Optional[:class:`numpy.ndarray`]
        A ``(batch·q_len) × (batch·k_len)`` array, or ``None`` if nothing would be blocked.
    """
    if batch == 1 and not causal and key_padding is None:
        return None

    local_open = np.ones((q_len, k_len), dtype=bool)

    if causal:
        local_open = ~np.triu(local_open, k=1 + k_len - q_len)

    allowed = np.kron(np.eye(batch, dtype=np.int8), local_open.astype(np.int8)).astype(bool)

    if key_padding is not None:
        key_padding = np.asarray(key_padding, dtype=bool).reshape(batch * k_len)
        allowed &= ~key_padding[None, :]

    return ~allowed


def augment_kv(keys: Tensor, values: Tensor, memory_keys: TensorLike, memory_values: TensorLike,
               segments: Optional[SegmentEmbeddings] = None, detach_memory: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Prepends memory slots to the keys and values of one head.

    ``K~ = [M_K + seg.mem; K + seg.input]`` and ``V~ = [M_V; V]``.

    Parameters
    ----------
    keys: :class:`Tensor`
        The ``T_k × d`` input keys.
    values: :class:`Tensor`
        The ``T_k × d`` input values.
    memory_keys: :class:`Tensor`
        The ``m × d`` memory keys.
    memory_values: :class:`Tensor`
        The ``m × d`` memory values.
    segments: Optional[:class:`SegmentEmbeddings`]
        The segment embeddings to add to keys. ``None`` adds nothing.
    detach_memory: :class:`bool`
        Whether memory contents enter as constants, so no gradient reaches them.
        Only the learnable-memory baseline passes ``False``.

    Raises
    ------
    :class:`DimensionError`
        If any of the four tensors disagree on their last dimension, or rows do not pair up.

    Returns
    -------
    Tuple[:class:`Tensor`, :class:`Tensor`]
        The augmented ``(m + T_k) × d`` keys and values.
    """
    memory_keys, memory_values = as_tensor(memory_keys), as_tensor(memory_values)

    for other in (values, memory_keys, memory_values):
        if other.ndim != 2 or other.shape[1] != keys.shape[1]:
            raise DimensionError.mismatch('augment_kv', keys.shape, other.shape)

    if keys.shape[0] != values.shape[0]:
        raise DimensionError.mismatch('augment_kv', keys.shape, values.shape)

    if memory_keys.shape[0] != memory_values.shape[0]:
        raise DimensionError.mismatch('augment_kv', memory_keys.shape, memory_values.shape)

    if detach_memory:
        memory_keys, memory_values = memory_keys.detach(), memory_values.detach()

    if segments is not None:
        memory_keys = add(memory_keys, segments.mem_segment)
        keys = add(keys, segments.input_segment)

    if memory_keys.shape[0] == 0:
        return keys, values

    return concat_rows([memory_keys, keys]), concat_rows([memory_values, values])


def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor, mask: Optional[np.ndarray] = None,
                         scale_factor: Optional[float] = None, memory_cols: int = 0) -> Tuple[Tensor, AttentionTrace]:
    """
    ``softmax_rows(Q K~ᵀ · scale + mask_bias) V~``.

    Parameters
    ----------
    queries: :class:`Tensor`
        ``T_q × d``.
    keys: :class:`Tensor`
        ``(m + T_k) × d``, memory rows first.
    values: :class:`Tensor`
        ``(m + T_k) × d_v``.
    mask: Optional[:class:`numpy.ndarray`]
        ``T_q × (m + T_k)`` booleans, ``True`` = blocked. Blocked logits receive a ``-1e9`` bias.
    scale_factor: Optional[:class:`float`]
        Defaults to ``1/sqrt(d)``.
    memory_cols: :class:`int`
        How many leading columns are memory slots, recorded on the trace.

    Raises
    ------
    :class:`ContractError`
        If a row of ``mask`` blocks every column.
    """
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape[1] != keys.shape[1]:
        raise DimensionError.mismatch('scaled_dot_attention', queries.shape, keys.shape)

    if keys.shape[0] != values.shape[0]:
        raise DimensionError.mismatch('scaled_dot_attention', keys.shape, values.shape)

    logits = matmul(queries, transpose(keys))
    logits = scale(logits, 1.0 / math.sqrt(queries.shape[1]) if scale_factor is None else scale_factor)

    if mask is not None:
        if mask.shape != logits.shape:
            raise DimensionError.mismatch('attention mask', mask.shape, logits.shape)

        if mask.all(axis=1).any():
            raise ContractError(f'Attention row {int(np.argmax(mask.all(axis=1)))} is fully masked')

        logits = add(logits, np.where(mask, MASK_BIAS, 0.0))

    weights = softmax_rows(logits)
    return matmul(weights, values), AttentionTrace(weights.data, memory_cols, mask)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: MultiHeadParams, cfg: AttentionConfig,
                         memory: Optional[Sequence] = None,
                         segments: Optional[Sequence[SegmentEmbeddings]] = None,
                         mask: Optional[np.ndarray] = None, detach_memory: bool = True) -> AttentionResult:
    """
    Multi-head attention with optional per-head memory slots.

    This is self-attention when ``x_q is x_kv`` and cross-attention otherwise. Cross-attention
    never carries memory.

    Parameters
    ----------
    x_q: :class:`Tensor`
        The ``T_q × d_model`` query source.
    x_kv: :class:`Tensor`
        The ``T_k × d_model`` key/value source.
    params: :class:`MultiHeadParams`
        The projection weights.
    cfg: :class:`AttentionConfig`
        The block configuration.
    memory: Optional[Sequence]
        One memory slot per head, each exposing ``keys`` and ``values`` (``m × head_dim``),
        such as :class:`~protomem.prototypes.PrototypeMemory`. ``None`` runs plain attention.
    segments: Optional[Sequence[:class:`SegmentEmbeddings`]]
        One entry per head (entries may be shared). Only applied alongside memory.
    mask: Optional[:class:`numpy.ndarray`]
        ``T_q × T_k`` booleans over the *input* columns, see :func:`attention_mask`.
        Memory columns are prepended unblocked.
    detach_memory: :class:`bool`
        Forwarded to :func:`augment_kv`.

    Returns
    -------
    :class:`AttentionResult`
        The ``T_q × d_model`` output, one trace per head, and the raw (segment-free) per-head
        keys and values, ready to be pushed into memory banks.
    """
    if memory is not None:
        if x_q is not x_kv:
            raise ContractError('Cross-attention never carries memory')

        if cfg.memory_slots == 0:
            raise ContractError('Memory was given to an attention block configured with memory_slots=0')

        if len(memory) != cfg.heads:
            raise DimensionError(f'Expected one memory slot per head ({cfg.heads}), got {len(memory)}')

    if segments is not None and len(segments) != cfg.heads:
        raise DimensionError(f'Expected one segment pair per head ({cfg.heads}), got {len(segments)}')

    q = add(matmul(x_q, params.w_q), params.b_q)
    k = add(matmul(x_kv, params.w_k), params.b_k)
    v = add(matmul(x_kv, params.w_v), params.b_v)
    hd = cfg.head_dim

    outputs, traces, raw_keys, raw_values = [], [], [], []

    for head in range(cfg.heads):
        q_h = slice_cols(q, head * hd, (head + 1) * hd)
        k_h = slice_cols(k, head * hd, (head + 1) * hd)
        v_h = slice_cols(v, head * hd, (head + 1) * hd)
        raw_keys.append(k_h.data)
        raw_values.append(v_h.data)
        head_mask = mask
        m = 0

        if memory is not None:
            slot = memory[head]
            m = slot.keys.shape[0]

            if m != cfg.memory_slots:
                raise DimensionError(f'Head {head} memory has {m} slots, expected {cfg.memory_slots}')

            seg = segments[head] if segments is not None else None
            k_h, v_h = augment_kv(k_h, v_h, slot.keys, slot.values, seg, detach_memory)

            if mask is not None:
                head_mask = np.concatenate([np.zeros((mask.shape[0], m), dtype=bool), mask], axis=1)

        out, trace = scaled_dot_attention(q_h, k_h, v_h, head_mask, cfg.scale, memory_cols=m)
        outputs.append(out)
        traces.append(trace)

    merged = concat_cols(outputs) if cfg.heads > 1 else outputs[0]
    output = add(matmul(merged, params.w_o), params.b_o)
    return AttentionResult(output, traces, raw_keys, raw_values)


def memory_attention_score(traces: Sequence[AttentionTrace], position: int) -> Tuple[List[float], float]:
    """
    The share of attention a query row spends on memory, per layer and averaged over layers.

    For each layer, ``score = mean(a_m) / (mean(a_m) + mean(a_p))`` where ``a_m`` are the row's
    memory-column weights and ``a_p`` its weights on unmasked input columns.

    Parameters
    ----------
    traces: Sequence[:class:`AttentionTrace`]
        One trace per layer (e.g. a head average, see :func:`AttentionTrace.mean_over_heads`).
    position: :class:`int`
        The query row to score.

    Raises
    ------
    :class:`ContractError`
        If a trace has no memory columns, or the row does not sum to 1.

    Returns
    -------
    Tuple[List[:class:`float`], :class:`float`]
        The per-layer scores, each in ``[0, 1]``, and their uniform mean.
    """
    scores = []

    for layer, trace in enumerate(traces):
        m = trace.memory_col_count

        if m == 0:
            raise ContractError(f'Memory attention score is undefined for layer {layer}: it has no memory columns')

        row = trace.weights[position]

        if abs(row.sum() - 1.0) > 1e-9:
            raise ContractError(f'Layer {layer} row {position} sums to {row.sum()}, not 1')

        inputs = row[m:]

        if trace.mask is not None:
            inputs = inputs[~trace.mask[position, m:]]

        mean_memory = float(row[:m].mean())
        mean_input = float(inputs.mean()) if inputs.size else 0.0
        total = mean_memory + mean_input
        scores.append(mean_memory / total if total > 0 else 0.0)

    return scores, float(np.mean(scores))
