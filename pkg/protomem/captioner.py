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

A small pre-norm encoder-decoder transformer whose decoder self-attention layers carry memory slots.

The encoder reads an unordered set of feature vectors (no positional encoding). The decoder embeds
tokens with learned positions and runs causal self-attention (optionally extended with memory),
cross-attention over the encoder output and a feed-forward block in every layer.
Batches are flattened into rows; block masks keep samples independent.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .attention import (AttentionConfig, AttentionTrace, MultiHeadParams, SegmentEmbeddings,
                        attention_mask, multi_head_attention)
from .common import Enum
from .errors import ConfigError, ContractError, DimensionError, VocabularyError
from .membank import SlotKey
from .numerics import (Tensor, add, gelu, layer_norm, log_softmax_rows, matmul, no_grad,
                       take_rows)
from .prototypes import PrototypeMemory

_log = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


class MemoryMode(Enum):
    """
    Where the memory slots of decoder self-attention come from.

    PMA
        Prototypes distilled from memory banks of past activations.
    LEARNABLE_MEM
        Memory keys and values are plain trained parameters.
    BASELINE
        No memory at all.
    """
    PMA = 'pma'
    LEARNABLE_MEM = 'learnable-mem'
    BASELINE = 'baseline'


@dataclass
class ModelConfig:
    """
    Architecture of a :class:`Captioner`.

    Attributes
    ----------
    layers: :class:`int`
        The number of encoder layers and of decoder layers.
    d_model: :class:`int`
    heads: :class:`int`
    ffn_dim: :class:`int`
    vocab: :class:`int`
    max_len: :class:`int`
        The longest token sequence (including ``<bos>``) the decoder accepts.
    d_feat: :class:`int`
        The width of input feature vectors.
    memory_slots: :class:`int`
        ``m``, the number of memory slots per decoder layer and head. ``0`` disables memory.
    memory_in_first_layer: :class:`bool`
        Whether decoder layer 0 carries memory.
    use_segment_embeddings: :class:`bool`
        Whether memory and input keys receive learnable segment embeddings.
    segment_per_head: :class:`bool`
        Whether every head gets its own segment pair instead of one per layer.
    mode: :class:`MemoryMode`
    """
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    vocab: int = 17
    max_len: int = 8
    d_feat: int = 32
    memory_slots: int = 64
    memory_in_first_layer: bool = True
    use_segment_embeddings: bool = True
    segment_per_head: bool = False
    mode: MemoryMode = MemoryMode.PMA

    def __post_init__(self):
        try:
            self.mode = MemoryMode.from_str(self.mode)
        except ValueError as error:
            raise ConfigError(str(error)) from error

        for name in ('layers', 'd_model', 'heads', 'ffn_dim', 'vocab', 'max_len', 'd_feat'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')

        if self.vocab <= EOS_ID:
            raise ConfigError(f'vocab must hold the special tokens, got {self.vocab}')

        if self.memory_slots < 0:
            raise ConfigError(f'memory_slots must be nonnegative, got {self.memory_slots}')

        AttentionConfig(self.d_model, self.heads)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def memory_layers(self) -> List[int]:
        """ The decoder layers whose self-attention carries memory. """
        if self.mode == MemoryMode.BASELINE or self.memory_slots == 0:
            return []

        first = 0 if self.memory_in_first_layer else 1
        return list(range(first, self.layers))

    def memory_slot_keys(self) -> List[SlotKey]:
        """ Every memory-carrying (layer, head), sorted. """
        return [(layer, head) for layer in self.memory_layers() for head in range(self.heads)]


def parameter_count(cfg: ModelConfig) -> int:
    """
    The number of trainable scalars of a :class:`Captioner` built from ``cfg``, in closed form.
    """
    d, f = cfg.d_model, cfg.ffn_dim
    attention = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    norm = 2 * d

    encoder = cfg.d_feat * d + d + cfg.layers * (2 * norm + attention + ffn) + norm
    decoder = (cfg.vocab + cfg.max_len) * d + cfg.layers * (3 * norm + 2 * attention + ffn) + norm + d * cfg.vocab + cfg.vocab

    memory_layers = len(cfg.memory_layers())
    memory = 0

    if cfg.use_segment_embeddings:
        memory += memory_layers * 2 * (d if cfg.segment_per_head else cfg.head_dim)

    if cfg.mode == MemoryMode.LEARNABLE_MEM:
        memory += memory_layers * 2 * cfg.memory_slots * d

    return encoder + decoder + memory


class LearnableMemory:
    """ Memory slots whose keys and values are trained parameters. """
    __slots__ = ('keys', 'values')

    def __init__(self, keys: Tensor, values: Tensor):
        self.keys: Tensor = keys
        self.values: Tensor = values


class DecoderOutput(NamedTuple):
    logits: Tensor
    traces: Dict[int, List[AttentionTrace]]
    activations: Dict[int, Tuple[List[np.ndarray], List[np.ndarray]]]


class Captioner:
    """
    The encoder-decoder model.

    Parameters are kept in :attr:`params`, an ordered mapping from dotted names to leaf tensors,
    and are looked up on every forward pass.

    Parameters
    ----------
    cfg: :class:`ModelConfig`
        The architecture.
    seed: :class:`int`
        Seeds parameter initialisation.

    Attributes
    ----------
    cfg: :class:`ModelConfig`
    params: Dict[:class:`str`, :class:`Tensor`]
    """
    __slots__ = ('cfg', 'params', '_memories')

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg: ModelConfig = cfg
        self.params: Dict[str, Tensor] = {}
        self._memories: Dict[SlotKey, PrototypeMemory] = {}
        self._init_params(np.random.default_rng(seed))

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True)

    def _linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self._add(f'{name}.w', rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        self._add(f'{name}.b', np.zeros(fan_out))

    def _norm(self, name: str):
        self._add(f'{name}.g', np.ones(self.cfg.d_model))
        self._add(f'{name}.b', np.zeros(self.cfg.d_model))

    def _attention(self, name: str, rng: np.random.Generator):
        for pname, tensor in MultiHeadParams.init(self.cfg.d_model, rng).named(name):
            self.params[pname] = tensor

    def _init_params(self, rng: np.random.Generator):
        cfg = self.cfg
        d = cfg.d_model
        self._linear('feat', cfg.d_feat, d, rng)

        for layer in range(cfg.layers):
            prefix = f'enc.{layer}'
            self._norm(f'{prefix}.ln1')
            self._attention(f'{prefix}.self', rng)
            self._norm(f'{prefix}.ln2')
            self._linear(f'{prefix}.ffn1', d, cfg.ffn_dim, rng)
            self._linear(f'{prefix}.ffn2', cfg.ffn_dim, d, rng)

        self._norm('enc.ln_f')
        self._add('tok_emb', rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab, d)))
        self._add('pos_emb', rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.max_len, d)))
        memory_layers = set(cfg.memory_layers())

        for layer in range(cfg.layers):
            prefix = f'dec.{layer}'
            self._norm(f'{prefix}.ln1')
            self._attention(f'{prefix}.self', rng)
            self._norm(f'{prefix}.ln2')
            self._attention(f'{prefix}.cross', rng)
            self._norm(f'{prefix}.ln3')
            self._linear(f'{prefix}.ffn1', d, cfg.ffn_dim, rng)
            self._linear(f'{prefix}.ffn2', cfg.ffn_dim, d, rng)

            if layer not in memory_layers:
                continue

            if cfg.use_segment_embeddings:
                for seg in self._segment_names(layer):
                    self._add(f'{seg}.mem', np.zeros(cfg.head_dim))
                    self._add(f'{seg}.input', np.zeros(cfg.head_dim))

            if cfg.mode == MemoryMode.LEARNABLE_MEM:
                for head in range(cfg.heads):
                    for part in ('keys', 'values'):
                        self._add(f'{prefix}.mem.{head}.{part}',
                                  rng.normal(0.0, 1.0 / math.sqrt(cfg.head_dim), size=(cfg.memory_slots, cfg.head_dim)))

        self._norm('dec.ln_f')
        self._linear('out', d, cfg.vocab, rng)

    def _segment_names(self, layer: int) -> List[str]:
        if self.cfg.segment_per_head:
            return [f'dec.{layer}.seg.{head}' for head in range(self.cfg.heads)]
        return [f'dec.{layer}.seg']

    @property
    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    @property
    def memories(self) -> Dict[SlotKey, PrototypeMemory]:
        """ The currently installed prototype memories. """
        return dict(self._memories)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        """
        Copies parameter values in place.

        Raises
        ------
        :class:`DimensionError`
            If the names or shapes do not match the model.
        """
        if set(state) != set(self.params):
            raise DimensionError(f'Parameter names differ: {sorted(set(state) ^ set(self.params))}')

        for name, tensor in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)

            if value.shape != tensor.shape:
                raise DimensionError.mismatch(f'load_state_dict[{name}]', tensor.shape, value.shape)

        for name, tensor in self.params.items():
            np.copyto(tensor.data, state[name])

    def install_memories(self, memories: Optional[Mapping[SlotKey, PrototypeMemory]]):
        """
        Replaces the installed prototype memories.

        The swap is atomic: either every given memory is installed or, on error, nothing changes.
        Slots of layer 0 are ignored while ``memory_in_first_layer`` is off.

        Parameters
        ----------
        memories: Optional[Mapping[Tuple[:class:`int`, :class:`int`], :class:`PrototypeMemory`]]
            Prototypes per (layer, head). ``None`` removes every memory.

        Raises
        ------
        :class:`DimensionError`
            If a memory does not have ``memory_slots × head_dim`` entries, or names a layer or head
            the model does not have.
        """
        if memories is None:
            self._memories = {}
            return

        cfg = self.cfg
        carrying = set(cfg.memory_slot_keys())
        installed = {}

        for (layer, head), memory in sorted(memories.items(), key=lambda item: item[0]):
            if not (0 <= layer < cfg.layers and 0 <= head < cfg.heads):
                raise DimensionError(f'No decoder slot ({layer}, {head}) in a {cfg.layers}-layer, {cfg.heads}-head model')

            if memory.keys.shape != (cfg.memory_slots, cfg.head_dim):
                raise DimensionError.mismatch(f'install_memories({layer}, {head})', (cfg.memory_slots, cfg.head_dim),
                                              memory.keys.shape)

            if (layer, head) not in carrying:
                _log.debug('Ignoring memory for slot (%d, %d): the layer carries no memory', layer, head)
                continue

            installed[(layer, head)] = memory

        self._memories = installed

    def _layer_memories(self, overrides: Optional[Mapping[SlotKey, PrototypeMemory]]) -> Dict[int, list]:
        cfg = self.cfg

        if cfg.mode == MemoryMode.LEARNABLE_MEM:
            return {layer: [LearnableMemory(self.params[f'dec.{layer}.mem.{head}.keys'],
                                            self.params[f'dec.{layer}.mem.{head}.values'])
                            for head in range(cfg.heads)]
                    for layer in cfg.memory_layers()}

        source = self._memories if overrides is None else overrides
        layers = {}

        for layer in cfg.memory_layers():
            slots = [source.get((layer, head)) for head in range(cfg.heads)]

            if all(slot is not None for slot in slots):
                layers[layer] = slots

        return layers

    def _segments(self, layer: int) -> Optional[List[SegmentEmbeddings]]:
        if not self.cfg.use_segment_embeddings:
            return None

        pairs = [SegmentEmbeddings(self.params[f'{name}.mem'], self.params[f'{name}.input'])
                 for name in self._segment_names(layer)]
        return pairs if self.cfg.segment_per_head else pairs * self.cfg.heads

    def _mha_params(self, prefix: str) -> MultiHeadParams:
        return MultiHeadParams(**{name: self.params[f'{prefix}.{name}'] for name in MultiHeadParams.NAMES})

    def _norm_apply(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f'{name}.g'], self.params[f'{name}.b'])

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        hidden = gelu(add(matmul(x, self.params[f'{prefix}.ffn1.w']), self.params[f'{prefix}.ffn1.b']))
        return add(matmul(hidden, self.params[f'{prefix}.ffn2.w']), self.params[f'{prefix}.ffn2.b'])

    def encode_batch(self, features) -> Tensor:
        """
        Encodes a ``B × n_f × d_feat`` batch of feature sets into ``(B·n_f) × d_model`` rows.
        """
        features = np.asarray(features, dtype=np.float64)

        if features.ndim != 3 or features.shape[2] != self.cfg.d_feat:
            raise DimensionError.mismatch('encode', (-1, -1, self.cfg.d_feat), features.shape)

        batch, n_f, _ = features.shape

        if n_f < 1:
            raise ContractError('encode needs at least one feature row')

        cfg = AttentionConfig(self.cfg.d_model, self.cfg.heads)
        mask = attention_mask(batch, n_f, n_f)
        x = add(matmul(features.reshape(batch * n_f, -1), self.params['feat.w']), self.params['feat.b'])

        for layer in range(self.cfg.layers):
            prefix = f'enc.{layer}'
            h = self._norm_apply(x, f'{prefix}.ln1')
            x = add(x, multi_head_attention(h, h, self._mha_params(f'{prefix}.self'), cfg, mask=mask).output)
            x = add(x, self._ffn(self._norm_apply(x, f'{prefix}.ln2'), prefix))

        return self._norm_apply(x, 'enc.ln_f')

    def encode(self, features) -> Tensor:
        """
        Encodes one ``n_f × d_feat`` feature set.

        The encoder is permutation-equivariant over feature rows.

        Raises
        ------
        :class:`DimensionError`
            If the feature width is not ``d_feat``.

        Returns
        -------
        :class:`Tensor`
            ``n_f × d_model``.
        """
        features = np.asarray(features, dtype=np.float64)

        if features.ndim != 2:
            raise DimensionError.mismatch('encode', (-1, self.cfg.d_feat), features.shape)

        return self.encode_batch(features[None])

    def decode_batch(self, tokens, enc_out: Tensor, n_feat: int, lengths: Optional[Sequence[int]] = None,
                     memories: Optional[Mapping[SlotKey, PrototypeMemory]] = None) -> DecoderOutput:
        """
        Teacher-forced decoding of a ``B × T`` token batch against ``(B·n_feat)`` encoder rows.

        Parameters
        ----------
        tokens: :class:`numpy.ndarray`
            ``B × T`` token ids, each sequence starting with ``<bos>``.
        enc_out: :class:`Tensor`
            The output of :func:`encode_batch`.
        n_feat: :class:`int`
            Encoder rows per sample.
        lengths: Optional[Sequence[:class:`int`]]
            The real length of every sequence. Later positions are padding keys. Defaults to ``T``.
        memories: Optional[Mapping]
            Prototype memories to use instead of the installed ones.

        Raises
        ------
        :class:`VocabularyError`
            If a token id is outside the vocabulary.
        :class:`ContractError`
            If ``T`` exceeds ``max_len``.

        Returns
        -------
        :class:`DecoderOutput`
            ``(B·T) × vocab`` logits, the per-head self-attention traces of every decoder layer and the
            raw per-head keys and values of every decoder self-attention layer.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)

        if tokens.ndim != 2:
            raise DimensionError(f'decode expects a 2-dimensional token batch, got shape {tokens.shape}')

        batch, length = tokens.shape

        if length > cfg.max_len:
            raise ContractError(f'Token sequence of length {length} exceeds max_len {cfg.max_len}')

        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise VocabularyError(f'Token ids must lie within [0, {cfg.vocab}), got {tokens.min()}..{tokens.max()}')

        if enc_out.shape[0] != batch * n_feat:
            raise DimensionError.mismatch('decode', (batch * n_feat, cfg.d_model), enc_out.shape)

        padding = None

        if lengths is not None:
            padding = np.arange(length)[None, :] >= np.asarray(lengths)[:, None]

        self_mask = attention_mask(batch, length, length, causal=True, key_padding=padding)
        cross_mask = attention_mask(batch, length, n_feat)
        cross_cfg = AttentionConfig(cfg.d_model, cfg.heads)
        layer_memories = self._layer_memories(memories)
        detach = cfg.mode != MemoryMode.LEARNABLE_MEM

        positions = np.tile(np.arange(length), batch)
        x = add(take_rows(self.params['tok_emb'], tokens.reshape(-1)), take_rows(self.params['pos_emb'], positions))
        traces, activations = {}, {}

        for layer in range(cfg.layers):
            prefix = f'dec.{layer}'
            memory = layer_memories.get(layer)
            self_cfg = AttentionConfig(cfg.d_model, cfg.heads, causal=True,
                                       memory_slots=cfg.memory_slots if memory is not None else 0)

            h = self._norm_apply(x, f'{prefix}.ln1')
            result = multi_head_attention(h, h, self._mha_params(f'{prefix}.self'), self_cfg, memory=memory,
                                          segments=self._segments(layer) if memory is not None else None,
                                          mask=self_mask, detach_memory=detach)
            x = add(x, result.output)
            traces[layer] = result.traces
            activations[layer] = (result.keys, result.values)

            h = self._norm_apply(x, f'{prefix}.ln2')
            x = add(x, multi_head_attention(h, enc_out, self._mha_params(f'{prefix}.cross'), cross_cfg,
                                            mask=cross_mask).output)
            x = add(x, self._ffn(self._norm_apply(x, f'{prefix}.ln3'), prefix))

        h = self._norm_apply(x, 'dec.ln_f')
        logits = add(matmul(h, self.params['out.w']), self.params['out.b'])
        return DecoderOutput(logits, traces, activations)

    def decode_teacher_forced(self, tokens: Sequence[int], enc_out: Tensor,
                              memories: Optional[Mapping[SlotKey, PrototypeMemory]] = None) -> DecoderOutput:
        """
        Teacher-forced decoding of one token sequence against the ``n_f × d_model`` output of :func:`encode`.

        Position ``t`` of the logits depends only on tokens ``<= t``, the encoder output and the memories.
        """
        return self.decode_batch(np.asarray(tokens, dtype=np.int64)[None], enc_out, enc_out.shape[0], memories=memories)

    def forward(self, features, tokens, lengths: Optional[Sequence[int]] = None) -> DecoderOutput:
        """ Encodes a feature batch and decodes a token batch against it. """
        features = np.asarray(features, dtype=np.float64)
        return self.decode_batch(tokens, self.encode_batch(features), features.shape[1], lengths)

    def _next_log_probs(self, prefixes: np.ndarray, enc_out: Tensor, n_feat: int) -> np.ndarray:
        out = self.decode_batch(prefixes, enc_out, n_feat)
        length = prefixes.shape[1]
        last = out.logits.data.reshape(prefixes.shape[0], length, -1)[:, -1]
        return log_softmax_rows(last).data

    def _max_new_tokens(self, max_len: Optional[int]) -> int:
        limit = self.cfg.max_len - 1
        return limit if max_len is None else max(0, min(max_len, limit))

    def generate_batch(self, features, max_len: Optional[int] = None) -> List[List[int]]:
        """
        Greedy decoding of a ``B × n_f × d_feat`` feature batch.

        Returns
        -------
        List[List[:class:`int`]]
            The generated tokens per sample, without ``<bos>`` and up to and including ``<eos>``.
        """
        features = np.asarray(features, dtype=np.float64)
        batch, n_feat = features.shape[0], features.shape[1]
        steps = self._max_new_tokens(max_len)

        with no_grad():
            enc_out = self.encode_batch(features)
            prefixes = np.full((batch, 1), BOS_ID, dtype=np.int64)
            done = np.zeros(batch, dtype=bool)

            for _ in range(steps):
                chosen = np.argmax(self._next_log_probs(prefixes, enc_out, n_feat), axis=1)
                chosen = np.where(done, PAD_ID, chosen)
                prefixes = np.concatenate([prefixes, chosen[:, None]], axis=1)
                done |= chosen == EOS_ID

                if done.all():
                    break

        results = []

        for row in prefixes[:, 1:].tolist():
            results.append(row[:row.index(EOS_ID) + 1] if EOS_ID in row else row)

        return results

    def _beam_search(self, features: np.ndarray, steps: int, width: int) -> List[int]:
        with no_grad():
            enc = self.encode_batch(features[None])
            n_feat = features.shape[0]
            beams: List[Tuple[List[int], float]] = [([BOS_ID], 0.0)]
            finished: List[Tuple[List[int], float]] = []

            for _ in range(steps):
                prefixes = np.array([tokens for tokens, _ in beams], dtype=np.int64)
                repeated = Tensor(np.tile(enc.data, (len(beams), 1)))
                log_probs = self._next_log_probs(prefixes, repeated, n_feat)
                candidates = [(tokens + [token], score + float(log_probs[i, token]))
                              for i, (tokens, score) in enumerate(beams) for token in range(self.cfg.vocab)]
                candidates.extend(finished)
                candidates.sort(key=lambda item: -item[1])
                top = candidates[:width]

                finished = [item for item in top if item[0][-1] == EOS_ID]
                beams = [item for item in top if item[0][-1] != EOS_ID]

                if not beams:
                    break

            best = max(finished + beams, key=lambda item: item[1])

        return best[0][1:]

    def generate(self, features, max_len: Optional[int] = None, beam: int = 1) -> List[int]:
        """
        Decodes one ``n_f × d_feat`` feature set.

        Parameters
        ----------
        features: :class:`numpy.ndarray`
            The feature set.
        max_len: Optional[:class:`int`]
            The most tokens to generate. Capped at ``max_len - 1`` of the model.
        beam: :class:`int`
            The beam width. ``1`` is greedy decoding. Wider beams rank hypotheses by their
            summed (length-unnormalized) log-probability.

        Returns
        -------
        List[:class:`int`]
            The generated tokens, without ``<bos>`` and up to and including ``<eos>``.
        """
        features = np.asarray(features, dtype=np.float64)

        if features.ndim != 2:
            raise DimensionError.mismatch('generate', (-1, self.cfg.d_feat), features.shape)

        if beam < 1:
            raise ContractError(f'Beam width must be positive, got {beam}')

        steps = self._max_new_tokens(max_len)

        if beam == 1:
            return self.generate_batch(features[None], steps)[0]

        return self._beam_search(features, steps, beam)
