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

Checkpoint files.

A checkpoint is laid out as the magic ``PMAC``, a u32 format version, a u32 header length, a JSON
header (tensor names, shapes and byte offsets, the configuration, the sampler RNG state), the raw
little-endian float64 tensor payloads and finally the SHA-256 digest of the payloads.
Memory banks are not stored: a resumed run refills them and rebuilds prototypes at the next fill.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .captioner import parameter_count
from .config import RunConfig
from .dataio import DataReader, DataWriter
from .errors import CheckpointError, ConfigError, DimensionError
from .prototypes import PrototypeMemory
from .trainkit import TrainState
from .utils import summarize

_log = logging.getLogger(__name__)

MAGIC = b'PMAC'
FORMAT_VERSION = 1
DIGEST_SIZE = hashlib.sha256().digest_size

PathLike = Union[str, Path]


def _tensors(state: TrainState) -> List[tuple]:
    model, optimizer = state.model, state.optimizer
    tensors = [(f'param/{name}', tensor.data) for name, tensor in model.params.items()]
    tensors += [(f'adam_m/{name}', moment) for name, moment in optimizer.m.items()]
    tensors += [(f'adam_v/{name}', moment) for name, moment in optimizer.v.items()]

    for (layer, head), memory in sorted(model.memories.items()):
        tensors.append((f'memory/{layer}.{head}/keys', memory.keys))
        tensors.append((f'memory/{layer}.{head}/values', memory.values))

    return tensors


def checkpoint_bytes(state: TrainState) -> bytes:
    """ Serializes a training state. Equal states always serialize to equal bytes. """
    payload = DataWriter()
    entries = []

    for name, array in _tensors(state):
        offset, length = payload.write_f64_array(array)
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': length})

    memories = [{'layer': layer, 'head': head, 'built_at_step': memory.built_at_step, 'k_used': memory.k_used}
                for (layer, head), memory in sorted(state.model.memories.items())]
    header = {
        'config': state.config.to_dict(),
        'step': state.step,
        'refresh_count': state.refresh_count,
        'optimizer': {'t': state.optimizer.t, 'beta1': state.optimizer.beta1, 'beta2': state.optimizer.beta2,
                      'eps': state.optimizer.eps},
        'rng': state.rng.bit_generator.state,
        'tensors': entries,
        'memories': memories
    }
    header_raw = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload_raw = payload.to_bytes()

    writer = DataWriter()
    writer.write_bytes(MAGIC)
    writer.write_u32(FORMAT_VERSION)
    writer.write_u32(len(header_raw))
    writer.write_bytes(header_raw)
    writer.write_bytes(payload_raw)
    writer.write_bytes(hashlib.sha256(payload_raw).digest())
    return writer.to_bytes()


def save_checkpoint(state: TrainState, path: PathLike):
    """
    Writes a checkpoint of ``state`` to ``path``.

    Parameters
    ----------
    state: :class:`~protomem.trainkit.TrainState`
        The state to save. Parameters, optimizer moments, installed prototypes and the sampler RNG are stored.
    path: Union[:class:`str`, :class:`pathlib.Path`]
        The file to write. Parent directories are created.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(state)
    path.write_bytes(data)
    _log.info('[Checkpoint] Saved step %d to %s (%d bytes)', state.step, path, len(data))


def _read_sections(data: bytes):
    reader = DataReader(data)

    if reader.read_bytes(len(MAGIC), 'magic') != MAGIC:
        raise CheckpointError('magic', 'not a protomem checkpoint')

    version = reader.read_u32('version')

    if version != FORMAT_VERSION:
        raise CheckpointError('version', f'format version {version} is not supported (expected {FORMAT_VERSION})')

    header_raw = reader.read_bytes(reader.read_u32('header'), 'header')

    try:
        header = json.loads(header_raw.decode('utf-8'))
    except ValueError as error:
        raise CheckpointError('header', f'malformed JSON: {error}') from error

    rest = reader.read_rest()

    if len(rest) < DIGEST_SIZE:
        raise CheckpointError('digest', 'file ends before the digest')

    payload, digest = rest[:-DIGEST_SIZE], rest[-DIGEST_SIZE:]
    arrays = {}

    try:
        entries = [(str(entry['name']), int(entry['offset']), int(entry['offset']) + int(entry['nbytes']),
                    tuple(int(size) for size in entry['shape'])) for entry in header.get('tensors', [])]
    except (AttributeError, KeyError, TypeError, ValueError) as error:
        raise CheckpointError('header', f'malformed tensor entry: {error!r}') from error

    for name, offset, end, shape in entries:
        if offset < 0 or end < offset or min(shape, default=0) < 0:
            raise CheckpointError('header', f'tensor {name} has a negative extent')

        if end > len(payload):
            raise CheckpointError(f'payload:{name}', f'needs bytes up to {end} but the payload holds {len(payload)}')

        arrays[name] = DataReader(payload[offset:end]).read_f64_array(shape, f'payload:{name}')

    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError('digest', 'payload digest mismatch')

    return header, arrays


def load_checkpoint(path: PathLike) -> TrainState:
    """
    Reads a checkpoint back into a training state.

    Memory banks start out empty, every other part of the state is restored bit for bit.

    Raises
    ------
    :class:`~protomem.errors.CheckpointError`
        If the file cannot be read, or any of its fields fails validation. ``field`` names the failing field.

    Returns
    -------
    :class:`~protomem.trainkit.TrainState`
    """
    try:
        data = Path(path).read_bytes()
    except OSError as error:
        raise CheckpointError('file', str(error)) from error

    header, arrays = _read_sections(data)

    try:
        config = RunConfig.from_dict(header['config'])
        state = TrainState.fresh(config)
        model, optimizer = state.model, state.optimizer

        model.load_state_dict({name: arrays[f'param/{name}'] for name in model.params})

        for name in model.params:
            np.copyto(optimizer.m[name], arrays[f'adam_m/{name}'])
            np.copyto(optimizer.v[name], arrays[f'adam_v/{name}'])

        optimizer.t = header['optimizer']['t']
        state.rng.bit_generator.state = header['rng']
        state.step = header['step']
        state.refresh_count = header['refresh_count']
        model.install_memories({
            (entry['layer'], entry['head']): PrototypeMemory(arrays[f'memory/{entry["layer"]}.{entry["head"]}/keys'],
                                                             arrays[f'memory/{entry["layer"]}.{entry["head"]}/values'],
                                                             entry['built_at_step'], entry['k_used'])
            for entry in header['memories']
        })
    except (KeyError, TypeError, ValueError, ConfigError, DimensionError) as error:
        raise CheckpointError('header', f'inconsistent with the stored tensors: {error!r}') from error

    _log.info('[Checkpoint] Loaded step %d from %s', state.step, path)
    return state


def checkpoint_summary(path: PathLike) -> Dict[str, Any]:
    """
    Describes a checkpoint: configuration, parameter counts, per-slot prototype statistics and digest status.

    A checkpoint that fails to load is reported with ``digest`` set to ``failed`` and the failing field.
    """
    try:
        state = load_checkpoint(path)
    except CheckpointError as error:
        return {'path': str(path), 'digest': 'failed', 'field': error.field, 'error': str(error)}

    model = state.model
    prototypes = []

    for (layer, head), memory in sorted(model.memories.items()):
        low, mean, high = summarize(np.linalg.norm(memory.keys, axis=1))
        prototypes.append({'layer': layer, 'head': head, 'm': memory.slots, 'built_at_step': memory.built_at_step,
                           'k_used': memory.k_used, 'key_norm': {'min': low, 'mean': mean, 'max': high}})

    return {
        'path': str(path),
        'digest': 'ok',
        'step': state.step,
        'config': state.config.to_dict(),
        'parameters': model.num_parameters,
        'parameters_closed_form': parameter_count(model.cfg),
        'prototypes': prototypes
    }
