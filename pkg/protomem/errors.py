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
"""
from typing import Any, Dict, Optional, Sequence


class ProtoMemError(Exception):
    """ Base exception for all errors raised by protomem. """


class DimensionError(ProtoMemError, ValueError):
    """ Raised when tensor shapes do not agree. The message names the offending shapes. """

    @classmethod
    def mismatch(cls, op: str, left: Sequence[int], right: Sequence[int]) -> 'DimensionError':
        return cls(f'{op}: incompatible shapes {tuple(left)} and {tuple(right)}')


class ContractError(ProtoMemError):
    """ Raised when an operation is called outside of its preconditions. """


class OrderingError(ProtoMemError):
    """ Raised when a memory bank receives a step that is not strictly increasing. """


class SizeError(ProtoMemError):
    """ Raised when there are fewer points than requested clusters or neighbours. """


class DistinctKeysError(SizeError):
    """ Raised when a bank snapshot holds fewer distinct keys than the prototypes requested from it. """


class VocabularyError(ProtoMemError, IndexError):
    """ Raised when a token or target id falls outside of the vocabulary. """


class ConfigError(ProtoMemError):
    """ Raised when a configuration value, key or file is invalid. """


class NonFiniteError(ProtoMemError, FloatingPointError):
    """ Raised when a numerics operation produces NaN or infinite values. """


class CheckpointError(ProtoMemError):
    """
    Raised when a checkpoint cannot be read back.

    Attributes
    ----------
    field: :class:`str`
        The part of the file that failed validation. One of ``magic``, ``version``, ``header``,
        ``payload:<tensor name>`` or ``digest``.
    """
    __slots__ = ('field',)

    def __init__(self, field: str, message: str):
        super().__init__(f'[{field}] {message}')
        self.field: str = field


class TrainingAborted(ProtoMemError):
    """
    Raised when training produces a non-finite loss.

    Attributes
    ----------
    step: :class:`int`
        The step at which training was aborted.
    snapshot: Dict[str, Any]
        A JSON-serializable diagnostic snapshot (last finite loss, learning rate, parameter norms).
    """
    __slots__ = ('step', 'snapshot')

    def __init__(self, step: int, snapshot: Dict[str, Any], cause: Optional[str] = None):
        super().__init__(f'Training aborted at step {step}: {cause or "non-finite loss"}')
        self.step: int = step
        self.snapshot: Dict[str, Any] = snapshot


class VerificationError(ProtoMemError):
    """
    Raised when a bound or oracle check fails.

    Attributes
    ----------
    record: Dict[str, Any]
        The serialized violating record.
    """
    __slots__ = ('record',)

    def __init__(self, message: str, record: Dict[str, Any]):
        super().__init__(message)
        self.record: Dict[str, Any] = record
