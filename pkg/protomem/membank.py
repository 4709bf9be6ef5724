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

Bounded streams of past key/value activations, refreshed on a strided sliding window.

A bank fills up to ``capacity`` batches, signals that prototypes are due, and after every refresh
the oldest ``stride`` batches are dropped so the next refresh falls due ``stride`` pushes later.
"""
import logging
from collections import deque
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, OrderingError

_log = logging.getLogger(__name__)

SlotKey = Tuple[int, int]


class BankEntry(NamedTuple):
    step: int
    keys: np.ndarray
    values: np.ndarray


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


class MemoryBank:
    """
    A bounded, step-ordered buffer of detached key/value batches for one (layer, head).

    Parameters
    ----------
    capacity: :class:`int`
        The maximum number of batches held (``T_bank``).
    stride: :class:`int`
        The number of batches dropped after each refresh (``s``).
    label: Optional[Tuple[:class:`int`, :class:`int`]]
        The (layer, head) this bank belongs to, used in log messages.

    Attributes
    ----------
    capacity: :class:`int`
    stride: :class:`int`
    steps_since_refresh: :class:`int`
        The number of pushes since the last refresh.
    refreshed_once: :class:`bool`
        Whether prototypes have been built from this bank at least once.
    """
    __slots__ = ('capacity', 'stride', 'label', 'steps_since_refresh', 'refreshed_once', '_entries')

    def __init__(self, capacity: int, stride: int, label: Optional[SlotKey] = None):
        if capacity < 1:
            raise ConfigError(f'Bank capacity must be positive, got {capacity}')

        if not 1 <= stride <= capacity:
            raise ConfigError(f'Bank stride must be within [1, {capacity}], got {stride}')

        self.capacity: int = capacity
        self.stride: int = stride
        self.label: SlotKey = label or (-1, -1)
        self.steps_since_refresh: int = 0
        self.refreshed_once: bool = False
        self._entries: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[BankEntry]:
        return iter(self._entries)

    @property
    def entries(self) -> List[BankEntry]:
        """ The stored batches, oldest first. """
        return list(self._entries)

    @property
    def last_step(self) -> Optional[int]:
        return self._entries[-1].step if self._entries else None

    @property
    def rows(self) -> int:
        """ The total number of stored key rows across every batch. """
        return sum(entry.keys.shape[0] for entry in self._entries)

    def push_batch(self, step: int, keys, values) -> bool:
        """
        Appends a frozen copy of one batch of keys and values.

        Parameters
        ----------
        step: :class:`int`
            The training step this batch was produced at. Must exceed every stored step.
        keys: :class:`numpy.ndarray`
            ``n × head_dim`` keys.
        values: :class:`numpy.ndarray`
            ``n × head_dim`` values, row-aligned with ``keys``.

        Raises
        ------
        :class:`OrderingError`
            If ``step`` is not strictly greater than the last stored step.
        :class:`DimensionError`
            If keys and values do not pair up row by row.

        Returns
        -------
        :class:`bool`
            Whether a refresh is due: the bank just filled for the first time, or ``stride``
            batches were pushed since the last refresh.
        """
        last = self.last_step

        if last is not None and step <= last:
            raise OrderingError(f'Bank {self.label} received step {step} after step {last}')

        keys, values = _frozen(keys), _frozen(values)

        if keys.ndim != 2 or keys.shape != values.shape:
            raise DimensionError.mismatch('push_batch', keys.shape, values.shape)

        self._entries.append(BankEntry(step, keys, values))

        if self.refreshed_once:
            self.steps_since_refresh += 1
            due = self.steps_since_refresh == self.stride
        else:
            due = len(self._entries) == self.capacity

        _log.debug('[Bank:%d/%d] Pushed %d rows at step %d (%d/%d batches, due=%s)',
                   self.label[0], self.label[1], keys.shape[0], step, len(self._entries), self.capacity, due)
        return due

    def mark_refreshed(self):
        """ Records that prototypes were rebuilt from the current contents. """
        self.refreshed_once = True
        self.steps_since_refresh = 0

    def slide(self, stride: Optional[int] = None):
        """
        Drops the oldest ``stride`` batches, keeping order.

        Parameters
        ----------
        stride: Optional[:class:`int`]
            Defaults to the bank's own stride. ``0`` leaves the bank unchanged.

        Raises
        ------
        :class:`ContractError`
            If ``stride`` exceeds the number of stored batches, or is negative.
        """
        stride = self.stride if stride is None else stride

        if stride < 0 or stride > len(self._entries):
            raise ContractError(f'Cannot slide {len(self._entries)} batches by {stride}')

        for _ in range(stride):
            self._entries.popleft()

        _log.debug('[Bank:%d/%d] Slid by %d, %d batches left', self.label[0], self.label[1], stride, len(self._entries))

    def snapshot(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Concatenates every stored batch, oldest first. Key row ``i`` pairs with value row ``i``.

        Raises
        ------
        :class:`ContractError`
            If the bank is empty.

        Returns
        -------
        Tuple[:class:`numpy.ndarray`, :class:`numpy.ndarray`]
            The ``N × head_dim`` keys and values.
        """
        if not self._entries:
            raise ContractError(f'Cannot snapshot empty bank {self.label}')

        keys = np.concatenate([entry.keys for entry in self._entries], axis=0)
        values = np.concatenate([entry.values for entry in self._entries], axis=0)
        return keys, values

    def clear(self):
        self._entries.clear()
        self.steps_since_refresh = 0
        self.refreshed_once = False

    def __repr__(self):
        return (f'<MemoryBank label={self.label} batches={len(self._entries)}/{self.capacity} stride={self.stride} '
                f'refreshed_once={self.refreshed_once}>')


class MemoryBankGrid:
    """
    One :class:`MemoryBank` per memory-carrying (layer, head), all following the same schedule.

    Parameters
    ----------
    slots: Sequence[Tuple[:class:`int`, :class:`int`]]
        The (layer, head) pairs to allocate banks for.
    capacity: :class:`int`
        Forwarded to every bank.
    stride: :class:`int`
        Forwarded to every bank.
    """
    __slots__ = ('capacity', 'stride', '_banks')

    def __init__(self, slots: Sequence[SlotKey], capacity: int, stride: int):
        self.capacity: int = capacity
        self.stride: int = stride
        self._banks: Dict[SlotKey, MemoryBank] = {slot: MemoryBank(capacity, stride, slot) for slot in sorted(slots)}

    def __len__(self) -> int:
        return len(self._banks)

    def __iter__(self) -> Iterator[SlotKey]:
        return iter(self._banks)

    def __getitem__(self, slot: SlotKey) -> MemoryBank:
        return self._banks[slot]

    def items(self):
        return self._banks.items()

    def push_all(self, step: int, batches: Mapping[SlotKey, Tuple[np.ndarray, np.ndarray]]) -> bool:
        """
        Pushes one batch into every bank.

        Parameters
        ----------
        step: :class:`int`
            The training step.
        batches: Mapping[Tuple[:class:`int`, :class:`int`], Tuple[:class:`numpy.ndarray`, :class:`numpy.ndarray`]]
            The keys and values for every bank of the grid.

        Raises
        ------
        :class:`ContractError`
            If a bank of the grid has no batch, or the banks disagree on whether a refresh is due.

        Returns
        -------
        :class:`bool`
            Whether a refresh is due.
        """
        missing = set(self._banks) - set(batches)

        if missing:
            raise ContractError(f'No batch given for banks {sorted(missing)}')

        flags = {self._banks[slot].push_batch(step, *batches[slot]) for slot in self._banks}

        if len(flags) > 1:
            raise ContractError(f'Banks disagree on the refresh schedule at step {step}')

        return bool(flags and flags.pop())

    def mark_all_refreshed(self):
        for bank in self._banks.values():
            bank.mark_refreshed()

    def slide_all(self, stride: Optional[int] = None):
        for bank in self._banks.values():
            bank.slide(stride)

    def clear(self):
        for bank in self._banks.values():
            bank.clear()
