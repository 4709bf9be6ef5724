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
import os
from typing import Tuple

import numpy as np

from .errors import ConfigError

THREADS_ENV = 'PMA_THREADS'


def derive_seed(seed: int, *path: int) -> int:
    """
    Derives a child seed from a base seed and a path of integers, such as
    ``(layer, head, refresh_index)``.

    The derivation is stable across processes and platforms.

    Parameters
    ----------
    seed: :class:`int`
        The base seed.
    path: :class:`int`
        Any number of nonnegative integers identifying the consumer.

    Returns
    -------
    :class:`int`
        A 32-bit seed.
    """
    sequence = np.random.SeedSequence([seed, *path])
    return int(sequence.generate_state(1)[0])


def worker_count() -> int:
    """
    The number of workers prototype refreshes may fan out to, read from ``PMA_THREADS``.

    Returns
    -------
    :class:`int`
        At least 1. Defaults to 1 if the variable is unset.
    """
    raw = os.environ.get(THREADS_ENV, '').strip()

    if not raw:
        return 1

    try:
        count = int(raw)
    except ValueError as error:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {raw!r}') from error

    if count < 1:
        raise ConfigError(f'{THREADS_ENV} must be at least 1, got {count}')

    return count


def format_time(seconds: float) -> str:
    """
    Formats the given duration into HH:MM:SS.

    Parameters
    ----------
    seconds: :class:`float`
        The duration in seconds.

    Returns
    -------
    :class:`str`
    """
    hours, remainder = divmod(seconds, 3600)
    minutes, seconds = divmod(remainder, 60)

    return f'{hours:02.0f}:{minutes:02.0f}:{seconds:02.0f}'


def summarize(values: np.ndarray) -> Tuple[float, float, float]:
    """ Returns the (min, mean, max) of the given values, or zeros if there are none. """
    values = np.asarray(values, dtype=np.float64)

    if values.size == 0:
        return 0.0, 0.0, 0.0

    return float(values.min()), float(values.mean()), float(values.max())
