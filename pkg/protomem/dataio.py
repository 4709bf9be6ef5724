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

Little-endian binary readers and writers for the checkpoint format.
"""
import struct
from io import BytesIO
from typing import Sequence, Tuple

import numpy as np

from .errors import CheckpointError


class DataReader:
    """
    Reads fields from a byte string.

    Every read names the field it is reading, so a truncated stream raises a
    :class:`~protomem.errors.CheckpointError` pointing at that field.
    """
    def __init__(self, data: bytes):
        self._buf = BytesIO(data)
        self._size = len(data)

    @property
    def remaining(self) -> int:
        """ The amount of bytes left to be read. """
        return self._size - self._buf.tell()

    @property
    def position(self) -> int:
        return self._buf.tell()

    def _read(self, count: int, field: str) -> bytes:
        if count < 0 or count > self.remaining:
            raise CheckpointError(field, f'needs {count} bytes but only {self.remaining} remain')
        return self._buf.read(count)

    def read_bytes(self, count: int, field: str) -> bytes:
        """
        Reads ``count`` raw bytes.

        Returns
        -------
        :class:`bytes`
        """
        return self._read(count, field)

    def read_u32(self, field: str) -> int:
        """
        Reads an unsigned 32-bit int.

        Returns
        -------
        :class:`int`
        """
        result, = struct.unpack('<I', self._read(4, field))
        return result

    def read_f64_array(self, shape: Sequence[int], field: str) -> np.ndarray:
        """
        Reads a row-major array of little-endian 64-bit floats.

        Returns
        -------
        :class:`numpy.ndarray`
        """
        count = int(np.prod(shape, dtype=np.int64))
        raw = self._read(count * 8, field)
        return np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(tuple(shape))

    def read_rest(self) -> bytes:
        return self._buf.read()


class DataWriter:
    def __init__(self):
        self._buf = BytesIO()

    def _write(self, data: bytes):
        self._buf.write(data)

    def write_bytes(self, data: bytes):
        """
        Writes raw bytes.

        Parameters
        ----------
        data: :class:`bytes`
            The bytes to write.
        """
        self._write(data)

    def write_u32(self, integer: int):
        """
        Writes an unsigned 32-bit int.

        Parameters
        ----------
        integer: :class:`int`
            The int to write.
        """
        self._write(struct.pack('<I', integer))

    def write_f64_array(self, array: np.ndarray) -> Tuple[int, int]:
        """
        Writes an array as row-major little-endian 64-bit floats.

        Parameters
        ----------
        array: :class:`numpy.ndarray`
            The array to write.

        Returns
        -------
        Tuple[:class:`int`, :class:`int`]
            The offset the array was written at and its length in bytes.
        """
        offset = self._buf.tell()
        raw = np.ascontiguousarray(array, dtype='<f8').tobytes()
        self._write(raw)
        return offset, len(raw)

    def to_bytes(self) -> bytes:
        return self._buf.getvalue()
