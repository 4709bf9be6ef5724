import numpy as np
import pytest

from protomem.dataio import DataReader, DataWriter
from protomem.errors import CheckpointError


def test_written_fields_read_back():
    writer = DataWriter()
    writer.write_bytes(b'AB')
    writer.write_u32(70000)
    offset, length = writer.write_f64_array(np.arange(6.0).reshape(2, 3))
    reader = DataReader(writer.to_bytes())

    assert (offset, length) == (6, 48)
    assert reader.read_bytes(2, 'tag') == b'AB'
    assert reader.read_u32('count') == 70000
    np.testing.assert_array_equal(reader.read_f64_array((2, 3), 'array'), np.arange(6.0).reshape(2, 3))
    assert reader.remaining == 0


def test_u32_is_little_endian():
    writer = DataWriter()
    writer.write_u32(1)

    assert writer.to_bytes() == b'\x01\x00\x00\x00'


def test_truncated_reads_name_the_field():
    reader = DataReader(b'\x01\x02')

    with pytest.raises(CheckpointError) as info:
        reader.read_u32('version')

    assert info.value.field == 'version'
    assert reader.position == 0
