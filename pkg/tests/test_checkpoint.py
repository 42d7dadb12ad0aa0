import struct

import numpy as np
import pytest

from ghnforge.checkpoint import FORMAT_VERSION, MAGIC, read_records, write_records
from ghnforge.errors import IoError


def test_records_keep_order_and_values(tmp_path):
    path = tmp_path / "x.bin"
    records = [("b", np.arange(6, dtype=np.float32).reshape(2, 3)), ("a", np.ones(4))]
    write_records(path, "paramset", records, {"note": "hi"})
    meta, loaded = read_records(path, "paramset")
    assert meta == {"note": "hi"}
    assert [name for name, _ in loaded] == ["b", "a"]
    np.testing.assert_array_equal(loaded[0][1], records[0][1])
    assert loaded[1][1].dtype == np.float32


def test_wrong_kind(tmp_path):
    path = tmp_path / "x.bin"
    write_records(path, "paramset", [], {})
    with pytest.raises(IoError):
        read_records(path, "ghn")


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(IoError):
        read_records(path, "paramset")

    write_records(path, "paramset", [], {})
    raw = bytearray(path.read_bytes())
    raw[:8] = struct.pack("<4sI", MAGIC, FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(IoError):
        read_records(path, "paramset")


def test_truncated(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"GH")
    with pytest.raises(IoError):
        read_records(path, "paramset")
