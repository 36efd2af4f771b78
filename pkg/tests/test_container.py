import struct

import numpy as np
import pytest

from src.container import MAGIC, decode_container, encode_container, read_container, write_container
from src.errors import ContainerError


class TestContainer:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        tensors = {
            "meta/shape": np.array([8.0, 8.0]),
            "data/000001": rng.standard_normal(64),
            "weights": rng.standard_normal((3, 4, 2)),
            "scalar": np.array(np.pi),
        }
        write_container(tmp_path / "c.amp", tensors)
        loaded = read_container(tmp_path / "c.amp")
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert loaded[name].shape == value.shape
            np.testing.assert_array_equal(loaded[name], value)
            assert loaded[name].tobytes() == value.tobytes()

    def test_layout(self):
        blob = encode_container({"ab": np.array([1.5, -2.0])})
        assert blob[:4] == MAGIC
        assert struct.unpack("<I", blob[4:8]) == (1,)
        assert struct.unpack("<H", blob[8:10]) == (2,)
        assert blob[10:12] == b"ab"
        assert struct.unpack("<BQ", blob[12:21]) == (1, 2)
        assert struct.unpack("<2d", blob[21:37]) == (1.5, -2.0)
        assert len(blob) == 37

    def test_bad_magic(self):
        with pytest.raises(ContainerError, match="magic"):
            decode_container(b"AMP2" + b"\x00" * 4)

    def test_truncated_payload(self):
        blob = encode_container({"x": np.arange(5.0)})
        with pytest.raises(ContainerError):
            decode_container(blob[:-3])

    def test_truncated_header(self):
        blob = encode_container({"x": np.arange(5.0)})
        with pytest.raises(ContainerError):
            decode_container(blob[:9])

    def test_dims_overflowing_the_buffer(self):
        name = b"x"
        blob = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + name + struct.pack("<BQQ", 2, 2 ** 40, 2 ** 40)
        with pytest.raises(ContainerError, match="overflow"):
            decode_container(blob + b"\x00" * 16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_container(tmp_path / "missing.amp")
