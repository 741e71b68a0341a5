"""Binary container: byte layout, round trips, and malformed-input rejection."""

import numpy as np
import pytest

from oodseg import tensorio
from oodseg.tensorio import TensorFile, TensorFormatError, decode, encode


def random_tensor(rng):
    rank = int(rng.integers(2, 4))
    shape = tuple(int(rng.integers(1, 7)) for _ in range(rank))
    dtype = rng.choice([np.float32, np.int32, np.float64])
    if dtype == np.int32:
        values = rng.integers(-1000, 1000, size=shape).astype(np.int32)
    else:
        values = rng.standard_normal(shape).astype(dtype)
    kind = str(rng.choice(list(tensorio.KIND_CODES)))
    return TensorFile(values=values, kind=kind)


class TestLayout:
    def test_header_size_2x2_float32(self):
        """magic(4) + version(4) + dtype(1) + kind(1) + rank(1) + dims(2*4) + payload(16)."""
        data = encode(TensorFile(np.zeros((2, 2), dtype=np.float32)))
        assert len(data) == 4 + 4 + 1 + 1 + 1 + 8 + 16 == 35

    def test_magic_and_little_endian_dims(self):
        data = encode(TensorFile(np.zeros((3, 5), dtype=np.float32)))
        assert data[:4] == b"OODS"
        # dims start after magic + version + dtype + kind + rank
        assert int.from_bytes(data[11:15], "little") == 3
        assert int.from_bytes(data[15:19], "little") == 5

    def test_payload_is_row_major(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        data = encode(TensorFile(arr))
        payload = np.frombuffer(data[-24:], dtype="<f4")
        np.testing.assert_array_equal(payload, np.arange(6, dtype=np.float32))


class TestRoundTrip:
    def test_bit_exact_random(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            tf = random_tensor(rng)
            back = decode(encode(tf))
            assert back.kind == tf.kind
            assert back.values.dtype == tf.values.dtype
            np.testing.assert_array_equal(back.values, tf.values)
            # re-encoding is byte-identical
            assert encode(back) == encode(tf)

    def test_file_round_trip(self, tmp_path):
        arr = np.arange(24, dtype=np.int32).reshape(2, 3, 4)
        path = tmp_path / "map.oods"
        tensorio.write_tensor(path, arr, kind="label")
        back = tensorio.read_tensor(path)
        assert back.kind == "label"
        np.testing.assert_array_equal(back.values, arr)

    def test_float64_payload(self):
        arr = np.array([[1.0, 1e-300], [np.pi, -0.0]])
        back = decode(encode(TensorFile(arr, kind="stats")))
        np.testing.assert_array_equal(back.values, arr)
        assert back.values.dtype == np.float64


class TestRejection:
    def valid(self):
        return encode(TensorFile(np.ones((2, 2), dtype=np.float32), kind="score"))

    def test_bad_magic(self):
        data = b"XXXX" + self.valid()[4:]
        with pytest.raises(TensorFormatError, match="bad magic"):
            decode(data)

    def test_truncated_payload(self):
        with pytest.raises(TensorFormatError, match="truncated"):
            decode(self.valid()[:-3])

    def test_truncated_header(self):
        with pytest.raises(TensorFormatError, match="truncated"):
            decode(self.valid()[:9])

    def test_trailing_data(self):
        with pytest.raises(TensorFormatError, match="trailing"):
            decode(self.valid() + b"\x00")

    def test_unknown_dtype_code(self):
        data = bytearray(self.valid())
        data[8] = 9  # dtype byte
        with pytest.raises(TensorFormatError, match="unknown dtype"):
            decode(bytes(data))

    def test_unknown_kind_code(self):
        data = bytearray(self.valid())
        data[9] = 200
        with pytest.raises(TensorFormatError, match="unknown kind"):
            decode(bytes(data))

    def test_unsupported_rank_on_read(self):
        data = bytearray(self.valid())
        data[10] = 4  # rank byte
        with pytest.raises(TensorFormatError, match="unsupported rank"):
            decode(bytes(data))

    def test_unsupported_rank_on_write(self):
        with pytest.raises(ValueError, match="unsupported rank"):
            TensorFile(np.zeros((2, 2, 2, 2), dtype=np.float32))

    def test_unsupported_source_dtype(self):
        with pytest.raises(ValueError, match="unsupported dtype"):
            TensorFile(np.zeros((2, 2), dtype=np.int64))

    def test_unknown_kind_name(self):
        with pytest.raises(ValueError, match="unknown kind"):
            TensorFile(np.zeros((2, 2), dtype=np.float32), kind="mystery")

    def test_wrong_version(self):
        data = bytearray(self.valid())
        data[4] = 7
        with pytest.raises(TensorFormatError, match="version"):
            decode(bytes(data))


class TestSidecar:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "side.txt"
        tensorio.write_sidecar(path, {"lam": 1e-6 / 3.0, "normalized": True, "counts": "3,4"})
        back = tensorio.read_sidecar(path)
        assert float(back["lam"]) == 1e-6 / 3.0  # repr round-trips floats exactly
        assert back["normalized"] == "True"
        assert back["counts"] == "3,4"

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("just words\n")
        with pytest.raises(ValueError, match="malformed"):
            tensorio.read_sidecar(path)
