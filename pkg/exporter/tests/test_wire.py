"""Writer bytes verified against an independent struct-level parse."""

import struct

import numpy as np
import pytest

from oodsexport import wire


def parse(data):
    """Hand-rolled header parse, deliberately separate from the writer."""
    assert data[:4] == b"OODS"
    version, dtype, kind, rank = struct.unpack_from("<IBBB", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 11)
    payload = data[11 + 4 * rank :]
    return version, dtype, kind, rank, dims, payload


class TestEncode:
    def test_header_fields_and_size(self):
        # 2x2 float32 zeros: 4 magic + 4 version + 1 dtype + 1 kind + 1 rank
        # + 8 dims + 16 payload = 35 bytes
        data = wire.encode_f32(np.zeros((2, 2), dtype=np.float32), wire.KIND_FEATURE)
        assert len(data) == 35
        version, dtype, kind, rank, dims, payload = parse(data)
        assert version == 1
        assert dtype == wire.DTYPE_FLOAT32
        assert kind == wire.KIND_FEATURE
        assert rank == 2
        assert dims == (2, 2)
        assert payload == b"\x00" * 16

    def test_payload_is_row_major_little_endian(self):
        values = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        _, _, _, _, dims, payload = parse(wire.encode_f32(values, wire.KIND_LOGIT))
        assert np.frombuffer(payload, dtype="<f4").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rank3_dims_in_order(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((5, 3, 4)).astype(np.float32)
        data = wire.encode_f32(values, wire.KIND_PROB)
        _, _, kind, rank, dims, payload = parse(data)
        assert (kind, rank, dims) == (wire.KIND_PROB, 3, (5, 3, 4))
        back = np.frombuffer(payload, dtype="<f4").reshape(5, 3, 4)
        np.testing.assert_array_equal(back, values)

    def test_float64_input_is_cast_to_float32(self):
        data = wire.encode_f32(np.array([[0.1, 0.2]]), wire.KIND_FEATURE)
        _, dtype, _, _, _, payload = parse(data)
        assert dtype == wire.DTYPE_FLOAT32
        assert np.frombuffer(payload, dtype="<f4")[0] == np.float32(0.1)

    def test_rank_1_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            wire.encode_f32(np.zeros(4, dtype=np.float32), wire.KIND_FEATURE)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            wire.encode_f32(np.zeros((2, 2), dtype=np.float32), 9)

    def test_write_reads_back_bytes(self, tmp_path):
        values = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "m.oods"
        wire.write_f32(path, values, wire.KIND_FEATURE)
        assert path.read_bytes() == wire.encode_f32(values, wire.KIND_FEATURE)


class TestGeometry:
    def test_default_matches_downstream(self):
        g = wire.TileGeometry()
        assert (g.tile, g.inner, g.stride, g.latent) == (672, 252, 84, 14)
        assert g.grid_side == 18

    def test_shift_lattice(self):
        shifts = wire.TileGeometry().shifts()
        assert len(shifts) == 36
        assert shifts[0] == (0, 0)
        assert shifts[-1] == (420, 420)
        assert shifts[1] == (84, 0)  # row-major: x varies fastest
        assert all(x % 84 == 0 and y % 84 == 0 for x, y in shifts)

    def test_stride_must_divide_margin(self):
        with pytest.raises(ValueError, match="divide"):
            wire.TileGeometry(tile=672, inner=252, stride=80)

    def test_inner_must_be_smaller(self):
        with pytest.raises(ValueError, match="smaller"):
            wire.TileGeometry(tile=252, inner=252)

    def test_overlap_bound(self):
        # tile >= 3 * inner leaves corner shifts that miss the inner window
        with pytest.raises(ValueError, match="overlaps"):
            wire.TileGeometry(tile=768, inner=256, stride=256, latent=16)

    def test_latent_alignment_required(self):
        with pytest.raises(ValueError, match="latent"):
            wire.TileGeometry(tile=672, inner=250, stride=2, latent=14)
