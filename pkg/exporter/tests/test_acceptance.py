"""Acceptance: every exported file must round-trip through the consumer
package's tensor reader, and corrupted headers must be rejected by it.

These tests import the consumer (oodseg) on purpose — the file format is
the only interface between the two packages, and this is where the two
sides are held to it.
"""

import struct

import numpy as np
import pytest
from oodseg import tensorio

from oodsexport import ExportJob, export
from oodsexport.cli import main
from oodsexport.models import RandomStub
from oodsexport.wire import TileGeometry


def test_a11_exporter_round_trip(tmp_path):
    tiles = tmp_path / "tiles"
    tiles.mkdir()
    for name in ("s01.png", "s02.png"):
        (tiles / name).write_bytes(name.encode())

    # default full-size geometry through the command line: 36 shifts per tile
    const_out = tmp_path / "const"
    rc = main([
        "export", "--model", "constant:dim=4,classes=3,value=0.1",
        "--tiles", str(tiles), "--out", str(const_out),
        "--tile-size", "672", "--inner", "252",
    ])
    assert rc == 0

    kinds = {"features": "feature", "logits": "logit", "probs": "prob"}
    files = sorted(const_out.glob("*.oods"))
    assert len(files) == 2 * 36 * 3
    for path in files:
        tf = tensorio.read_tensor(path)
        payload = path.name.rsplit(".", 2)[-2]
        assert tf.kind == kinds[payload]
        assert tf.values.dtype == np.float32
        expected_channels = {"features": 4, "logits": 3, "probs": 3}[payload]
        assert tf.values.shape == (expected_channels, 18, 18)
    feat = tensorio.read_tensor(const_out / "s01.x084.y420.features.oods")
    # float32-exact: the file holds the exact f32 cast of the declared value
    assert np.all(feat.values == np.float32(0.1))

    # random stub: values round-trip bit for bit, and a re-export under the
    # same seed is byte-identical
    rand_out = tmp_path / "rand"
    geometry = TileGeometry()
    job = ExportJob(
        model="random:dim=6,classes=4,seed=11",
        tiles_dir=str(tiles),
        out_dir=str(rand_out),
        geometry=geometry,
    )
    result = export(job)
    stub = RandomStub(dim=6, classes=4, seed=11)
    for sx, sy in ((0, 0), (84, 168), (420, 420)):
        tf = tensorio.read_tensor(rand_out / f"s02.x{sx:03d}.y{sy:03d}.features.oods")
        expected, _ = stub.apply("s02", b"", (sx, sy), 18)
        np.testing.assert_array_equal(tf.values, expected)
        assert tf.values.dtype == np.float32

    again = tmp_path / "rand_again"
    export(ExportJob(
        model="random:dim=6,classes=4,seed=11",
        tiles_dir=str(tiles),
        out_dir=str(again),
        geometry=geometry,
    ))
    for fname in result.files:
        assert (rand_out / fname).read_bytes() == (again / fname).read_bytes()

    # deliberate dim corruption: bump the channel count in the header; the
    # consumer must refuse the file rather than misread the payload
    victim = rand_out / "s01.x000.y000.features.oods"
    data = bytearray(victim.read_bytes())
    (channels,) = struct.unpack_from("<I", data, 11)
    assert channels == 6
    struct.pack_into("<I", data, 11, channels + 1)
    grown = tmp_path / "grown.oods"
    grown.write_bytes(bytes(data))
    with pytest.raises(tensorio.TensorFormatError, match="truncated"):
        tensorio.read_tensor(grown)

    struct.pack_into("<I", data, 11, channels - 1)
    shrunk = tmp_path / "shrunk.oods"
    shrunk.write_bytes(bytes(data))
    with pytest.raises(tensorio.TensorFormatError, match="trailing"):
        tensorio.read_tensor(shrunk)
