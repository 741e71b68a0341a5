import numpy as np
import pytest

from oodsexport.models import ConstantStub, RandomStub, resolve_model


class TestReferenceGrammar:
    def test_bare_names(self):
        assert isinstance(resolve_model("constant"), ConstantStub)
        assert isinstance(resolve_model("random"), RandomStub)

    def test_defaults(self):
        m = resolve_model("constant")
        assert (m.dim, m.classes, m.value) == (8, 3, 0.5)
        r = resolve_model("random")
        assert (r.dim, r.classes, r.seed) == (8, 3, 0)

    def test_parameters_parse(self):
        m = resolve_model("constant:dim=4,classes=5,value=0.25")
        assert (m.dim, m.classes, m.value) == (4, 5, 0.25)
        r = resolve_model("random:seed=7,dim=16")
        assert (r.seed, r.dim) == (7, 16)

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown model reference"):
            resolve_model("dinov2")

    def test_malformed_parameter(self):
        with pytest.raises(ValueError, match="key=value"):
            resolve_model("constant:dim")

    def test_unknown_parameter(self):
        with pytest.raises(ValueError, match="unknown model parameter"):
            resolve_model("constant:width=3")

    def test_wrong_parameter_for_model(self):
        # value belongs to the constant stub only
        with pytest.raises(ValueError, match="does not take"):
            resolve_model("random:value=1.0")

    def test_degenerate_channel_counts(self):
        with pytest.raises(ValueError, match="feature channel"):
            resolve_model("constant:dim=0")
        with pytest.raises(ValueError, match="logit channel"):
            resolve_model("random:classes=1")


class TestConstantStub:
    def test_emits_declared_shapes_and_value(self):
        m = ConstantStub(dim=4, classes=3, value=0.25)
        features, logits = m.apply("t0", b"", (0, 0), 18)
        assert features.shape == (4, 18, 18) and features.dtype == np.float32
        assert logits.shape == (3, 18, 18) and logits.dtype == np.float32
        assert np.all(features == np.float32(0.25))
        assert np.all(logits == 0.0)

    def test_content_independent(self):
        m = ConstantStub()
        a, _ = m.apply("t0", b"abc", (84, 0), 18)
        b, _ = m.apply("t1", b"xyz", (0, 84), 18)
        np.testing.assert_array_equal(a, b)


class TestRandomStub:
    def test_deterministic_per_tile_and_shift(self):
        a = RandomStub(seed=3).apply("tile_a", b"", (84, 168), 18)
        b = RandomStub(seed=3).apply("tile_a", b"", (84, 168), 18)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_streams_differ_across_tiles_shifts_seeds(self):
        base, _ = RandomStub(seed=3).apply("tile_a", b"", (0, 0), 18)
        other_tile, _ = RandomStub(seed=3).apply("tile_b", b"", (0, 0), 18)
        other_shift, _ = RandomStub(seed=3).apply("tile_a", b"", (84, 0), 18)
        other_seed, _ = RandomStub(seed=4).apply("tile_a", b"", (0, 0), 18)
        assert not np.array_equal(base, other_tile)
        assert not np.array_equal(base, other_shift)
        assert not np.array_equal(base, other_seed)

    def test_ignores_tile_bytes(self):
        # identity comes from the tile id, not the pixel payload
        a, _ = RandomStub(seed=0).apply("t", b"one", (0, 0), 6)
        b, _ = RandomStub(seed=0).apply("t", b"two", (0, 0), 6)
        np.testing.assert_array_equal(a, b)
