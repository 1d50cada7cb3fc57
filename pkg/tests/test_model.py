"""Two-tower encoder: forward, exact backward, and checkpoint format."""

import numpy as np
import pytest

from relmargin import EmbeddingModel, Tower
from relmargin.model import MAGIC, PARAM_ORDER


def small_model(seed=0):
    return EmbeddingModel.init(f_v=7, f_q=5, h=6, d=4, seed=seed)


class TestInit:
    def test_shapes(self):
        m = small_model()
        assert m.video.W1.shape == (7, 6)
        assert m.video.b1.shape == (6,)
        assert m.text.W1.shape == (5, 6)
        assert m.video.W2.shape == (6, 4)
        assert m.d == 4 and m.h == 6

    def test_deterministic(self):
        a, b = small_model(3), small_model(3)
        assert np.array_equal(a.to_vector(), b.to_vector())
        assert not np.array_equal(a.to_vector(), small_model(4).to_vector())

    def test_fan_in_bounds(self):
        m = small_model(1)
        assert np.all(np.abs(m.video.W1) <= 1.0 / np.sqrt(7))
        assert np.all(np.abs(m.text.W1) <= 1.0 / np.sqrt(5))
        assert np.all(np.abs(m.video.W2) <= 1.0 / np.sqrt(6))

    def test_mismatched_towers_rejected(self):
        m = small_model()
        bad_text = Tower(
            W1=np.zeros((5, 3)), b1=np.zeros(3), W2=np.zeros((3, 4)), b2=np.zeros(4)
        )
        with pytest.raises(ValueError):
            EmbeddingModel(m.video, bad_text)


class TestForward:
    def test_unit_norm_rows(self):
        m = small_model(2)
        rng = np.random.default_rng(0)
        y = m.encode_video(rng.normal(size=(9, 7)))
        assert y.shape == (9, 4)
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_single_row_promoted(self):
        m = small_model(2)
        y = m.encode_text(np.zeros(5))
        assert y.shape == (1, 4)

    def test_sides_differ(self):
        m = small_model(2)
        x = np.ones((1, 5))
        with pytest.raises(ValueError):
            m.encode_video(x)  # video expects 7 dims

    def test_zero_vector_guard(self):
        m = small_model(2)
        m.video.W2[...] = 0.0
        m.video.b2[...] = 0.0
        with pytest.raises(RuntimeError, match="zero vector"):
            m.encode_video(np.ones((1, 7)))

    def test_relu_kills_negative_preactivations(self):
        m = small_model(2)
        cache = m.forward("video", np.random.default_rng(1).normal(size=(4, 7)))
        assert np.all(cache.a1 >= 0.0)
        assert np.array_equal(cache.a1 > 0, cache.z1 > 0)


class TestBackward:
    def test_matches_finite_differences(self):
        """dL/dparams for L = sum(y * G) checked coordinate by coordinate."""
        m = small_model(5)
        rng = np.random.default_rng(7)
        X = rng.normal(size=(3, 7))
        G = rng.normal(size=(3, 4))

        cache = m.forward("video", X)
        grads = m.backward("video", cache, G)

        eps = 1e-6
        for name in ("W1", "b1", "W2", "b2"):
            block = getattr(m.video, name)
            flat = block.ravel()
            for i in range(0, flat.size, 3):  # spot sample every 3rd coordinate
                saved = flat[i]
                flat[i] = saved + eps
                up = float(np.sum(m.forward("video", X).y * G))
                flat[i] = saved - eps
                down = float(np.sum(m.forward("video", X).y * G))
                flat[i] = saved
                numeric = (up - down) / (2 * eps)
                assert grads[name].ravel()[i] == pytest.approx(numeric, abs=1e-6)

    def test_tangent_projection_kills_radial_component(self):
        # gradient along y itself must vanish after normalization
        m = small_model(5)
        X = np.random.default_rng(3).normal(size=(2, 7))
        cache = m.forward("video", X)
        grads = m.backward("video", cache, cache.y.copy())
        for name in ("W1", "b1", "W2", "b2"):
            assert np.allclose(grads[name], 0.0, atol=1e-12)


class TestParamVector:
    def test_round_trip(self):
        m = small_model(6)
        vec = m.to_vector()
        assert vec.size == m.n_params
        other = small_model(0)
        other.set_vector(vec)
        assert np.array_equal(other.to_vector(), vec)

    def test_rejects_wrong_length(self):
        m = small_model(6)
        with pytest.raises(ValueError):
            m.set_vector(np.zeros(m.n_params + 1))

    def test_param_order_covers_both_towers(self):
        sides = [side for side, _ in PARAM_ORDER]
        assert sides == ["video"] * 4 + ["text"] * 4

    def test_copy_is_independent(self):
        m = small_model(6)
        c = m.copy()
        c.video.W1[...] += 1.0
        assert not np.array_equal(m.video.W1, c.video.W1)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        m = small_model(8)
        path = tmp_path / "model.bin"
        m.save(path)
        loaded = EmbeddingModel.load(path)
        assert np.array_equal(loaded.to_vector(), m.to_vector())
        assert (loaded.f_v, loaded.f_q, loaded.h, loaded.d) == (7, 5, 6, 4)

    def test_save_is_deterministic(self, tmp_path):
        m = small_model(8)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        m.save(p1)
        m.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_is_checked(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"WRONG" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            EmbeddingModel.load(path)

    def test_truncation_is_detected(self, tmp_path):
        m = small_model(8)
        path = tmp_path / "model.bin"
        m.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            EmbeddingModel.load(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        m = small_model(8)
        path = tmp_path / "model.bin"
        m.save(path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ValueError):
            EmbeddingModel.load(path)

    def test_header_layout(self, tmp_path):
        m = small_model(8)
        path = tmp_path / "model.bin"
        m.save(path)
        raw = path.read_bytes()
        assert raw[: len(MAGIC)] == MAGIC
        dims = np.frombuffer(raw[len(MAGIC) : len(MAGIC) + 16], dtype="<u4")
        assert list(dims) == [7, 5, 6, 4]
        assert len(raw) == len(MAGIC) + 16 + 8 * m.n_params
