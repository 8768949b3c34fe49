"""Visual encoder: shape contract, determinism, query initialization."""

import numpy as np
import pytest

from streamtrack.config import ModelConfig
from streamtrack.encoder import Encoder
from streamtrack.errors import InputError
from streamtrack.nn import ParamRegistry
from streamtrack.tensor import Tensor
from tests.conftest import tiny_config
from tests.test_tensor import bilinear_oracle


def make_encoder(cfg=None, seed=0):
    cfg = cfg or tiny_config()
    reg = ParamRegistry(np.random.default_rng(seed))
    return Encoder(reg, cfg), cfg


class TestEncodeFrame:
    def test_shapes_at_default_scale(self):
        cfg = ModelConfig()  # 64x64, S=4, D=64
        enc, _ = make_encoder(cfg)
        img = np.random.default_rng(0).uniform(0, 1, (1, 64, 64, 3))
        fmap = enc.encode_frames(img)
        assert fmap.f.shape == (1, 16, 16, 64)
        assert fmap.h.shape == (1, 16, 16, 64)
        assert [m.shape[1] for m in fmap.h_pyramid] == [16, 8, 4, 2]
        assert [m.shape[2] for m in fmap.h_pyramid] == [16, 8, 4, 2]

    def test_deterministic(self):
        enc, cfg = make_encoder()
        img = np.random.default_rng(1).uniform(0, 1, (1, *cfg.frame_hw, 3))
        f1 = enc.encode_frames(img)
        f2 = enc.encode_frames(img)
        assert np.array_equal(f1.f.data, f2.f.data)
        assert np.array_equal(f1.h.data, f2.h.data)

    def test_zero_image_gives_positional_embedding(self):
        enc, cfg = make_encoder()
        img = np.zeros((1, *cfg.frame_hw, 3))
        fmap = enc.encode_frames(img)
        gh, gw = cfg.grid_hw
        expected = enc.pos.table.data.reshape(1, gh, gw, cfg.dim)
        np.testing.assert_array_equal(fmap.f.data, expected)

    def test_indivisible_size_rejected(self):
        enc, _ = make_encoder(tiny_config(frame_hw=(16, 16)))
        with pytest.raises(InputError):
            enc.encode_frames(np.zeros((1, 15, 16, 3)))


class TestInitQueries:
    def test_grid_node_exact(self):
        enc, cfg = make_encoder()
        rng = np.random.default_rng(2)
        fmap = enc.encode_frames(rng.uniform(0, 1, (1, *cfg.frame_hw, 3)))
        s = cfg.stride
        q = enc.init_queries(fmap, [(2 * s, 3 * s)])  # exactly on grid node (2,3)
        np.testing.assert_array_equal(q.data[0], fmap.f.data[0, 3, 2])

    def test_duplicate_queries_identical(self):
        enc, cfg = make_encoder()
        rng = np.random.default_rng(3)
        fmap = enc.encode_frames(rng.uniform(0, 1, (1, *cfg.frame_hw, 3)))
        q = enc.init_queries(fmap, [(5.3, 7.7), (5.3, 7.7)])
        np.testing.assert_array_equal(q.data[0], q.data[1])

    def test_subpixel_matches_bilinear_oracle(self):
        enc, cfg = make_encoder()
        rng = np.random.default_rng(4)
        fmap = enc.encode_frames(rng.uniform(0, 1, (1, *cfg.frame_hw, 3)))
        for _ in range(20):
            x, y = rng.uniform(0, cfg.frame_hw[1] - 1), rng.uniform(0, cfg.frame_hw[0] - 1)
            q = enc.init_queries(fmap, [(x, y)]).data[0]
            ref = bilinear_oracle(fmap.f.data[0], x / cfg.stride, y / cfg.stride)
            np.testing.assert_allclose(q, ref, atol=1e-12)

    def test_translation_by_stride_hits_adjacent_node(self):
        enc, cfg = make_encoder()
        rng = np.random.default_rng(5)
        fmap = enc.encode_frames(rng.uniform(0, 1, (1, *cfg.frame_hw, 3)))
        s = cfg.stride
        q0 = enc.init_queries(fmap, [(s, s)]).data[0]
        q1 = enc.init_queries(fmap, [(2 * s, s)]).data[0]
        np.testing.assert_array_equal(q0, fmap.f.data[0, 1, 1])
        np.testing.assert_array_equal(q1, fmap.f.data[0, 1, 2])

    def test_outside_frame_rejected(self):
        enc, cfg = make_encoder()
        fmap = enc.encode_frames(np.zeros((1, *cfg.frame_hw, 3)))
        with pytest.raises(InputError):
            enc.init_queries(fmap, [(-1.0, 2.0)])
        with pytest.raises(InputError):
            enc.init_queries(fmap, [(2.0, cfg.frame_hw[0] + 5.0)])
