"""Patch classification, multiscale similarity, re-ranking, offset/visibility."""

import numpy as np
import pytest

import streamtrack.tensor as T
from streamtrack.encoder import Encoder, build_pyramid
from streamtrack.errors import ParameterError
from streamtrack.nn import ParamRegistry
from streamtrack.prediction import (MultiscaleSimilarity, OffsetHead, QueryDecoder,
                                    Reranker, VisibilityHead, classify_patch,
                                    topk_patches)
from streamtrack.tensor import Tensor
from tests.conftest import tiny_config
from tests.test_tensor import bilinear_oracle


def setup_stack(seed=0, **cfg_over):
    cfg = tiny_config(**cfg_over)
    reg = ParamRegistry(np.random.default_rng(seed))
    enc = Encoder(reg, cfg)
    rng = np.random.default_rng(seed + 100)
    fmap = enc.encode_frames(rng.uniform(0, 1, (1, *cfg.frame_hw, 3)))
    return cfg, reg, enc, fmap, rng


class TestClassifyPatch:
    def test_one_hot_similarity_sharp_softmax(self):
        raw = np.zeros((1, 1, 256))
        raw[0, 0, 83] = 1.0
        c, _, idx, _ = classify_patch(Tensor(raw), 0.05, (16, 16), 4)
        assert idx[0, 0] == 83
        # frozen from a 50-digit mpmath evaluation
        np.testing.assert_allclose(c.data[0, 0, 83], 0.9999994744061025, rtol=1e-12)
        assert c.data[0, 0, 83] > 0.99

    def test_uniform_map_ties_break_low(self):
        raw = np.zeros((1, 1, 16))
        c, _, idx, _ = classify_patch(Tensor(raw), 0.05, (4, 4), 4)
        np.testing.assert_allclose(c.data, 1.0 / 16, atol=1e-12)
        assert idx[0, 0] == 0

    def test_patch_center_arithmetic(self):
        raw = np.zeros((1, 1, 256))
        raw[0, 0, 5 * 16 + 3] = 2.0  # grid (x=3, y=5) on a 16-wide grid
        _, _, idx, centers = classify_patch(Tensor(raw), 0.05, (16, 16), 4)
        assert idx[0, 0] == 83
        np.testing.assert_array_equal(centers[0, 0], [14.0, 22.0])

    def test_rows_sum_to_one_and_argmax_temperature_invariant(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((2, 3, 16))
        for tau in (0.05, 0.7, 3.0):
            c, _, idx, _ = classify_patch(Tensor(raw), tau, (4, 4), 4)
            np.testing.assert_allclose(c.data.sum(-1), 1.0, atol=1e-9)
            np.testing.assert_array_equal(idx, np.argmax(raw, axis=-1))

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            classify_patch(Tensor(np.zeros((1, 1, 4))), 0.0, (2, 2), 4)


class TestMultiscaleSimilarity:
    def test_self_similarity_is_global_max(self):
        cfg, reg, enc, fmap, rng = setup_stack(2)
        sim = MultiscaleSimilarity(reg, cfg)
        sim.alphas.data[:] = [1.0, 0.0, 0.0, 0.0]
        q = Tensor(fmap.h.data[:, 2, 3, :][:, None, :])  # one level-0 cell's feature
        raw = sim(q, fmap.h_pyramid).data[0, 0]
        gh, gw = fmap.grid_hw
        flat = 2 * gw + 3
        np.testing.assert_allclose(raw[flat], 1.0, atol=1e-12)
        assert raw.argmax() == flat

    def test_coarsest_level_only_is_upsampled_map(self):
        cfg, reg, enc, fmap, rng = setup_stack(3)
        sim = MultiscaleSimilarity(reg, cfg)
        sim.alphas.data[:] = [0.0, 0.0, 0.0, 1.0]
        q = Tensor(rng.standard_normal((1, 1, cfg.dim)))
        raw = sim(q, fmap.h_pyramid).data[0, 0]
        # the coarsest level of a 4x4 grid is a single cell: constant map
        coarse = fmap.h_pyramid[-1]
        assert coarse.shape[1] == coarse.shape[2] == 1
        np.testing.assert_allclose(raw, raw[0], atol=1e-12)

    def test_against_per_level_loop_oracle(self):
        cfg, reg, enc, fmap, rng = setup_stack(4)
        sim = MultiscaleSimilarity(reg, cfg)
        sim.alphas.data[:] = rng.standard_normal(4)
        q_arr = rng.standard_normal((1, 2, cfg.dim))
        got = sim(Tensor(q_arr), fmap.h_pyramid).data
        gh, gw = fmap.grid_hw
        expect = np.zeros((1, 2, gh * gw))
        for ni in range(2):
            qv = q_arr[0, ni]
            qn = qv / np.linalg.norm(qv)
            for lv, hmap in enumerate(fmap.h_pyramid):
                cells = hmap.data[0]
                hl, wl, d = cells.shape
                level_map = np.zeros((hl, wl))
                for yy in range(hl):
                    for xx in range(wl):
                        v = cells[yy, xx]
                        nv = np.linalg.norm(v)
                        level_map[yy, xx] = 0.0 if nv < 1e-12 else qn @ (v / nv)
                up = T.bilinear_resize(Tensor(level_map[None, :, :, None]), (gh, gw)).data
                expect[0, ni] += sim.alphas.data[lv] * up[0, :, :, 0].reshape(-1)
        assert np.abs(got - expect).max() < 1e-10

    def test_zero_norm_cell_gives_zero_cosine(self):
        cfg, reg, enc, fmap, rng = setup_stack(5)
        sim = MultiscaleSimilarity(reg, cfg)
        sim.alphas.data[:] = [1.0, 0.0, 0.0, 0.0]
        pyr = [Tensor(np.zeros_like(fmap.h_pyramid[0].data))] + fmap.h_pyramid[1:]
        q = Tensor(rng.standard_normal((1, 1, cfg.dim)))
        raw = sim(q, pyr).data
        np.testing.assert_array_equal(raw, np.zeros_like(raw))


class TestTopK:
    def test_tie_break_to_lower_index(self):
        vals = np.array([[[9.0, 7.0, 7.0, 1.0]]])
        np.testing.assert_array_equal(topk_patches(vals, 2)[0, 0], [0, 1])

    def test_k_one_is_argmax(self):
        rng = np.random.default_rng(6)
        vals = rng.standard_normal((2, 3, 16))
        np.testing.assert_array_equal(topk_patches(vals, 1)[..., 0], vals.argmax(-1))

    def test_k_too_large_rejected(self):
        with pytest.raises(ParameterError):
            topk_patches(np.zeros((1, 1, 4)), 5)


class TestReranker:
    def test_shapes_and_candidate_set(self):
        cfg, reg, enc, fmap, rng = setup_stack(7)
        rr = Reranker(reg, cfg)
        q_dec = Tensor(rng.standard_normal((1, 2, cfg.dim)))
        c_dec = rng.uniform(0, 1, (1, 2, cfg.num_patches))
        q_t, u_top, idx, q_topf = rr(q_dec, fmap, c_dec, 2)
        assert q_t.shape == (1, 2, cfg.dim)
        assert u_top.shape == (1, 2, 2)
        assert idx.shape == (1, 2, 2)
        np.testing.assert_array_equal(idx[..., 0], c_dec.argmax(-1))

    def test_paper_default_k16_runs(self):
        cfg, reg, enc, fmap, rng = setup_stack(8, topk=16)
        rr = Reranker(reg, cfg)
        q_dec = Tensor(rng.standard_normal((1, 1, cfg.dim)))
        c_dec = rng.uniform(0, 1, (1, 1, cfg.num_patches))
        q_t, u_top, idx, _ = rr(q_dec, fmap, c_dec, 16)  # k = P = 16 here
        assert u_top.shape == (1, 1, 16)
        assert sorted(idx[0, 0].tolist()) == list(range(16))


class TestOffsetHead:
    def test_zero_init_gives_zero_offsets(self):
        cfg, reg, enc, fmap, rng = setup_stack(9)
        head = OffsetHead(reg, cfg)
        q = Tensor(rng.standard_normal((1, 2, cfg.dim)))
        centers = np.array([[[6.0, 6.0], [10.0, 2.0]]])
        outs = head(q, fmap, centers)
        assert len(outs) == 3
        for o in outs:
            np.testing.assert_array_equal(o.data, np.zeros((1, 2, 2)))

    def test_offsets_bounded_by_stride(self):
        cfg, reg, enc, fmap, rng = setup_stack(10)
        head = OffsetHead(reg, cfg)
        for lin in head.emits:
            lin.w.data[:] = rng.standard_normal(lin.w.data.shape) * 50
            lin.b.data[:] = rng.standard_normal(lin.b.data.shape) * 50
        q = Tensor(rng.standard_normal((1, 4, cfg.dim)) * 10)
        centers = rng.uniform(0, 15, (1, 4, 2))
        for o in head(q, fmap, centers):
            assert np.all(np.abs(o.data) <= cfg.stride)

    def test_closed_form_tanh_half_log3(self):
        # pre-tanh logit of artanh(0.5) = ln(3)/2 with S=4 gives offset 2.0
        cfg, reg, enc, fmap, rng = setup_stack(11)
        head = OffsetHead(reg, cfg)
        logit = 0.5 * np.log(3.0)
        head.emits[-1].w.data[:] = 0.0
        head.emits[-1].b.data[:] = [logit, -logit]
        q = Tensor(rng.standard_normal((1, 1, cfg.dim)))
        out = head(q, fmap, np.array([[[8.0, 8.0]]]))[-1]
        np.testing.assert_allclose(out.data[0, 0], [2.0, -2.0], atol=1e-12)


class TestVisibilityHead:
    def test_zero_heads_give_half(self):
        cfg, reg, enc, fmap, rng = setup_stack(12)
        head = VisibilityHead(reg, cfg)
        head.v_head.w.data[:] = 0.0
        head.v_head.b.data[:] = 0.0
        head.u_head.w.data[:] = 0.0
        head.u_head.b.data[:] = 0.0
        q = Tensor(rng.standard_normal((1, 2, cfg.dim)))
        p_hat = Tensor(rng.uniform(0, 15, (1, 2, 2)))
        v_logit, u_logit = head(q, fmap, p_hat)
        np.testing.assert_array_equal(v_logit.data, np.zeros((1, 2)))
        np.testing.assert_array_equal(u_logit.data, np.zeros((1, 2)))
        np.testing.assert_allclose(1 / (1 + np.exp(-v_logit.data)), 0.5)

    def test_mlp_variant_ignores_location(self):
        cfg, reg, enc, fmap, rng = setup_stack(13, visibility_mlp=True)
        head = VisibilityHead(reg, cfg)
        q = Tensor(rng.standard_normal((1, 2, cfg.dim)))
        v1, u1 = head(q, fmap, Tensor(np.full((1, 2, 2), 3.0)))
        v2, u2 = head(q, fmap, Tensor(np.full((1, 2, 2), 12.0)))
        np.testing.assert_array_equal(v1.data, v2.data)
        np.testing.assert_array_equal(u1.data, u2.data)

    def test_deformable_variant_depends_on_location(self):
        cfg, reg, enc, fmap, rng = setup_stack(14)
        head = VisibilityHead(reg, cfg)
        head.block.attn.w_wgt.w.data[:] = rng.standard_normal(
            head.block.attn.w_wgt.w.data.shape)
        q = Tensor(rng.standard_normal((1, 2, cfg.dim)))
        v1, _ = head(q, fmap, Tensor(np.full((1, 2, 2), 3.0)))
        v2, _ = head(q, fmap, Tensor(np.full((1, 2, 2), 12.0)))
        assert np.abs(v1.data - v2.data).max() > 1e-9


class TestQueryDecoder:
    def test_identity_at_zero_residual_init(self):
        cfg, reg, enc, fmap, rng = setup_stack(15)
        dec = QueryDecoder(reg, cfg)
        for blk in dec.blocks:
            for sub in (blk.cross.attn.wo, blk.self_block.attn.wo,
                        blk.cross.ffn.lin2, blk.self_block.ffn.lin2):
                sub.w.data[:] = 0.0
                sub.b.data[:] = 0.0
        q = rng.standard_normal((1, 2, cfg.dim))
        out = dec(Tensor(q), fmap)
        np.testing.assert_array_equal(out.data, q)

    def test_single_query_matches_block_composition_oracle(self):
        cfg, reg, enc, fmap, rng = setup_stack(16)
        dec = QueryDecoder(reg, cfg)
        q = Tensor(rng.standard_normal((1, 1, cfg.dim)))
        got = dec(q, fmap).data
        gh, gw = fmap.grid_hw
        kv = T.reshape(fmap.f, (1, gh * gw, cfg.dim))
        x = q
        for blk in dec.blocks:
            x = blk.cross(x, kv)
            x = blk.self_block(x)
        np.testing.assert_array_equal(got, x.data)

    def test_inactive_queries_do_not_leak_into_active(self):
        cfg, reg, enc, fmap, rng = setup_stack(17)
        dec = QueryDecoder(reg, cfg)
        q1 = rng.standard_normal((1, 3, cfg.dim))
        q2 = q1.copy()
        q2[0, 2, 1] += 5.0  # inactive row differs
        mask = np.array([[False, False, True]])
        o1 = dec(Tensor(q1), fmap, self_mask=mask).data
        o2 = dec(Tensor(q2), fmap, self_mask=mask).data
        np.testing.assert_array_equal(o1[0, :2], o2[0, :2])
