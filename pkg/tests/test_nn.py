"""Attention/deformable/decoder blocks against explicit loop oracles."""

import numpy as np
import pytest

import streamtrack.tensor as T
from streamtrack import nn
from streamtrack.errors import ParameterError
from streamtrack.tensor import Tensor


def make_cfg(dim=8, heads=2, levels=2, points=2, layers=3):
    return nn.BlockConfig(dim=dim, heads=heads, ffn_ratio=4, levels=levels,
                          points=points, layers_per_block=layers)


def make_reg(seed=0):
    return nn.ParamRegistry(np.random.default_rng(seed))


def attention_oracle(mha, q, k, v, key_mask=None):
    """Naive per-head loop attention with the module's own weights."""
    wq, bq = mha.wq.w.data, mha.wq.b.data
    wk, bk = mha.wk.w.data, mha.wk.b.data
    wv, bv = mha.wv.w.data, mha.wv.b.data
    wo, bo = mha.wo.w.data, mha.wo.b.data
    nq, nk = q.shape[0], k.shape[0]
    h, dh = mha.heads, mha.dh
    qp, kp, vp = q @ wq + bq, k @ wk + bk, v @ wv + bv
    ctx = np.zeros((nq, mha.dim))
    for i in range(nq):
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            logits = np.array([qp[i, sl] @ kp[j, sl] / np.sqrt(dh) for j in range(nk)])
            if key_mask is not None:
                logits = np.where(key_mask, -np.inf, logits)
            if key_mask is not None and key_mask.all():
                weights = np.zeros(nk)
            else:
                e = np.exp(logits - logits[np.isfinite(logits)].max())
                e[~np.isfinite(logits)] = 0.0
                weights = e / e.sum()
                assert abs(weights.sum() - 1.0) < 1e-9
            for j in range(nk):
                ctx[i, sl] += weights[j] * vp[j, sl]
    out = ctx @ wo + bo
    if key_mask is not None and key_mask.all():
        out[:] = 0.0
    return out


class TestAttention:
    def test_single_key_weight_is_one(self):
        reg = make_reg(1)
        mha = nn.MultiHeadAttention(reg, "a", 8, 2)
        rng = np.random.default_rng(2)
        q = rng.standard_normal((3, 8))
        kv = rng.standard_normal((1, 8))
        out = mha(Tensor(q), Tensor(kv), Tensor(kv)).data
        # with one key the attention weight is exactly 1: output = wo(wv(v))
        expected = (kv @ mha.wv.w.data + mha.wv.b.data) @ mha.wo.w.data + mha.wo.b.data
        np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_duplicated_keys_match_single_copy(self):
        reg = make_reg(3)
        mha = nn.MultiHeadAttention(reg, "a", 8, 2)
        rng = np.random.default_rng(4)
        q = Tensor(rng.standard_normal((2, 8)))
        kv1 = rng.standard_normal((3, 8))
        kv2 = np.concatenate([kv1, kv1], axis=0)
        out1 = mha(q, Tensor(kv1), Tensor(kv1)).data
        out2 = mha(q, Tensor(kv2), Tensor(kv2)).data
        np.testing.assert_allclose(out1, out2, atol=1e-10)

    def test_against_per_head_loop_oracle(self):
        reg = make_reg(5)
        mha = nn.MultiHeadAttention(reg, "a", 8, 2)
        rng = np.random.default_rng(6)
        q = rng.standard_normal((2, 8))
        kv = rng.standard_normal((3, 8))
        got = mha(Tensor(q), Tensor(kv), Tensor(kv)).data
        ref = attention_oracle(mha, q, kv, kv)
        assert np.abs(got - ref).max() < 1e-10

    def test_masked_keys_excluded(self):
        reg = make_reg(7)
        mha = nn.MultiHeadAttention(reg, "a", 8, 2)
        rng = np.random.default_rng(8)
        q = rng.standard_normal((2, 8))
        kv = rng.standard_normal((4, 8))
        mask = np.array([False, True, False, True])
        got = mha(Tensor(q), Tensor(kv), Tensor(kv), key_mask=mask).data
        ref = attention_oracle(mha, q, kv, kv, key_mask=mask)
        assert np.abs(got - ref).max() < 1e-10

    def test_fully_masked_returns_zero(self):
        reg = make_reg(9)
        mha = nn.MultiHeadAttention(reg, "a", 8, 2)
        rng = np.random.default_rng(10)
        q = rng.standard_normal((2, 8))
        kv = rng.standard_normal((3, 8))
        out = mha(Tensor(q), Tensor(kv), Tensor(kv), key_mask=np.ones(3, bool)).data
        np.testing.assert_array_equal(out, np.zeros((2, 8)))


def deformable_oracle(module, q, value_maps, ref_norm, batch_idx):
    """Literal five-nested-loop deformable attention oracle."""
    from tests.test_tensor import bilinear_oracle

    r = q.shape[0]
    h, ll, p = module.heads, module.levels, module.points
    dim = q.shape[1]
    dh = dim // h
    off = (q @ module.w_off.w.data + module.w_off.b.data).reshape(r, h, ll, p, 2)
    logits = (q @ module.w_wgt.w.data + module.w_wgt.b.data).reshape(r, h, ll * p)
    out = np.zeros((r, dim))
    for i in range(r):
        for head in range(h):
            e = np.exp(logits[i, head] - logits[i, head].max())
            w = (e / e.sum()).reshape(ll, p)
            assert abs(w.sum() - 1.0) < 1e-9
            acc = np.zeros(dh)
            for lv in range(ll):
                vmap = value_maps[lv][batch_idx[i]]
                hl, wl = vmap.shape[:2]
                for pt in range(p):
                    x = ref_norm[i, 0] * wl + off[i, head, lv, pt, 0]
                    y = ref_norm[i, 1] * hl + off[i, head, lv, pt, 1]
                    sample = bilinear_oracle(vmap, x, y)[head * dh:(head + 1) * dh]
                    acc += w[lv, pt] * sample
            out[i, head * dh:(head + 1) * dh] = acc
    return out @ module.out_proj.w.data + module.out_proj.b.data


def make_pyramid(rng, bsz, dim, sizes):
    return [rng.standard_normal((bsz, s, s, dim)) for s in sizes]


class TestDeformableAttention:
    def test_degenerate_config_means_levels(self):
        cfg = make_cfg(dim=8, heads=2, levels=2, points=2)
        reg = make_reg(11)
        mod = nn.DeformableAttention(reg, "d", cfg)
        # identity output projection; offsets/weights are zero-initialized
        mod.out_proj.w.data[:] = np.eye(8)
        mod.out_proj.b.data[:] = 0.0
        rng = np.random.default_rng(12)
        maps = make_pyramid(rng, 1, 8, [4, 2])
        ref = np.array([[0.5, 0.25]])
        q = Tensor(rng.standard_normal((1, 8)))
        out = mod(q, [Tensor(m) for m in maps], ref, np.zeros(1, np.int64)).data
        from tests.test_tensor import bilinear_oracle
        expected = np.mean([bilinear_oracle(maps[lv][0], ref[0, 0] * maps[lv].shape[2],
                                            ref[0, 1] * maps[lv].shape[1])
                            for lv in range(2)], axis=0)
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_constant_maps_ignore_offsets(self):
        cfg = make_cfg(dim=8, heads=2, levels=2, points=2)
        reg = make_reg(13)
        mod = nn.DeformableAttention(reg, "d", cfg)
        rng = np.random.default_rng(14)
        mod.w_off.w.data[:] = rng.standard_normal(mod.w_off.w.data.shape)
        mod.w_wgt.w.data[:] = rng.standard_normal(mod.w_wgt.w.data.shape)
        c = rng.standard_normal(8)
        maps = [Tensor(np.broadcast_to(c, (1, s, s, 8)).copy()) for s in (4, 2)]
        q = Tensor(rng.standard_normal((3, 8)))
        out = mod(q, maps, np.full((3, 2), 0.37), np.zeros(3, np.int64)).data
        expected = c @ mod.out_proj.w.data + mod.out_proj.b.data
        np.testing.assert_allclose(out, np.tile(expected, (3, 1)), atol=1e-10)

    def test_against_nested_loop_oracle(self):
        cfg = make_cfg(dim=8, heads=2, levels=2, points=2)
        reg = make_reg(15)
        mod = nn.DeformableAttention(reg, "d", cfg)
        rng = np.random.default_rng(16)
        mod.w_off.w.data[:] = rng.standard_normal(mod.w_off.w.data.shape) * 0.5
        mod.w_off.b.data[:] = rng.standard_normal(mod.w_off.b.data.shape) * 0.5
        mod.w_wgt.w.data[:] = rng.standard_normal(mod.w_wgt.w.data.shape)
        maps = make_pyramid(rng, 2, 8, [5, 3])
        q = rng.standard_normal((4, 8))
        ref = rng.uniform(0.1, 0.9, (4, 2))
        bidx = np.array([0, 1, 0, 1])
        got = mod(Tensor(q), [Tensor(m) for m in maps], ref, bidx).data
        ref_out = deformable_oracle(mod, q, maps, ref, bidx)
        assert np.abs(got - ref_out).max() < 1e-10


class TestDecoderBlock:
    def _zero_residual_outputs(self, block):
        for sub in (block.cross.attn.wo, block.self_block.attn.wo,
                    block.cross.ffn.lin2, block.self_block.ffn.lin2):
            sub.w.data[:] = 0.0
            sub.b.data[:] = 0.0

    def test_identity_at_zero_init(self):
        cfg = make_cfg()
        reg = make_reg(17)
        block = nn.DecoderBlock(reg, "b", cfg)
        self._zero_residual_outputs(block)
        rng = np.random.default_rng(18)
        q = rng.standard_normal((1, 3, 8))
        kv = rng.standard_normal((1, 5, 8))
        out = block(Tensor(q), Tensor(kv)).data
        np.testing.assert_array_equal(out, q)

    def test_single_query_matches_composed_blocks(self):
        cfg = make_cfg()
        reg = make_reg(19)
        block = nn.DecoderBlock(reg, "b", cfg)
        rng = np.random.default_rng(20)
        q = Tensor(rng.standard_normal((1, 1, 8)))
        kv = Tensor(rng.standard_normal((1, 1, 8)))
        got = block(q, kv).data
        mid = block.cross(q, kv)
        ref = block.self_block(mid).data
        np.testing.assert_array_equal(got, ref)

    def test_no_self_attention_means_query_independence(self):
        cfg = make_cfg()
        reg = make_reg(21)
        block = nn.DecoderBlock(reg, "b", cfg)
        rng = np.random.default_rng(22)
        q1 = rng.standard_normal((1, 2, 8))
        q2 = q1.copy()
        q2[0, 1, 3] += 10.0  # perturb one component of the other query
        kv = Tensor(rng.standard_normal((1, 4, 8)))
        o1 = block(Tensor(q1), kv, with_self_attention=False).data
        o2 = block(Tensor(q2), kv, with_self_attention=False).data
        np.testing.assert_array_equal(o1[0, 0], o2[0, 0])
        # and with self-attention they interact
        o3 = block(Tensor(q1), kv, with_self_attention=True).data
        o4 = block(Tensor(q2), kv, with_self_attention=True).data
        assert np.abs(o3[0, 0] - o4[0, 0]).max() > 1e-8


class TestInterpolateEmbeddings:
    def test_identity_is_bitwise_copy(self):
        rng = np.random.default_rng(23)
        table = Tensor(rng.standard_normal((5, 4)))
        out = nn.interpolate_embeddings(table, 5)
        assert np.array_equal(out.data, table.data)

    def test_two_to_three_rows(self):
        a, b = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 4.0])
        out = nn.interpolate_embeddings(Tensor(np.stack([a, b])), 3).data
        np.testing.assert_allclose(out, np.stack([a, (a + b) / 2, b]), atol=1e-15)

    def test_paper_extension_12_to_48(self):
        rng = np.random.default_rng(24)
        table = rng.standard_normal((12, 6))
        out = nn.interpolate_embeddings(Tensor(table), 48).data
        np.testing.assert_array_equal(out[0], table[0])
        np.testing.assert_array_equal(out[-1], table[-1])
        # every row is a convex lerp of two adjacent input rows
        for j in range(48):
            pos = j * 11 / 47
            lo = min(int(np.floor(pos)), 10)
            f = pos - lo
            ref = (1 - f) * table[lo] + f * table[lo + 1]
            np.testing.assert_allclose(out[j], ref, atol=1e-12)

    def test_too_short_target_rejected(self):
        with pytest.raises(ParameterError):
            nn.interpolate_embeddings(Tensor(np.zeros((4, 2))), 1)


class TestBlockGradients:
    def test_cross_attention_block_gradcheck(self):
        cfg = make_cfg()
        reg = make_reg(25)
        block = nn.CrossAttentionBlock(reg, "b", cfg)
        rng = np.random.default_rng(26)
        kv = Tensor(rng.standard_normal((1, 3, 8)))
        probe = rng.standard_normal((1, 2, 8))
        q = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
        err = T.finite_diff_check(
            lambda t: T.tsum(T.mul(block(t, kv), Tensor(probe))), q)
        assert err < 1e-4

    def test_deformable_block_gradcheck(self):
        cfg = make_cfg(dim=8, heads=2, levels=2, points=2)
        reg = make_reg(27)
        block = nn.DeformableBlock(reg, "b", cfg)
        rng = np.random.default_rng(28)
        block.attn.w_off.w.data[:] = rng.standard_normal(block.attn.w_off.w.data.shape) * 0.3
        block.attn.w_wgt.w.data[:] = rng.standard_normal(block.attn.w_wgt.w.data.shape) * 0.3
        maps = [Tensor(rng.standard_normal((1, s, s, 8))) for s in (4, 2)]
        ref = rng.uniform(0.2, 0.8, (2, 2))
        probe = rng.standard_normal((2, 8))
        q = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
        err = T.finite_diff_check(
            lambda t: T.tsum(T.mul(block(t, maps, ref, np.zeros(2, np.int64)), Tensor(probe))), q)
        assert err < 1e-4
        # gradients into the value maps as well
        vm = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
        qf = Tensor(rng.standard_normal((2, 8)))
        err = T.finite_diff_check(
            lambda v: T.tsum(T.mul(block(qf, [v, maps[1]], ref, np.zeros(2, np.int64)),
                                   Tensor(probe))), vm)
        assert err < 1e-4

    def test_decoder_block_gradcheck(self):
        cfg = make_cfg()
        reg = make_reg(29)
        block = nn.DecoderBlock(reg, "b", cfg)
        rng = np.random.default_rng(30)
        kv = Tensor(rng.standard_normal((1, 3, 8)))
        probe = rng.standard_normal((1, 2, 8))
        q = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
        err = T.finite_diff_check(
            lambda t: T.tsum(T.mul(block(t, kv), Tensor(probe))), q)
        assert err < 1e-4
