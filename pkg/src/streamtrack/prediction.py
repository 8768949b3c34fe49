"""Per-frame prediction stack: query decoding against the current frame (with
optional context-memory read), multiscale patch classification, top-k
re-ranking, bounded offset regression, and visibility/uncertainty estimation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ParameterError
from .nn import (CrossAttentionBlock, DecoderBlock, DeformableBlock, LayerNorm,
                 Linear, ParamRegistry)
from .tensor import Tensor


def classify_patch(raw, temperature: float, grid_hw, stride: int):
    """Softmax the raw similarity map over patches and pick the argmax patch.

    raw: [B,N,P]. Returns (C, logC, patch_idx [B,N], centers_px [B,N,2]).
    Ties break toward the lowest flat row-major index. The argmax patch center
    in pixels is grid_index * S + S/2.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    log_c = T.log_softmax(raw, temperature=temperature)
    c = T.exp(log_c)
    idx = np.argmax(raw.data, axis=-1)
    gh, gw = grid_hw
    gx = idx % gw
    gy = idx // gw
    centers = np.stack([gx * stride + stride / 2.0, gy * stride + stride / 2.0],
                       axis=-1).astype(np.float64)
    return c, log_c, idx, centers


def topk_patches(values: np.ndarray, k: int):
    """Indices of the k largest entries per row; ties -> lowest flat index."""
    p = values.shape[-1]
    if k > p:
        raise ParameterError(f"topk {k} exceeds patch count {p}")
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :k]


class QueryDecoder:
    """3 decoder blocks against the frame; optional context-memory read first.

    The context read is an extra decoder layer without self-attention in which
    queries attend their own memory entries; the temporal embedding gamma^c is
    added to the keys only, keeping values time-invariant.
    """

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "qdec"):
        self.cfg = cfg
        block = cfg.block()
        self.blocks = [DecoderBlock(reg, f"{name}.block.{i}", block)
                       for i in range(cfg.decoder_blocks)]
        self.ctx_read = CrossAttentionBlock(reg, f"{name}.ctx", block)

    def __call__(self, q, fmap, ctx_bank=None, ctx_pos=None, self_mask=None,
                 ctx_extra_excluded=None) -> Tensor:
        b, n, d = q.shape
        if ctx_bank is not None and len(ctx_bank) > 0:
            mem, excluded = ctx_bank.stacked()
            if ctx_extra_excluded is not None:
                excluded = excluded | ctx_extra_excluded
            gate = ~excluded.all(axis=2)
            if gate.any():
                k_cur = len(ctx_bank)
                gamma = T.reshape(ctx_pos[:k_cur], (1, 1, k_cur, d))
                keys = T.reshape(T.add(mem, gamma), (b * n, k_cur, d))
                values = T.reshape(mem, (b * n, k_cur, d))
                q_rows = T.reshape(q, (b * n, 1, d))
                read = self.ctx_read(q_rows, keys, values,
                                     key_mask=excluded.reshape(b * n, k_cur),
                                     row_gate=gate.reshape(b * n, 1))
                q = T.reshape(read, (b, n, d))
        gh, gw = fmap.grid_hw
        kv = T.reshape(fmap.f, (b, gh * gw, d))
        for blk in self.blocks:
            q = blk(q, kv, self_mask=self_mask)
        return q


class MultiscaleSimilarity:
    """Cosine similarity against each pyramid level, upsampled to level 0 and
    combined with learned per-level coefficients (a 1x1 projection, no bias)."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "sim"):
        self.cfg = cfg
        self.alphas = reg.full(f"{name}.alphas", (cfg.levels,), 1.0 / cfg.levels)

    def __call__(self, q, pyramid) -> Tensor:
        b, n, d = q.shape
        gh, gw = pyramid[0].shape[1], pyramid[0].shape[2]
        qn = T.l2_normalize(q)
        acc = None
        for lv, hmap in enumerate(pyramid):
            hl, wl = hmap.shape[1], hmap.shape[2]
            hn = T.l2_normalize(hmap)
            cells = T.transpose(T.reshape(hn, (b, hl * wl, d)), (0, 2, 1))
            sim = T.matmul(qn, cells)                                  # [B,N,Hl*Wl]
            if (hl, wl) != (gh, gw):
                sim = T.reshape(sim, (b * n, hl, wl, 1))
                sim = T.bilinear_resize(sim, (gh, gw))
            sim = T.reshape(sim, (b, n, gh * gw))
            term = T.mul(sim, self.alphas[lv])
            acc = term if acc is None else T.add(acc, term)
        return acc


class Reranker:
    """Refine each query against its top-k most similar patches.

    The query is deformably decoded around every candidate center (3 layers),
    concatenated with the input query and reduced to D (the top-k features,
    which also feed a linear uncertainty head). A cross-attention block fuses
    the candidates back into the query; its output goes through a separate
    linear layer, is concatenated with the input query once more, and a final
    linear map brings 2D back down to D.
    """

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "rerank"):
        self.cfg = cfg
        block = cfg.block()
        self.dec = [DeformableBlock(reg, f"{name}.dec.{i}", block)
                    for i in range(block.layers_per_block)]
        self.reduce_top = Linear(reg, f"{name}.reduce_top", 2 * cfg.dim, cfg.dim)
        self.u_top_head = Linear(reg, f"{name}.u_top", cfg.dim, 1)
        self.fuse = CrossAttentionBlock(reg, f"{name}.fuse", block)
        self.sep = Linear(reg, f"{name}.sep", cfg.dim, cfg.dim)
        self.final = Linear(reg, f"{name}.final", 2 * cfg.dim, cfg.dim)

    def __call__(self, q_dec, fmap, c_dec_values: np.ndarray, k: int, frozen_topk=None):
        """-> (q_t [B,N,D], u_top_logits [B,N,k], topk_idx [B,N,k], q_top)."""
        b, n, d = q_dec.shape
        idx = topk_patches(c_dec_values, k) if frozen_topk is None else frozen_topk
        gh, gw = fmap.grid_hw
        s = fmap.stride
        centers = np.stack([(idx % gw) * s + s / 2.0, (idx // gw) * s + s / 2.0],
                           axis=-1)                                     # [B,N,k,2]
        scale = np.array([1.0 / (s * gw), 1.0 / (s * gh)])
        ref = (centers * scale).reshape(b * n * k, 2)
        bidx = np.repeat(np.arange(b, dtype=np.int64), n * k)
        rep = T.repeat_axis(q_dec, 2, k)                                # [B,N,k,D]
        x = T.reshape(rep, (b * n * k, d))
        for blk in self.dec:
            x = blk(x, fmap.h_pyramid, ref, bidx)
        q_top = self.reduce_top(T.concat([x, T.reshape(rep, (b * n * k, d))], axis=-1))
        u_top_logits = T.reshape(self.u_top_head(q_top), (b, n, k))
        fused = self.fuse(T.reshape(q_dec, (b * n, 1, d)),
                          T.reshape(q_top, (b * n, k, d)))
        fused = self.sep(T.reshape(fused, (b * n, d)))
        q_t = self.final(T.concat([fused, T.reshape(q_dec, (b * n, d))], axis=-1))
        return T.reshape(q_t, (b, n, d)), u_top_logits, idx, T.reshape(q_top, (b, n, k, d))


class OffsetHead:
    """3-layer deformable decoder around the selected patch center; each layer
    emits an offset via layer-norm -> linear -> tanh, scaled to [-S, S]."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "offset"):
        self.cfg = cfg
        block = cfg.block()
        self.blocks = [DeformableBlock(reg, f"{name}.dec.{i}", block)
                       for i in range(block.layers_per_block)]
        self.norms = [LayerNorm(reg, f"{name}.emit_ln.{i}", cfg.dim)
                      for i in range(block.layers_per_block)]
        self.emits = [Linear(reg, f"{name}.emit.{i}", cfg.dim, 2, zero_init=True)
                      for i in range(block.layers_per_block)]

    def __call__(self, q_t, fmap, centers_px: np.ndarray) -> list:
        """-> per-layer offsets, each [B,N,2]; the last is the prediction."""
        b, n, d = q_t.shape
        gh, gw = fmap.grid_hw
        s = fmap.stride
        scale = np.array([1.0 / (s * gw), 1.0 / (s * gh)])
        ref = (centers_px.reshape(b * n, 2)) * scale
        bidx = np.repeat(np.arange(b, dtype=np.int64), n)
        x = T.reshape(q_t, (b * n, d))
        outs = []
        for blk, ln, emit in zip(self.blocks, self.norms, self.emits):
            x = blk(x, fmap.h_pyramid, ref, bidx)
            o = T.mul(T.tanh(emit(ln(x))), float(s))
            outs.append(T.reshape(o, (b, n, 2)))
        return outs


class VisibilityHead:
    """Decode the region around the final prediction (one deformable layer, or
    a 2-layer MLP in the ablation variant), concatenate with the input query,
    then two separate linear heads with logistic outputs."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "vis"):
        self.cfg = cfg
        block = cfg.block()
        if cfg.visibility_mlp:
            self.mlp1 = Linear(reg, f"{name}.mlp1", cfg.dim, cfg.dim)
            self.mlp2 = Linear(reg, f"{name}.mlp2", cfg.dim, cfg.dim)
            self.block = None
        else:
            self.block = DeformableBlock(reg, f"{name}.dec", block)
        self.v_head = Linear(reg, f"{name}.v", 2 * cfg.dim, 1)
        self.u_head = Linear(reg, f"{name}.u", 2 * cfg.dim, 1)

    def __call__(self, q_t, fmap, p_hat_px):
        """p_hat_px: Tensor [B,N,2] -> (v_logit [B,N], u_logit [B,N])."""
        b, n, d = q_t.shape
        rows = T.reshape(q_t, (b * n, d))
        if self.block is None:
            feat = self.mlp2(T.gelu(self.mlp1(rows)))
        else:
            gh, gw = fmap.grid_hw
            s = fmap.stride
            scale = np.array([1.0 / (s * gw), 1.0 / (s * gh)])
            ref = T.mul(T.reshape(p_hat_px, (b * n, 2)), Tensor(scale))
            bidx = np.repeat(np.arange(b, dtype=np.int64), n)
            feat = self.block(rows, fmap.h_pyramid, ref, bidx)
        cat = T.concat([feat, rows], axis=-1)
        v_logit = T.reshape(self.v_head(cat), (b, n))
        u_logit = T.reshape(self.u_head(cat), (b, n))
        return v_logit, u_logit
