"""The tracker model: parameters plus the single-frame forward pass shared by
training rollouts and streaming inference.

Per frame: encode -> spatial-memory query update -> query decoding (with
context memory) -> patch classification -> re-ranking -> offset -> visibility
-> memory writes. Queries whose start frame lies in the future are masked out
of self-attention, produce no usable output, and their memory slots are
flagged invalid until they start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import Encoder
from .memory import ContextMemory, MemoryBank, SpatialMemory
from .nn import ParamRegistry, interpolate_embeddings
from .prediction import (MultiscaleSimilarity, OffsetHead, QueryDecoder,
                         Reranker, VisibilityHead, classify_patch)
from .tensor import Tensor


@dataclass
class TrackState:
    """Mutable per-video (or per-batch-of-clips) tracking state."""

    q_init: Tensor                 # [B,N,D]
    sbank: MemoryBank
    cbank: MemoryBank
    start_rows: np.ndarray         # [B,N] 0-based frame index at which queries begin
    query_px: np.ndarray           # [B,N,2] query pixel positions
    s_pos: Tensor                  # spatial-memory temporal table in use
    c_pos: Tensor                  # context-memory temporal table in use
    t: int = 0                     # frames processed so far


@dataclass
class StepOutput:
    """Everything one frame step produces (tensors stay on the tape)."""

    active: np.ndarray
    fmap: object
    q_init_t: Tensor
    q_dec: Tensor
    q_t: Tensor
    log_c_dec: Tensor
    c_dec: Tensor
    log_c: Tensor
    c: Tensor
    patch_idx: np.ndarray
    centers_px: np.ndarray
    offsets: list
    p_hat: Tensor
    v_logit: Tensor
    u_logit: Tensor
    v_prob: np.ndarray
    u_prob: np.ndarray
    topk_idx: np.ndarray | None = None
    topk_centers_px: np.ndarray | None = None
    u_top_logits: Tensor | None = None


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class TrackerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.reg = ParamRegistry(np.random.default_rng(seed))
        self.encoder = Encoder(self.reg, cfg)
        self.decoder = QueryDecoder(self.reg, cfg)
        self.sim = MultiscaleSimilarity(self.reg, cfg)
        self.rerank = Reranker(self.reg, cfg) if cfg.use_rerank else None
        self.offset = OffsetHead(self.reg, cfg) if cfg.use_offset_head else None
        self.vis = VisibilityHead(self.reg, cfg)
        self.smem = SpatialMemory(self.reg, cfg) if cfg.use_spatial_memory else None
        self.cmem = ContextMemory(self.reg, cfg) if cfg.use_context_memory else None

    @property
    def params(self) -> dict:
        return self.reg.params

    def param_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict) -> None:
        for k, v in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != v.data.shape:
                raise KeyError(f"parameter {k} shape {arrays[k].shape} != {v.data.shape}")
            v.data = np.asarray(arrays[k], dtype=np.float64).copy()

    # -- state ------------------------------------------------------------

    def new_state(self, batch: int, n_queries: int, start_rows, query_px,
                  k_memory: int | None = None) -> TrackState:
        """Fresh banks and query slots; k_memory > K enables inference-time
        memory extension (temporal embeddings linearly resampled)."""
        cap = self.cfg.memory_size if k_memory is None else k_memory
        sbank = MemoryBank(cap, batch, n_queries)
        cbank = MemoryBank(cap, batch, n_queries)
        s_pos = self.smem.pos.table if self.smem is not None else None
        c_pos = self.cmem.pos.table if self.cmem is not None else None
        if cap != self.cfg.memory_size:
            with T.no_grad():
                if s_pos is not None:
                    s_pos = Tensor(interpolate_embeddings(s_pos, cap).data)
                if c_pos is not None:
                    c_pos = Tensor(interpolate_embeddings(c_pos, cap).data)
        return TrackState(
            q_init=Tensor(np.zeros((batch, n_queries, self.cfg.dim))),
            sbank=sbank, cbank=cbank,
            start_rows=np.asarray(start_rows, dtype=np.int64),
            query_px=np.asarray(query_px, dtype=np.float64),
            s_pos=s_pos, c_pos=c_pos,
        )

    # -- one frame ---------------------------------------------------------

    def frame_step(self, state: TrackState, frames, t: int, *,
                   train_rng: np.random.Generator | None = None,
                   gt_occluded: np.ndarray | None = None,
                   frozen: dict | None = None,
                   topk: int | None = None) -> StepOutput:
        cfg = self.cfg
        k = cfg.topk if topk is None else topk
        b, n = state.start_rows.shape
        fmap = self.encoder.encode_frames(frames)
        active = state.start_rows <= t
        newly = state.start_rows == t

        if newly.any():
            pts = state.query_px.reshape(b * n, 2) / cfg.stride
            bidx = np.repeat(np.arange(b, dtype=np.int64), n)
            sampled = T.reshape(T.sample_points(fmap.f, pts, bidx), (b, n, cfg.dim))
            sel = newly.astype(np.float64)[..., None]
            state.q_init = T.add(T.mul(state.q_init, Tensor(1.0 - sel)),
                                 T.mul(sampled, Tensor(sel)))

        # spatial memory read
        if self.smem is not None:
            s_excl = self._key_drop(train_rng, state.sbank)
            q_init_t = self.smem.update(state.q_init, state.sbank, state.s_pos, s_excl)
        else:
            q_init_t = state.q_init

        # query decoding with context memory
        c_excl = self._key_drop(train_rng, state.cbank) if self.cmem is not None else None
        q_dec = self.decoder(q_init_t, fmap,
                             ctx_bank=state.cbank if self.cmem is not None else None,
                             ctx_pos=state.c_pos, self_mask=~active,
                             ctx_extra_excluded=c_excl)

        raw_dec = self.sim(q_dec, fmap.h_pyramid)
        c_dec, log_c_dec, idx_dec, centers_dec = classify_patch(
            raw_dec, cfg.temperature, fmap.grid_hw, cfg.stride)

        topk_idx = topk_centers = u_top_logits = None
        if self.rerank is not None:
            q_t, u_top_logits, topk_idx, _ = self.rerank(
                q_dec, fmap, c_dec.data, k,
                frozen_topk=None if frozen is None else frozen.get("topk"))
            gh, gw = fmap.grid_hw
            s = cfg.stride
            topk_centers = np.stack([(topk_idx % gw) * s + s / 2.0,
                                     (topk_idx // gw) * s + s / 2.0], axis=-1)
            raw = self.sim(q_t, fmap.h_pyramid)
            c, log_c, patch_idx, centers = classify_patch(
                raw, cfg.temperature, fmap.grid_hw, cfg.stride)
        else:
            q_t, c, log_c, patch_idx, centers = q_dec, c_dec, log_c_dec, idx_dec, centers_dec

        if frozen is not None and "patch_idx" in frozen:
            patch_idx = frozen["patch_idx"]
            gh, gw = fmap.grid_hw
            s = cfg.stride
            centers = np.stack([(patch_idx % gw) * s + s / 2.0,
                                (patch_idx // gw) * s + s / 2.0], axis=-1).astype(np.float64)

        if self.offset is not None:
            offsets = self.offset(q_t, fmap, centers)
            p_hat = T.add(Tensor(centers), offsets[-1])
        else:
            offsets = []
            p_hat = Tensor(centers)

        v_logit, u_logit = self.vis(q_t, fmap, p_hat)
        v_prob = _sigmoid_np(v_logit.data)
        u_prob = _sigmoid_np(u_logit.data)

        # memory writes: at training, occlusion flags come from ground truth;
        # at inference, from the model's own thresholded visibility.
        if gt_occluded is not None:
            occl = np.asarray(gt_occluded, dtype=bool)
        else:
            occl = ~(v_prob > cfg.visibility_threshold)
        if self.smem is not None:
            self.smem.write(state.sbank, state.q_init, q_t, fmap, p_hat, occl, active)
        if self.cmem is not None:
            self.cmem.write(state.cbank, q_t, occl, active)
        state.t = t + 1

        return StepOutput(
            active=active, fmap=fmap, q_init_t=q_init_t, q_dec=q_dec, q_t=q_t,
            log_c_dec=log_c_dec, c_dec=c_dec, log_c=log_c, c=c,
            patch_idx=patch_idx, centers_px=centers, offsets=offsets, p_hat=p_hat,
            v_logit=v_logit, u_logit=u_logit, v_prob=v_prob, u_prob=u_prob,
            topk_idx=topk_idx, topk_centers_px=topk_centers, u_top_logits=u_top_logits,
        )

    def _key_drop(self, train_rng, bank) -> np.ndarray | None:
        """Training-time random key masking on memory reads (Bernoulli 0.1)."""
        if train_rng is None or len(bank) == 0 or self.cfg.key_mask_ratio <= 0:
            return None
        shape = (bank.batch, bank.n_queries, len(bank))
        return train_rng.random(shape) < self.cfg.key_mask_ratio
