"""Spatial and context memories: per-query FIFO queues with occlusion-aware
masked reads, plus inference-time capacity extension.

Entries are stored batched as [B, N, D] per time slot. Queries that have not
started yet still occupy a slot (so all queries share one queue length) but
are flagged invalid and masked out of every read; semantically each query's
bank holds exactly its last min(n, K) real writes in arrival order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ParameterError
from .nn import (CrossAttentionBlock, DeformableBlock, Linear, ParamRegistry,
                 PosEmbedding, SelfAttentionBlock, interpolate_embeddings)
from .tensor import Tensor


class MemoryBank:
    """FIFO queue of feature entries with per-entry occlusion/validity flags."""

    def __init__(self, capacity: int, batch: int, n_queries: int):
        if capacity < 1:
            raise ParameterError("memory capacity must be >= 1")
        self.capacity = capacity
        self.batch = batch
        self.n_queries = n_queries
        self.entries: list = []      # each Tensor [B, N, D]
        self.occluded: list = []     # each np.bool_ [B, N]
        self.valid: list = []        # each np.bool_ [B, N]

    def __len__(self):
        return len(self.entries)

    def write(self, entry: Tensor, occluded: np.ndarray, valid: np.ndarray) -> None:
        self.entries.append(entry)
        self.occluded.append(np.asarray(occluded, dtype=bool))
        self.valid.append(np.asarray(valid, dtype=bool))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
            self.occluded.pop(0)
            self.valid.pop(0)

    def stacked(self):
        """-> (Tensor [B,N,K_cur,D], excluded bool [B,N,K_cur]).

        excluded marks entries that must get zero attention weight: written
        while the point was (predicted) occluded, or before the query started.
        """
        mem = T.stack(self.entries, axis=2)
        occ = np.stack(self.occluded, axis=2)
        val = np.stack(self.valid, axis=2)
        return mem, (occ | ~val)

    def entries_for(self, b: int, n: int) -> list:
        """Valid entries of one query, oldest to newest (detached copies)."""
        return [e.data[b, n].copy() for e, v in zip(self.entries, self.valid) if v[b, n]]

    def flags_for(self, b: int, n: int) -> list:
        return [bool(o[b, n]) for o, v in zip(self.occluded, self.valid) if v[b, n]]

    def state_arrays(self) -> dict:
        return {
            "entries": np.stack([e.data for e in self.entries], axis=0)
            if self.entries else np.zeros((0, self.batch, self.n_queries, 0)),
            "occluded": np.stack(self.occluded, axis=0)
            if self.occluded else np.zeros((0, self.batch, self.n_queries), bool),
            "valid": np.stack(self.valid, axis=0)
            if self.valid else np.zeros((0, self.batch, self.n_queries), bool),
        }

    def load_state(self, arrays: dict) -> None:
        self.entries = [Tensor(a) for a in arrays["entries"]]
        self.occluded = [a.astype(bool) for a in arrays["occluded"]]
        self.valid = [a.astype(bool) for a in arrays["valid"]]


def _rows(x: Tensor) -> Tensor:
    b, n, d = x.shape
    return T.reshape(x, (b * n, d))


class SpatialMemory:
    """Write: decode around the prediction; read: re-ground q_init on history.

    The reader is residual with a zero-initialized output projection, so an
    untrained model leaves q_init untouched; empty or fully-masked banks do
    the same exactly.
    """

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "smem"):
        self.cfg = cfg
        block = cfg.block()
        self.reduce = Linear(reg, f"{name}.reduce", 2 * cfg.dim, cfg.dim)
        self.writer = [DeformableBlock(reg, f"{name}.writer.{i}", block)
                       for i in range(block.layers_per_block)]
        self.encoder = SelfAttentionBlock(reg, f"{name}.mm", block)
        self.reader = CrossAttentionBlock(reg, f"{name}.qqm", block)
        self.read_out = Linear(reg, f"{name}.read_out", cfg.dim, cfg.dim, zero_init=True)
        self.pos = PosEmbedding(reg, f"{name}.pos", cfg.memory_size, cfg.dim, "spatial-memory")

    def write(self, bank: MemoryBank, q_init, q_t, fmap, p_hat_px, occluded, valid) -> None:
        """Append the decoded neighborhood of p_hat on f_t (deformable, 3 layers)."""
        b, n, d = q_t.shape
        x = _rows(self.reduce(T.concat([q_init, q_t], axis=-1)))
        gh, gw = fmap.grid_hw
        scale = np.array([1.0 / (fmap.stride * gw), 1.0 / (fmap.stride * gh)])
        ref = T.mul(T.reshape(p_hat_px, (b * n, 2)), Tensor(scale))
        bidx = np.repeat(np.arange(b, dtype=np.int64), n)
        for blk in self.writer:
            x = blk(x, fmap.f_pyramid, ref, bidx)
        bank.write(T.reshape(x, (b, n, d)), occluded, valid)

    def update(self, q_init, bank: MemoryBank, pos_table, extra_excluded=None):
        """q_init_t = q_init + read(q_init, encoded memory); masked-aware."""
        if len(bank) == 0:
            return q_init
        b, n, d = q_init.shape
        mem, excluded = bank.stacked()               # [B,N,K,D], [B,N,K]
        if extra_excluded is not None:
            excluded = excluded | extra_excluded
        gate = ~excluded.all(axis=2)                 # [B,N] any readable entry
        if not gate.any():
            return q_init
        k_cur = len(bank)
        gamma = T.reshape(pos_table[:k_cur], (1, 1, k_cur, d))
        mem = T.add(mem, gamma)                      # gamma enters keys and values here
        g = b * n
        mem2 = T.reshape(mem, (g, k_cur, d))
        mask2 = excluded.reshape(g, k_cur)
        encoded = self.encoder(mem2, key_mask=mask2)
        q_rows = T.reshape(q_init, (g, 1, d))
        read = self.reader(q_rows, encoded, key_mask=mask2)
        delta = T.reshape(self.read_out(read), (b, n, d))
        delta = T.mul(delta, Tensor(gate.astype(np.float64)[..., None]))
        return T.add(q_init, delta)


class ContextMemory:
    """Stores re-ranked query features verbatim; read inside the query decoder."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "cmem"):
        self.pos = PosEmbedding(reg, f"{name}.pos", cfg.memory_size, cfg.dim, "context-memory")

    def write(self, bank: MemoryBank, q_t, occluded, valid) -> None:
        bank.write(q_t, occluded, valid)


def extend_capacity(bank: MemoryBank, pos_table, new_capacity: int):
    """Inference-time memory extension: grow the FIFO and resample its
    temporal embeddings. Existing entries are preserved; K_i == K is a no-op.

    Returns the (possibly new) position table to read with.
    """
    if new_capacity < 2:
        raise ParameterError(f"extended capacity must be >= 2, got {new_capacity}")
    bank.capacity = new_capacity
    while len(bank.entries) > new_capacity:
        bank.entries.pop(0)
        bank.occluded.pop(0)
        bank.valid.pop(0)
    return interpolate_embeddings(pos_table, new_capacity)
