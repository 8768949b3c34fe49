"""Reusable network blocks: attention (standard + deformable), decoder blocks,
feed-forward nets, layer norm, and positional-embedding interpolation.

All blocks are immutable after construction and pre-normalized (layer norm
before each sublayer, residual adds around it). Parameters register themselves
under hierarchical names so checkpoints can address them canonically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class BlockConfig:
    """Shared transformer dimensions (paper-scale values in parentheses)."""

    dim: int = 64            # model width D (256)
    heads: int = 4           # attention heads (8)
    ffn_ratio: int = 4       # hidden expansion in feed-forward nets
    levels: int = 4          # deformable pyramid levels
    points: int = 4          # deformable sampling points per head per level
    layers_per_block: int = 3

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ParameterError(f"dim {self.dim} not divisible by heads {self.heads}")
        for field in ("dim", "heads", "ffn_ratio", "levels", "points", "layers_per_block"):
            if getattr(self, field) < 1:
                raise ParameterError(f"{field} must be >= 1")


class ParamRegistry:
    """Creates and names all learnable tensors of a model."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.params:
            raise ParameterError(f"duplicate parameter name: {name}")
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        arr = self.rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))
        return self._add(name, arr)

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def full(self, name: str, shape, value: float) -> Tensor:
        return self._add(name, np.full(shape, float(value)))


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, din: int, dout: int,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            self.w = reg.zeros(f"{name}.w", (din, dout))
        else:
            self.w = reg.xavier(f"{name}.w", din, dout)
        self.b = reg.zeros(f"{name}.b", (dout,)) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, reg: ParamRegistry, name: str, dim: int):
        self.gamma = reg.ones(f"{name}.g", (dim,))
        self.beta = reg.zeros(f"{name}.b", (dim,))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward:
    """2-layer MLP with GELU, hidden width = ffn_ratio * dim."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, ratio: int):
        self.lin1 = Linear(reg, f"{name}.lin1", dim, dim * ratio)
        self.lin2 = Linear(reg, f"{name}.lin2", dim * ratio, dim)

    def __call__(self, x) -> Tensor:
        return T.ffn_2layer(x, self.lin1.w, self.lin1.b, self.lin2.w, self.lin2.b)


class MultiHeadAttention:
    """Scaled dot-product attention with key masking.

    Queries whose keys are all masked receive an exactly-zero output vector.
    """

    def __init__(self, reg: ParamRegistry, name: str, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(reg, f"{name}.wq", dim, dim)
        self.wk = Linear(reg, f"{name}.wk", dim, dim)
        self.wv = Linear(reg, f"{name}.wv", dim, dim)
        self.wo = Linear(reg, f"{name}.wo", dim, dim)

    def project_kv(self, kv) -> tuple:
        """Pre-project keys/values (frame-static work batched over time)."""
        return self.wk(kv), self.wv(kv)

    def __call__(self, q, k, v, key_mask: np.ndarray | None = None,
                 kv_projected: tuple | None = None) -> Tensor:
        squeeze = q.ndim == 2
        if squeeze:
            q = T.reshape(q, (1,) + q.shape)
            if kv_projected is None:
                k = T.reshape(k, (1,) + k.shape)
                v = T.reshape(v, (1,) + v.shape)
            if key_mask is not None and key_mask.ndim == 1:
                key_mask = key_mask[None]
        g, nq, _ = q.shape
        h, dh = self.heads, self.dh

        def split(t):
            n = t.shape[1]
            return T.transpose(T.reshape(t, (g, n, h, dh)), (0, 2, 1, 3))  # [G,h,n,dh]

        qh = split(self.wq(q))
        if kv_projected is not None:
            kp, vp = kv_projected
        else:
            kp, vp = self.wk(k), self.wv(v)
        kh, vh = split(kp), split(vp)
        nq_, nk = qh.shape[2], kh.shape[2]
        mask4 = None
        if key_mask is not None:
            mask4 = key_mask[:, None, None, :] if key_mask.ndim == 2 else key_mask[:, None, :, :]
        ctx = T.attention_core(qh, kh, vh, mask4)              # [G,h,nq,dh]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (g, nq, self.dim))
        out = self.wo(ctx)
        if key_mask is not None:
            dead = key_mask.all(axis=-1)  # [G] or [G,nq]
            if dead.any():
                if dead.ndim == 1:
                    dead = np.broadcast_to(dead[:, None], (g, nq))
                out = T.mul(out, Tensor((~dead).astype(np.float64)[..., None]))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out


def _apply_gate(base, updated, row_gate: np.ndarray | None):
    """out = base + gate * (updated - base); gate rows of 0 pass base through."""
    if row_gate is None:
        return updated
    gate = np.asarray(row_gate, dtype=np.float64)[..., None]
    return T.add(base, T.mul(T.sub(updated, base), Tensor(gate)))


class CrossAttentionBlock:
    """Pre-norm cross-attention + feed-forward, both with residuals."""

    def __init__(self, reg: ParamRegistry, name: str, cfg: BlockConfig):
        self.ln_q = LayerNorm(reg, f"{name}.ln_q", cfg.dim)
        self.ln_kv = LayerNorm(reg, f"{name}.ln_kv", cfg.dim)
        self.attn = MultiHeadAttention(reg, f"{name}.attn", cfg.dim, cfg.heads)
        self.ln_f = LayerNorm(reg, f"{name}.ln_f", cfg.dim)
        self.ffn = FeedForward(reg, f"{name}.ffn", cfg.dim, cfg.ffn_ratio)

    def precompute_kv(self, keys) -> tuple:
        kn = self.ln_kv(keys)
        return self.attn.project_kv(kn)

    def __call__(self, q, keys=None, values=None, key_mask=None, row_gate=None,
                 kv_projected=None) -> Tensor:
        if kv_projected is None:
            kn = self.ln_kv(keys)
            vn = kn if (values is None or values is keys) else self.ln_kv(values)
            a = self.attn(self.ln_q(q), kn, vn, key_mask)
        else:
            a = self.attn(self.ln_q(q), None, None, key_mask, kv_projected=kv_projected)
        x = T.add(q, a)
        x = T.add(x, self.ffn(self.ln_f(x)))
        return _apply_gate(q, x, row_gate)


class SelfAttentionBlock:
    def __init__(self, reg: ParamRegistry, name: str, cfg: BlockConfig):
        self.ln = LayerNorm(reg, f"{name}.ln", cfg.dim)
        self.attn = MultiHeadAttention(reg, f"{name}.attn", cfg.dim, cfg.heads)
        self.ln_f = LayerNorm(reg, f"{name}.ln_f", cfg.dim)
        self.ffn = FeedForward(reg, f"{name}.ffn", cfg.dim, cfg.ffn_ratio)

    def __call__(self, x, key_mask=None, row_gate=None) -> Tensor:
        xn = self.ln(x)
        a = self.attn(xn, xn, xn, key_mask)
        y = T.add(x, a)
        y = T.add(y, self.ffn(self.ln_f(y)))
        return _apply_gate(x, y, row_gate)


class DecoderBlock:
    """Cross-attention -> FFN -> (optional) self-attention -> FFN."""

    def __init__(self, reg: ParamRegistry, name: str, cfg: BlockConfig):
        self.cross = CrossAttentionBlock(reg, f"{name}.cross", cfg)
        self.self_block = SelfAttentionBlock(reg, f"{name}.self", cfg)

    def __call__(self, q, memory_kv=None, kv_mask=None, self_mask=None,
                 with_self_attention: bool = True, kv_projected=None) -> Tensor:
        x = self.cross(q, memory_kv, key_mask=kv_mask, kv_projected=kv_projected)
        if with_self_attention:
            x = self.self_block(x, key_mask=self_mask)
        return x


class DeformableAttention:
    """Multi-scale deformable attention.

    Per head/level/point, a sampling offset and a weight logit come from the
    query by learned linear maps (both zero-initialized so initial sampling
    concentrates at the reference point with uniform weights). Weights are
    softmax-normalized over the levels*points slots of each head. The output
    is the output-projection of concatenated per-head weighted sample sums.
    Offsets are expressed in each level's own pixel units.
    """

    def __init__(self, reg: ParamRegistry, name: str, cfg: BlockConfig, levels=None):
        self.cfg = cfg
        self.levels = cfg.levels if levels is None else levels
        h, l, p = cfg.heads, self.levels, cfg.points
        self.heads, self.points = h, p
        self.w_off = Linear(reg, f"{name}.off", cfg.dim, h * l * p * 2, zero_init=True)
        self.w_wgt = Linear(reg, f"{name}.wgt", cfg.dim, h * l * p, zero_init=True)
        self.out_proj = Linear(reg, f"{name}.out", cfg.dim, cfg.dim)

    def __call__(self, q, value_maps, ref_norm, batch_idx) -> Tensor:
        """q: [R,D]; value_maps: list of [B,Hl,Wl,D]; ref_norm: [R,2] in [0,1]
        (relative to the level-0 grid); batch_idx: [R] ints."""
        if len(value_maps) != self.levels:
            raise ShapeError(f"expected {self.levels} value maps, got {len(value_maps)}")
        r = q.shape[0]
        h, l, p = self.heads, self.levels, self.points
        if not isinstance(ref_norm, Tensor):
            ref_norm = Tensor(np.asarray(ref_norm, dtype=np.float64))
        scales = np.array([[m.shape[2], m.shape[1]] for m in value_maps], dtype=np.float64)
        offsets = T.reshape(self.w_off(q), (r, h, l, p, 2))
        base = T.mul(T.reshape(ref_norm, (r, 1, 1, 1, 2)), Tensor(scales[None, None, :, None, :]))
        points = T.add(base, offsets)                                    # [R,h,L,P,2]
        weights = T.reshape(T.softmax(T.reshape(self.w_wgt(q), (r, h, l * p))), (r, h, l, p))
        return self.out_proj(T.deform_sample(value_maps, points, weights, batch_idx))


class DeformableBlock:
    """Pre-norm deformable cross-attention + feed-forward with residuals."""

    def __init__(self, reg: ParamRegistry, name: str, cfg: BlockConfig, levels=None):
        self.ln = LayerNorm(reg, f"{name}.ln", cfg.dim)
        self.attn = DeformableAttention(reg, f"{name}.attn", cfg, levels=levels)
        self.ln_f = LayerNorm(reg, f"{name}.ln_f", cfg.dim)
        self.ffn = FeedForward(reg, f"{name}.ffn", cfg.dim, cfg.ffn_ratio)

    def __call__(self, q, value_maps, ref_norm, batch_idx) -> Tensor:
        x = T.add(q, self.attn(self.ln(q), value_maps, ref_norm, batch_idx))
        return T.add(x, self.ffn(self.ln_f(x)))


class PosEmbedding:
    """Learnable positional table of shape [K, D].

    kind is one of: "spatial-frame" (added to frame features),
    "spatial-memory" (temporal slots of the spatial memory),
    "context-memory" (temporal slots of the context memory).
    """

    KINDS = ("spatial-frame", "spatial-memory", "context-memory")

    def __init__(self, reg: ParamRegistry, name: str, length: int, dim: int, kind: str):
        if kind not in self.KINDS:
            raise ParameterError(f"unknown embedding kind {kind!r}")
        self.table = reg.normal(f"{name}.table", (length, dim))
        self.kind = kind
        self.length = length


def interpolate_embeddings(table, new_len: int) -> Tensor:
    """Linearly resample a [K, D] table to [new_len, D].

    Row j lands at source position j*(K-1)/(new_len-1); endpoints are
    preserved exactly and new_len == K returns a bitwise copy.
    """
    if new_len < 2:
        raise ParameterError(f"interpolated length must be >= 2, got {new_len}")
    k = table.shape[0]
    if k < 2:
        raise ParameterError(f"source table must have >= 2 rows, got {k}")
    if new_len == k:
        return T.reshape(table, table.shape)
    pos = np.arange(new_len) * (k - 1) / (new_len - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), k - 2)
    f = pos - lo
    m = np.zeros((new_len, k))
    m[np.arange(new_len), lo] = 1.0 - f
    m[np.arange(new_len), lo + 1] += f
    return T.matmul(Tensor(m), table)
