"""Toy visual encoder: a 3-stage conv stack (net stride 4) standing in for a
heavy ViT backbone, plus query initialization by bilinear feature sampling.

The interface contract is what matters: stride-S dense features of dimension D
with learnable spatial positional embeddings, correlation features from a
4-layer MLP, and bilinearly downsampled pyramids. A real backbone could be
swapped in behind `encode_frames` without touching the rest of the model.

Coordinate convention (shared by every module): pixel (x, y) with the origin
at the top-left pixel center; feature-grid coordinate = pixel / S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import InputError
from .nn import Linear, ParamRegistry, PosEmbedding
from .tensor import Tensor


@dataclass
class Frame:
    """One RGB frame; values in [0,1]; index is 1-based within the video."""

    image: np.ndarray
    index: int


@dataclass
class QuerySpec:
    """A point to track: 1-based start frame plus (x, y) pixel position."""

    start_frame: int
    position: tuple


@dataclass
class FeatureMap:
    """Per-frame dense features.

    f: stride-S features with positional embedding added, [B, H/S, W/S, D].
    h: correlation features (4-layer MLP of f), same shape.
    h_pyramid / f_pyramid: levels l=0..3, level l has extents
    ceil(H/(2^l S)) x ceil(W/(2^l S)).
    """

    f: Tensor
    h: Tensor
    h_pyramid: list
    f_pyramid: list
    stride: int

    @property
    def grid_hw(self) -> tuple:
        return self.f.shape[1], self.f.shape[2]


def build_pyramid(x: Tensor, levels: int) -> list:
    """Bilinear downsampling pyramid: level l is ceil(size / 2^l)."""
    out = [x]
    for _ in range(1, levels):
        _, h, w, _ = out[-1].shape
        out.append(T.bilinear_resize(out[-1], (-(-h // 2), -(-w // 2))))
    return out


class Encoder:
    """conv(5x5,s2) -> conv(3x3,s2) -> conv(1x1,s1), GELU between stages."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig, name: str = "encoder"):
        self.cfg = cfg
        c1, c2 = cfg.enc_channels
        d = cfg.dim
        self.w1 = reg.xavier(f"{name}.conv1.w", 5 * 5 * 3, c1, shape=(5, 5, 3, c1))
        self.b1 = reg.zeros(f"{name}.conv1.b", (c1,))
        self.w2 = reg.xavier(f"{name}.conv2.w", 3 * 3 * c1, c2, shape=(3, 3, c1, c2))
        self.b2 = reg.zeros(f"{name}.conv2.b", (c2,))
        self.w3 = reg.xavier(f"{name}.conv3.w", c2, d, shape=(1, 1, c2, d))
        self.b3 = reg.zeros(f"{name}.conv3.b", (d,))
        gh, gw = cfg.grid_hw
        self.pos = PosEmbedding(reg, f"{name}.pos_frame", gh * gw, d, "spatial-frame")
        self.h_mlp = [Linear(reg, f"{name}.h_mlp.{i}", d, d) for i in range(cfg.h_mlp_layers)]

    def encode_frames(self, images) -> FeatureMap:
        """images: [B, H, W, 3] in [0,1] -> FeatureMap. Pure and deterministic."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float64))
        if images.ndim != 4 or images.shape[3] != 3:
            raise InputError(f"expected [B,H,W,3] images, got {images.shape}")
        _, h, w, _ = images.shape
        s = self.cfg.stride
        if h % s or w % s:
            raise InputError(f"frame size {(h, w)}, not divisible by stride {s}")
        if (h, w) != tuple(self.cfg.frame_hw):
            raise InputError(f"frame size {(h, w)} != configured {self.cfg.frame_hw}")
        x = T.gelu(T.conv2d(images, self.w1, self.b1, stride=2))
        x = T.gelu(T.conv2d(x, self.w2, self.b2, stride=2))
        x = T.conv2d(x, self.w3, self.b3, stride=1)
        gh, gw = self.cfg.grid_hw
        pos = T.reshape(self.pos.table, (1, gh, gw, self.cfg.dim))
        f = T.add(x, pos)
        hfeat = f
        for i, lin in enumerate(self.h_mlp):
            hfeat = lin(hfeat) if i == len(self.h_mlp) - 1 else T.gelu(lin(hfeat))
        return FeatureMap(
            f=f, h=hfeat,
            h_pyramid=build_pyramid(hfeat, self.cfg.levels),
            f_pyramid=build_pyramid(f, self.cfg.levels),
            stride=s,
        )

    def init_queries(self, fmap: FeatureMap, positions_px) -> Tensor:
        """q_init[i] = bilinear sample of f at position / S. positions: [M,2] px."""
        pts = np.asarray(positions_px, dtype=np.float64)
        h, w = self.cfg.frame_hw
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InputError(f"positions must be [M,2], got {pts.shape}")
        if (pts[:, 0] < 0).any() or (pts[:, 0] > w - 1).any() \
                or (pts[:, 1] < 0).any() or (pts[:, 1] > h - 1).any():
            raise InputError("query position outside the frame")
        return T.sample_points(fmap.f, pts / fmap.stride,
                               np.zeros(len(pts), dtype=np.int64))
