"""Model/training/data configuration dataclasses."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ParameterError
from .nn import BlockConfig


@dataclass
class ModelConfig:
    """Everything that fixes the tracker's architecture and inference rules.

    Defaults are the desk-scale configuration; paper-scale values are noted
    where they differ (D=256, 8 heads, k=16, 384x512 frames).
    """

    dim: int = 64
    heads: int = 4
    ffn_ratio: int = 4
    levels: int = 4
    points: int = 4
    stride: int = 4
    frame_hw: tuple = (64, 64)
    enc_channels: tuple = (16, 32)
    h_mlp_layers: int = 4
    decoder_blocks: int = 3
    topk: int = 8                     # paper uses k=16 at full scale
    temperature: float = 0.05
    memory_size: int = 12             # FIFO capacity K at training time
    visibility_threshold: float = 0.8
    uncertainty_px: float = 8.0
    key_mask_ratio: float = 0.1       # random key masking on memory reads (train only)
    use_rerank: bool = True
    use_offset_head: bool = True
    visibility_mlp: bool = False
    use_spatial_memory: bool = True
    use_context_memory: bool = True

    def __post_init__(self):
        h, w = self.frame_hw
        if h % self.stride or w % self.stride:
            raise ParameterError(f"frame size {self.frame_hw} not divisible by stride {self.stride}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.memory_size < 2:
            raise ParameterError("memory_size must be >= 2")
        if self.topk < 1 or self.topk > self.num_patches:
            raise ParameterError(f"topk {self.topk} out of range for {self.num_patches} patches")

    @property
    def grid_hw(self) -> tuple:
        return (self.frame_hw[0] // self.stride, self.frame_hw[1] // self.stride)

    @property
    def num_patches(self) -> int:
        gh, gw = (self.frame_hw[0] // self.stride, self.frame_hw[1] // self.stride)
        return gh * gw

    def block(self) -> BlockConfig:
        return BlockConfig(dim=self.dim, heads=self.heads, ffn_ratio=self.ffn_ratio,
                           levels=self.levels, points=self.points,
                           layers_per_block=self.decoder_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_hw"] = list(self.frame_hw)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frame_hw"] = tuple(d.get("frame_hw", (64, 64)))
        d["enc_channels"] = tuple(d.get("enc_channels", (16, 32)))
        return cls(**d)


@dataclass
class TrainConfig:
    """Optimization hyperparameters (toy scale, cut down from the 50K-iteration
    batch-32 recipe)."""

    iterations: int = 2000
    batch_size: int = 8
    lr_max: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    lambda_cls: float = 3.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        for name in ("iterations", "batch_size", "lr_max", "weight_decay", "clip_norm", "lambda_cls"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not (0.0 < self.warmup_frac < 1.0):
            raise ParameterError("warmup_frac must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)
