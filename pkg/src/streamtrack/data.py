"""Synthetic tracking clips: textured sprites translating over a textured
background, with opaque moving occluder rectangles. Ground-truth trajectories
ride rigidly on their sprite; visibility comes from the same id map the
renderer draws, so labels and pixels can never disagree.

Sprites are drawn at integer-snapped positions while the ground-truth tracks
stay continuous, so a perfect appearance tracker has sub-pixel (< 0.71 px)
irreducible error. An `appearance_drift` knob cross-fades each sprite's
texture over the clip to create genuine feature drift.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ParseError, VersionError

MAGIC = b"STKCLIP\x00"
VERSION = 1

PRESETS = {
    "default": {},
    "occlusion_heavy": {"occluders": 3, "occluder_size": (16, 30), "occluder_speed": (1.5, 4.0)},
    "drift_heavy": {"appearance_drift": 0.85, "occluders": 0, "speed": (0.3, 1.2)},
    "textureless": {"texture_strength": 0.08},
}


@dataclass
class ClipSpec:
    seed: int = 0
    frames: int = 24
    height: int = 64
    width: int = 64
    sprites: int = 3
    n_points: int = 8
    occluders: int = 1
    sprite_size: tuple = (10, 18)
    speed: tuple = (0.4, 2.0)
    wobble_amp: float = 0.0
    occluder_size: tuple = (10, 18)
    occluder_speed: tuple = (1.0, 3.0)
    texture_strength: float = 1.0
    appearance_drift: float = 0.0

    def __post_init__(self):
        if self.frames < 2:
            raise ParameterError("clip must have at least 2 frames")
        if self.sprites < 1:
            raise ParameterError("need at least one sprite")
        if self.n_points < 1:
            raise ParameterError("need at least one tracked point")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        d = dict(d)
        for k in ("sprite_size", "speed", "occluder_size", "occluder_speed"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LabeledClip:
    frames: np.ndarray         # [T,H,W,3] float32 in [0,1]
    tracks: np.ndarray         # [T,N,2] float64 pixels (x, y)
    visible: np.ndarray        # [T,N] bool
    spec: ClipSpec

    @property
    def start_rows(self) -> np.ndarray:
        """0-based first visible frame per track (queried-first protocol)."""
        return np.argmax(self.visible, axis=0)

    @property
    def query_px(self) -> np.ndarray:
        """[N,2] query positions: each track at its first visible frame."""
        rows = self.start_rows
        return self.tracks[rows, np.arange(self.tracks.shape[1])]


def _smooth_noise(rng, h, w, cells=6):
    """Low-frequency noise in [-0.5, 0.5] by bilinear-upsampling a coarse grid."""
    ch = max(2, min(h, cells))
    cw = max(2, min(w, cells))
    coarse = rng.uniform(-0.5, 0.5, (ch, cw, 3))
    ys = np.clip((np.arange(h) + 0.5) * ch / h - 0.5, 0, ch - 1)
    xs = np.clip((np.arange(w) + 0.5) * cw / w - 0.5, 0, cw - 1)
    y0 = np.minimum(ys.astype(int), ch - 2)
    x0 = np.minimum(xs.astype(int), cw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _texture(rng, h, w, strength):
    base = rng.uniform(0.2, 0.8, 3)
    fine = rng.uniform(-0.5, 0.5, (h, w, 3))
    tex = base + strength * (0.6 * _smooth_noise(rng, h, w) + 0.4 * fine)
    return np.clip(tex, 0.0, 1.0)


class _Sprite:
    def __init__(self, rng, spec: ClipSpec):
        lo, hi = spec.sprite_size
        self.size = int(rng.integers(lo, hi + 1))
        self.tex_a = _texture(rng, self.size, self.size, spec.texture_strength)
        self.tex_b = _texture(rng, self.size, self.size, spec.texture_strength)
        self.ellipse = bool(rng.random() < 0.5)
        if self.ellipse:
            c = (self.size - 1) / 2.0
            yy, xx = np.mgrid[0:self.size, 0:self.size]
            self.mask = ((xx - c) ** 2 + (yy - c) ** 2) <= c ** 2
        else:
            self.mask = np.ones((self.size, self.size), bool)
        # spawn fully inside the frame
        self.pos0 = np.array([
            rng.uniform(0, max(1, spec.width - self.size)),
            rng.uniform(0, max(1, spec.height - self.size)),
        ])
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(*spec.speed)
        self.vel = np.array([np.cos(angle), np.sin(angle)]) * mag
        self.wobble_phase = rng.uniform(0, 2 * np.pi, 2)
        self.wobble_freq = rng.uniform(0.2, 0.6)
        self.drift = spec.appearance_drift

    def pos(self, t, wobble_amp):
        w = wobble_amp * np.sin(2 * np.pi * self.wobble_freq * t + self.wobble_phase)
        return self.pos0 + self.vel * t + w

    def texture_at(self, t, total):
        if self.drift <= 0:
            return self.tex_a
        a = self.drift * t / max(1, total - 1)
        return (1 - a) * self.tex_a + a * self.tex_b


class _Occluder:
    def __init__(self, rng, spec: ClipSpec):
        lo, hi = spec.occluder_size
        self.h = int(rng.integers(lo, hi + 1))
        self.w = int(rng.integers(lo, hi + 1))
        self.tex = _texture(rng, self.h, self.w, spec.texture_strength * 0.7)
        self.pos0 = np.array([
            rng.uniform(-self.w / 2, spec.width - self.w / 2),
            rng.uniform(-self.h / 2, spec.height - self.h / 2),
        ])
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(*spec.occluder_speed)
        self.vel = np.array([np.cos(angle), np.sin(angle)]) * mag

    def pos(self, t):
        return self.pos0 + self.vel * t


def _paste(canvas, idmap, tex, mask, x, y, obj_id):
    h, w = mask.shape
    ch, cw = canvas.shape[:2]
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, cw), min(y + h, ch)
    if x0 >= x1 or y0 >= y1:
        return
    sub = mask[y0 - y:y1 - y, x0 - x:x1 - x]
    canvas[y0:y1, x0:x1][sub] = tex[y0 - y:y1 - y, x0 - x:x1 - x][sub]
    idmap[y0:y1, x0:x1][sub] = obj_id


def generate_clip(spec: ClipSpec) -> LabeledClip:
    """Deterministic function of the spec (same seed -> bit-identical clip)."""
    for attempt in range(8):
        clip = _generate_once(spec, attempt)
        if clip is not None:
            return clip
    raise DataError(f"could not place visible tracks for seed {spec.seed}")


def _generate_once(spec: ClipSpec, attempt: int):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, attempt]))
    t_total, h, w = spec.frames, spec.height, spec.width
    background = _texture(rng, h, w, spec.texture_strength)
    sprites = [_Sprite(rng, spec) for _ in range(spec.sprites)]
    occluders = [_Occluder(rng, spec) for _ in range(spec.occluders)]

    # assign tracked points to sprites, with a continuous offset inside the mask
    owners = np.sort(rng.integers(0, spec.sprites, spec.n_points))
    offsets = np.zeros((spec.n_points, 2))
    for i, s_idx in enumerate(owners):
        cells = np.argwhere(sprites[s_idx].mask)
        for _ in range(64):
            cy, cx = cells[rng.integers(0, len(cells))]
            off = np.array([cx, cy]) + rng.uniform(0.0, 1.0, 2) - 0.5
            icx, icy = int(round(off[0])), int(round(off[1]))
            if 0 <= icy < sprites[s_idx].size and 0 <= icx < sprites[s_idx].size \
                    and sprites[s_idx].mask[icy, icx]:
                break
        offsets[i] = off

    frames = np.zeros((t_total, h, w, 3), dtype=np.float32)
    tracks = np.zeros((t_total, spec.n_points, 2))
    visible = np.zeros((t_total, spec.n_points), dtype=bool)
    for t in range(t_total):
        canvas = background.copy()
        idmap = np.full((h, w), -1, dtype=np.int64)
        snapped = []
        for i, s in enumerate(sprites):
            p = s.pos(t, spec.wobble_amp)
            ix, iy = int(round(p[0])), int(round(p[1]))
            snapped.append((ix, iy))
            _paste(canvas, idmap, s.texture_at(t, t_total), s.mask, ix, iy, i)
        for j, o in enumerate(occluders):
            p = o.pos(t)
            _paste(canvas, idmap, o.tex, np.ones((o.h, o.w), bool),
                   int(round(p[0])), int(round(p[1])), 1000 + j)
        frames[t] = canvas.astype(np.float32)
        for i, s_idx in enumerate(owners):
            p = sprites[s_idx].pos(t, spec.wobble_amp) + offsets[i]
            tracks[t, i] = p
            inside = (0 <= p[0] <= w - 1) and (0 <= p[1] <= h - 1)
            if inside:
                ix, iy = int(round(p[0])), int(round(p[1]))
                visible[t, i] = idmap[iy, ix] == s_idx
            else:
                visible[t, i] = False

    if not visible.any(axis=0).all():
        return None  # some track never visible; retry with a derived stream
    return LabeledClip(frames=frames, tracks=tracks, visible=visible, spec=spec)


def make_dataset(seed: int, count: int, preset: str = "default", **overrides) -> list:
    """A list of clips with derived per-clip seeds; deterministic in (seed, count)."""
    if preset not in PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    master = np.random.default_rng(seed)
    kw = dict(PRESETS[preset])
    kw.update(overrides)
    clips = []
    for _ in range(count):
        clip_seed = int(master.integers(0, 2 ** 62))
        clips.append(generate_clip(ClipSpec(seed=clip_seed, **kw)))
    return clips


# ---------------------------------------------------------------------------
# container format: magic, version, little-endian extents, raw frames/labels,
# JSON metadata block
# ---------------------------------------------------------------------------


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ParseError(f"truncated file: wanted {n} bytes, have "
                             f"{len(self.buf) - self.off}", offset=self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_clip(path, clip: LabeledClip) -> None:
    t, h, w, _ = clip.frames.shape
    n = clip.tracks.shape[1]
    meta = json.dumps({"spec": clip.spec.to_dict()}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<IIII", t, h, w, n))
        fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(clip.tracks, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(clip.visible, dtype=np.uint8).tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_clip(path) -> LabeledClip:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    magic = cur.take(8)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    version = cur.u32()
    if version != VERSION:
        raise VersionError(f"unsupported clip version {version}", offset=8)
    t, h, w, n = cur.u32(), cur.u32(), cur.u32(), cur.u32()
    frames = np.frombuffer(cur.take(t * h * w * 3 * 4), dtype="<f4").reshape(t, h, w, 3)
    tracks = np.frombuffer(cur.take(t * n * 2 * 8), dtype="<f8").reshape(t, n, 2)
    visible = np.frombuffer(cur.take(t * n), dtype=np.uint8).reshape(t, n).astype(bool)
    meta_len = cur.u32()
    meta_off = cur.off
    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise ParseError(f"bad metadata block: {e}", offset=meta_off)
    spec = ClipSpec.from_dict(meta["spec"])
    clip = LabeledClip(frames=frames.copy(), tracks=tracks.copy(),
                       visible=visible, spec=spec)
    if not clip.visible.any(axis=0).all():
        raise DataError("loaded clip has a never-visible track")
    return clip
