"""Targets, loss, AdamW with cosine/warmup schedule, the clip-level training
loop (full online rollout with memory writes, exactly as inference), and
bit-exact checkpointing.
"""

from __future__ import annotations

import json

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .errors import DataError, NumericError, VersionError
from .model import StepOutput, TrackerModel
from .tensor import Tensor

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def patch_class_index(points_px: np.ndarray, stride: int, grid_hw) -> np.ndarray:
    """c_patch = floor(y/S) * (W/S) + floor(x/S), clipped onto the grid."""
    gh, gw = grid_hw
    gx = np.clip(np.floor(points_px[..., 0] / stride).astype(np.int64), 0, gw - 1)
    gy = np.clip(np.floor(points_px[..., 1] / stride).astype(np.int64), 0, gh - 1)
    return gy * gw + gx


def build_targets(out: StepOutput, gt_p: np.ndarray, gt_vis: np.ndarray,
                  cfg: ModelConfig, frame_hw) -> dict:
    """Per-frame targets: patch class, offset (relative to the selected patch
    center), uncertainty (error > delta_u or occluded), and top-k uncertainty
    (candidate center farther than delta_u from the truth, or occluded)."""
    h, w = frame_hw
    inside = ((gt_p[..., 0] >= 0) & (gt_p[..., 0] <= w - 1)
              & (gt_p[..., 1] >= 0) & (gt_p[..., 1] <= h - 1))
    if np.any(gt_vis & out.active & ~inside):
        raise DataError("visible ground-truth point outside the frame")
    gh, gw = h // cfg.stride, w // cfg.stride
    c_patch = patch_class_index(gt_p, cfg.stride, (gh, gw))
    o_t = gt_p - out.centers_px
    err = np.linalg.norm(out.p_hat.data - gt_p, axis=-1)
    u_t = (err > cfg.uncertainty_px) | ~gt_vis
    targets = {"c_patch": c_patch, "o_t": o_t, "u_t": u_t.astype(np.float64)}
    if out.topk_centers_px is not None:
        d_top = np.linalg.norm(out.topk_centers_px - gt_p[:, :, None, :], axis=-1)
        targets["u_top"] = ((d_top > cfg.uncertainty_px) | ~gt_vis[:, :, None]).astype(np.float64)
    return targets


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def compute_loss(outputs: list, gt_tracks: np.ndarray, gt_visible: np.ndarray,
                 model_cfg: ModelConfig, lambda_cls: float):
    """Weighted loss over a rollout (Eq-style masking: classification and
    offset terms count only GT-visible started pairs; visibility and
    uncertainty terms count all started pairs).

    outputs: per-frame StepOutput; gt_tracks [T,B,N,2]; gt_visible [T,B,N].
    Returns (scalar Tensor, breakdown dict of floats).
    """
    s = float(model_cfg.stride)
    frame_hw = model_cfg.frame_hw
    cls_sum = off_sum = vis_sum = unc_sum = utop_sum = None
    n_vis = n_act = 0.0

    def _add(acc, term):
        return term if acc is None else T.add(acc, term)

    for t, out in enumerate(outputs):
        gt_p = gt_tracks[t]
        gt_v = gt_visible[t]
        tgt = build_targets(out, gt_p, gt_v, model_cfg, frame_hw)
        act = out.active
        vis_mask = (gt_v & act).astype(np.float64)
        act_mask = act.astype(np.float64)
        n_vis += vis_mask.sum()
        n_act += act_mask.sum()

        ce = T.add(T.neg(T.gather_last(out.log_c, tgt["c_patch"])),
                   T.neg(T.gather_last(out.log_c_dec, tgt["c_patch"])))
        cls_sum = _add(cls_sum, T.tsum(T.mul(ce, Tensor(vis_mask))))

        if out.offsets:
            layer_terms = None
            for o_l in out.offsets:
                d = T.minimum_const(T.absolute(T.sub(o_l, Tensor(tgt["o_t"]))), s)
                layer_terms = _add(layer_terms, T.tsum(d, axis=-1))
            l1 = T.mul(layer_terms, 1.0 / len(out.offsets))
            off_sum = _add(off_sum, T.tsum(T.mul(l1, Tensor(vis_mask))))

        vis_sum = _add(vis_sum, T.tsum(T.mul(
            T.bce_with_logits(out.v_logit, gt_v.astype(np.float64)), Tensor(act_mask))))
        unc_sum = _add(unc_sum, T.tsum(T.mul(
            T.bce_with_logits(out.u_logit, tgt["u_t"]), Tensor(act_mask))))
        if out.u_top_logits is not None:
            per_k = T.tmean(T.bce_with_logits(out.u_top_logits, tgt["u_top"]), axis=-1)
            utop_sum = _add(utop_sum, T.tsum(T.mul(per_k, Tensor(act_mask))))

    vis_denom = 1.0 / max(n_vis, 1.0)
    act_denom = 1.0 / max(n_act, 1.0)
    zero = Tensor(np.zeros(()))
    parts = {
        "cls": T.mul(cls_sum, lambda_cls * vis_denom) if cls_sum is not None else zero,
        "offset": T.mul(off_sum, vis_denom) if off_sum is not None else zero,
        "vis": T.mul(vis_sum, act_denom) if vis_sum is not None else zero,
        "unc": T.mul(unc_sum, act_denom) if unc_sum is not None else zero,
        "u_top": T.mul(utop_sum, act_denom) if utop_sum is not None else zero,
    }
    loss = parts["cls"]
    for key in ("offset", "vis", "unc", "u_top"):
        loss = T.add(loss, parts[key])
    breakdown = {k: float(v.data) for k, v in parts.items()}
    breakdown["total"] = float(loss.data)
    return loss, breakdown


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def collate(clips: list):
    """Stack same-shaped clips into [B,T,...] arrays."""
    frames = np.stack([c.frames for c in clips]).astype(np.float64)
    tracks = np.stack([c.tracks for c in clips])
    visible = np.stack([c.visible for c in clips])
    starts = np.stack([c.start_rows for c in clips])
    query_px = np.stack([c.query_px for c in clips])
    return frames, tracks, visible, starts, query_px


def rollout_loss(model: TrackerModel, clips: list, lambda_cls: float,
                 train_rng: np.random.Generator | None):
    """Full online rollout over a batch of clips, returning the training loss.

    Frame-by-frame with memory writes, exactly like inference; ground-truth
    visibility gates the memory occlusion flags and the loss masks.
    """
    frames, tracks, visible, starts, query_px = collate(clips)
    b, t_total = frames.shape[0], frames.shape[1]
    n = tracks.shape[2]
    if t_total < 2:
        raise DataError("training clips must have length >= 2")
    state = model.new_state(b, n, starts, query_px)
    outputs = []
    for t in range(t_total):
        out = model.frame_step(state, frames[:, t], t, train_rng=train_rng,
                               gt_occluded=~visible[:, t])
        outputs.append(out)
    gt_tracks = np.moveaxis(tracks, 0, 1)    # [T,B,N,2]
    gt_visible = np.moveaxis(visible, 0, 1)
    return compute_loss(outputs, gt_tracks, gt_visible, model.cfg, lambda_cls)


# ---------------------------------------------------------------------------
# optimizer / schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay adaptive moments."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.wd * p.data)

    def state_arrays(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict):
        self.t = int(arrays["t"])
        for k in self.params:
            self.m[k] = np.asarray(arrays[f"m/{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(arrays[f"v/{k}"], dtype=np.float64).copy()


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over warmup_frac of the run, then cosine decay to ~0."""
    warm = max(1, round(cfg.iterations * cfg.warmup_frac))
    if step < warm:
        return cfg.lr_max * step / warm
    prog = (step - warm) / max(1, cfg.iterations - warm)
    return cfg.lr_max * 0.5 * (1.0 + np.cos(np.pi * prog))


# ---------------------------------------------------------------------------
# training loop + checkpointing
# ---------------------------------------------------------------------------


def train_step(model: TrackerModel, clips: list, opt: AdamW, cfg: TrainConfig,
               step: int, rng: np.random.Generator):
    """One optimization step on a batch of clips; aborts on non-finite loss."""
    with T.finite_checks(False):
        loss, breakdown = rollout_loss(model, clips, cfg.lambda_cls, rng)
        if not np.isfinite(loss.data):
            T.tape().reset()
            raise NumericError(f"non-finite loss at step {step}: {breakdown}")
        T.backward(loss)
    grad_norm = opt.clip_global_norm(cfg.clip_norm)
    opt.step(lr_at(step, cfg))
    opt.zero_grad()
    breakdown["grad_norm"] = grad_norm
    breakdown["lr"] = lr_at(step, cfg)
    return breakdown


def train(model: TrackerModel, dataset: list, cfg: TrainConfig,
          checkpoint_path=None, resume: dict | None = None,
          on_step=None) -> list:
    """Full training run; returns per-step loss history.

    With `resume` (a loaded checkpoint dict) the run continues bit-exactly:
    optimizer moments, RNG state and iteration counter are restored.
    """
    opt = AdamW(model.params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    history = []
    if resume is not None:
        model.load_param_arrays(resume["params"])
        opt.load_state_arrays(resume["opt"])
        rng.bit_generator.state = resume["meta"]["rng_state"]
        start = resume["meta"]["iteration"]
        history = list(resume["meta"].get("history", []))
    for it in range(start, cfg.iterations):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = [dataset[i] for i in idx]
        stats = train_step(model, batch, opt, cfg, it, rng)
        history.append(stats["total"])
        if on_step is not None:
            on_step(it, stats)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, cfg, cfg.iterations, rng, history)
    return history


def save_checkpoint(path, model: TrackerModel, opt: AdamW, cfg: TrainConfig,
                    iteration: int, rng: np.random.Generator, history=None):
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_dict(),
        "train_cfg": cfg.to_dict(),
        "iteration": iteration,
        "rng_state": rng.bit_generator.state,
        "history": list(history or []),
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {meta['version']}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        opt = {k[len("opt/"):]: z[k] for k in z.files if k.startswith("opt/")}
    return {"meta": meta, "params": params, "opt": opt}


def model_from_checkpoint(path) -> TrackerModel:
    ck = load_checkpoint(path)
    model = TrackerModel(ModelConfig.from_dict(ck["meta"]["model_cfg"]))
    model.load_param_arrays(ck["params"])
    return model
