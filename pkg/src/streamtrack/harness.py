"""Online tracker runtime: streaming sessions with suspend/resume, TAP-Vid
style metrics against a brute-force-checkable definition, drift analysis, the
static baseline, and the ablation runner.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import LabeledClip
from .encoder import Frame, QuerySpec
from .errors import ContractError, InputError, VersionError
from .model import TrackerModel, TrackState
from .tensor import Tensor

THRESHOLDS = (1, 2, 4, 8, 16)
SESSION_VERSION = 1


@dataclass
class SessionConfig:
    k_memory: int | None = None          # K_i; None keeps the trained capacity
    topk: int | None = None              # inference-time k override
    visibility_threshold: float | None = None
    support_grid: bool = False
    support_grid_size: int = 6

    def to_dict(self):
        return {"k_memory": self.k_memory, "topk": self.topk,
                "visibility_threshold": self.visibility_threshold,
                "support_grid": self.support_grid,
                "support_grid_size": self.support_grid_size}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def visible_flag(v_prob, threshold: float):
    """A point counts as visible only when its probability strictly exceeds
    the threshold."""
    return np.asarray(v_prob) > threshold


class TrackerSession:
    """One video's streaming state. Frames arrive strictly in order (1-based
    indices); no operation ever reads beyond the current frame."""

    def __init__(self, model: TrackerModel, queries: list, cfg: SessionConfig | None = None):
        self.model = model
        self.cfg = cfg or SessionConfig()
        self.vis_threshold = (self.cfg.visibility_threshold
                              if self.cfg.visibility_threshold is not None
                              else model.cfg.visibility_threshold)
        self.queries = list(queries)
        self.n_user = len(self.queries)
        starts = [q.start_frame - 1 for q in self.queries]
        px = [list(q.position) for q in self.queries]
        if self.cfg.support_grid:
            g = self.cfg.support_grid_size
            h, w = model.cfg.frame_hw
            xs = (np.arange(g) + 0.5) * w / g - 0.5
            ys = (np.arange(g) + 0.5) * h / g - 0.5
            for y in ys:
                for x in xs:
                    starts.append(0)
                    px.append([float(x), float(y)])
        self.state = model.new_state(1, len(starts), np.asarray(starts)[None, :],
                                     np.asarray(px)[None, :, :],
                                     k_memory=self.cfg.k_memory)
        self.frame_index = 0

    def step(self, frame) -> list:
        """Process the next frame; returns one record per started user query."""
        if isinstance(frame, Frame):
            if frame.index != self.frame_index + 1:
                raise ContractError(
                    f"out-of-order frame: got index {frame.index}, expected "
                    f"{self.frame_index + 1}")
            image = frame.image
        else:
            image = frame
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected [H,W,3] frame, got {image.shape}")
        t = self.frame_index
        with T.no_grad():
            out = self.model.frame_step(self.state, image[None], t,
                                        topk=self.cfg.topk)
        self.frame_index += 1
        records = []
        for i in range(self.n_user):
            if not out.active[0, i]:
                continue
            v = float(out.v_prob[0, i])
            offset = (out.offsets[-1].data[0, i] if out.offsets
                      else np.zeros(2))
            rec = {
                "frame": self.frame_index,
                "query": i,
                "point": out.p_hat.data[0, i].tolist(),
                "patch_center": out.centers_px[0, i].tolist(),
                "offset": np.asarray(offset).tolist(),
                "visibility": v,
                "visible": bool(v > self.vis_threshold),
                "uncertainty": float(out.u_prob[0, i]),
            }
            if out.u_top_logits is not None:
                rec["top_uncertainties"] = _sigmoid(out.u_top_logits.data[0, i]).tolist()
            records.append(rec)
        self._last_output = out
        return records

    # -- suspend / resume ---------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": SESSION_VERSION,
            "model_cfg": self.model.cfg.to_dict(),
            "session_cfg": self.cfg.to_dict(),
            "queries": [[q.start_frame, list(map(float, q.position))] for q in self.queries],
            "n_user": self.n_user,
            "frame_index": self.frame_index,
        }
        arrays = {f"param/{k}": v.data for k, v in self.model.params.items()}
        arrays["q_init"] = self.state.q_init.data
        arrays["start_rows"] = self.state.start_rows
        arrays["query_px"] = self.state.query_px
        for prefix, bank in (("sbank", self.state.sbank), ("cbank", self.state.cbank)):
            for k, v in bank.state_arrays().items():
                arrays[f"{prefix}/{k}"] = v
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), np.uint8),
                 **arrays)

    @classmethod
    def load(cls, path) -> "TrackerSession":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta["version"] != SESSION_VERSION:
                raise VersionError(f"unsupported session version {meta['version']}")
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
        model = TrackerModel(ModelConfig.from_dict(meta["model_cfg"]))
        model.load_param_arrays(
            {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
        queries = [QuerySpec(int(s), tuple(p)) for s, p in meta["queries"]]
        sess = cls(model, queries, SessionConfig.from_dict(meta["session_cfg"]))
        sess.frame_index = meta["frame_index"]
        sess.state.q_init = Tensor(arrays["q_init"])
        sess.state.t = meta["frame_index"]
        for prefix, bank in (("sbank", sess.state.sbank), ("cbank", sess.state.cbank)):
            bank.load_state({k[len(prefix) + 1:]: v for k, v in arrays.items()
                             if k.startswith(prefix + "/")})
        return sess


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def track_clip(model: TrackerModel, clip: LabeledClip, cfg: SessionConfig | None = None):
    """Stream a clip through a session.

    Returns (pred_points [T,N,2], pred_visible [T,N], records list).
    Entries before a query's start frame hold its query position and True.
    """
    specs = [QuerySpec(int(r) + 1, (float(p[0]), float(p[1])))
             for r, p in zip(clip.start_rows, clip.query_px)]
    sess = TrackerSession(model, specs, cfg)
    t_total, n = clip.tracks.shape[0], clip.tracks.shape[1]
    points = np.tile(clip.query_px[None, :, :], (t_total, 1, 1)).astype(np.float64)
    vis = np.ones((t_total, n), dtype=bool)
    records = []
    for t in range(t_total):
        recs = sess.step(Frame(clip.frames[t].astype(np.float64), t + 1))
        for r in recs:
            points[t, r["query"]] = r["point"]
            vis[t, r["query"]] = r["visible"]
        records.extend(recs)
    return points, vis, records


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def compute_metrics(pred_points, pred_visible, gt_tracks, gt_visible, start_rows,
                    thresholds=THRESHOLDS) -> dict:
    """TAP-Vid style metrics over one video, on (query, frame) pairs with
    frame >= the query's start frame.

    OA: fraction of pairs with the correct visibility flag. delta^t: fraction
    of GT-visible pairs localized within t px (strict <). AJ: mean over
    thresholds of TP / (TP + FP + FN), TP = GT-visible & predicted-visible &
    error < t, FP = predicted-visible & (GT-occluded | error >= t), FN =
    GT-visible pairs not counted as TP. Empty denominators count as perfect.
    """
    pred_points = np.asarray(pred_points, dtype=np.float64)
    pred_visible = np.asarray(pred_visible, dtype=bool)
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    gt_visible = np.asarray(gt_visible, dtype=bool)
    if pred_points.shape != gt_tracks.shape or pred_visible.shape != gt_visible.shape \
            or pred_points.shape[:2] != pred_visible.shape:
        raise InputError("prediction/ground-truth shape mismatch")
    t_total, n = pred_visible.shape
    start_rows = np.asarray(start_rows)
    if start_rows.shape != (n,):
        raise InputError(f"start_rows must be [{n}], got {start_rows.shape}")
    valid = np.arange(t_total)[:, None] >= start_rows[None, :]
    err = np.linalg.norm(pred_points - gt_tracks, axis=-1)

    n_pairs = int(valid.sum())
    oa = float((pred_visible == gt_visible)[valid].sum() / n_pairs) if n_pairs else 1.0
    vis_pairs = valid & gt_visible
    n_vis = int(vis_pairs.sum())
    deltas = {}
    jaccards = {}
    for th in thresholds:
        within = err < th
        deltas[th] = float((within & vis_pairs).sum() / n_vis) if n_vis else 1.0
        tp = int((vis_pairs & pred_visible & within).sum())
        fp = int((valid & pred_visible & (~gt_visible | ~within)).sum())
        fn = n_vis - tp
        denom = tp + fp + fn
        jaccards[th] = float(tp / denom) if denom else 1.0
    return {
        "oa": oa,
        "delta": {str(th): deltas[th] for th in thresholds},
        "delta_avg": float(np.mean([deltas[th] for th in thresholds])),
        "aj": float(np.mean([jaccards[th] for th in thresholds])),
        "jaccard": {str(th): jaccards[th] for th in thresholds},
        "n_pairs": n_pairs,
    }


def aggregate_metrics(per_video: list) -> dict:
    """Mean of per-video metrics (the TAP-Vid convention)."""
    if not per_video:
        raise InputError("no per-video metrics to aggregate")
    agg = {
        "oa": float(np.mean([m["oa"] for m in per_video])),
        "delta_avg": float(np.mean([m["delta_avg"] for m in per_video])),
        "aj": float(np.mean([m["aj"] for m in per_video])),
        "delta": {str(th): float(np.mean([m["delta"][str(th)] for m in per_video]))
                  for th in THRESHOLDS},
        "per_video": per_video,
    }
    return agg


def static_baseline_metrics(clips: list) -> dict:
    """Oracle baseline: predict each query's initial location forever, with
    visibility always true."""
    rows = []
    for clip in clips:
        t_total, n = clip.visible.shape
        pred = np.tile(clip.query_px[None, :, :], (t_total, 1, 1))
        vis = np.ones((t_total, n), dtype=bool)
        rows.append(compute_metrics(pred, vis, clip.tracks, clip.visible,
                                    clip.start_rows))
    return aggregate_metrics(rows)


def evaluate(model: TrackerModel, clips: list, cfg: SessionConfig | None = None,
             with_baseline: bool = False) -> dict:
    """Track every clip and aggregate metrics; wall-clock FPS is informational."""
    per_video = []
    frames = 0
    tic = time.perf_counter()
    for clip in clips:
        points, vis, _ = track_clip(model, clip, cfg)
        frames += clip.frames.shape[0]
        per_video.append(compute_metrics(points, vis, clip.tracks, clip.visible,
                                         clip.start_rows))
    out = aggregate_metrics(per_video)
    out["fps"] = frames / max(time.perf_counter() - tic, 1e-9)
    if with_baseline:
        base = static_baseline_metrics(clips)
        base.pop("per_video", None)
        out["baseline"] = base
    return out


# ---------------------------------------------------------------------------
# drift analysis (similarity ratio score)
# ---------------------------------------------------------------------------


def similarity_ratio_score(model: TrackerModel, clip: LabeledClip,
                           cfg: SessionConfig | None = None) -> dict:
    """Per-frame ratio of (memory-updated query . feature at the GT point) to
    (initial query . feature at the GT point), over GT-visible started pairs.
    Frames where the denominator is below 1e-8 in magnitude are skipped."""
    specs = [QuerySpec(int(r) + 1, (float(p[0]), float(p[1])))
             for r, p in zip(clip.start_rows, clip.query_px)]
    sess = TrackerSession(model, specs, cfg)
    t_total, n = clip.tracks.shape[0], clip.tracks.shape[1]
    series = []
    ratios_all = []
    skipped = 0
    for t in range(t_total):
        sess.step(Frame(clip.frames[t].astype(np.float64), t + 1))
        out = sess._last_output
        with T.no_grad():
            pts = clip.tracks[t] / model.cfg.stride
            feats = T.sample_points(out.fmap.f, pts, np.zeros(n, np.int64)).data
        frame_ratios = []
        for i in range(n):
            if not (out.active[0, i] and clip.visible[t, i]):
                continue
            num = float(out.q_init_t.data[0, i] @ feats[i])
            den = float(sess.state.q_init.data[0, i] @ feats[i])
            if abs(den) < 1e-8:
                skipped += 1
                continue
            frame_ratios.append(num / den)
        ratios_all.extend(frame_ratios)
        series.append(float(np.mean(frame_ratios)) if frame_ratios else None)
    mean = float(np.mean(ratios_all)) if ratios_all else None
    return {"series": series, "mean": mean, "skipped": skipped,
            "n_samples": len(ratios_all)}


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "full": {},
    "no_rerank": {"use_rerank": False},
    "no_offset_head": {"use_offset_head": False},
    "visibility_mlp": {"visibility_mlp": True},
    "no_spatial_memory": {"use_spatial_memory": False},
    "no_context_memory": {"use_context_memory": False},
    "no_memory": {"use_spatial_memory": False, "use_context_memory": False},
}


def dataset_hash(clips: list) -> str:
    h = hashlib.sha256()
    for clip in clips:
        h.update(np.ascontiguousarray(clip.frames).tobytes())
        h.update(np.ascontiguousarray(clip.tracks).tobytes())
        h.update(np.ascontiguousarray(clip.visible).tobytes())
    return h.hexdigest()[:16]


def run_ablation(variants: list, base_cfg: ModelConfig, train_cfg: TrainConfig,
                 train_clips: list, eval_clips: list, k_memory_eval=None,
                 on_step=None) -> list:
    """Train and evaluate each variant under a shared seed; returns one row
    per variant, tagged with the (shared) dataset hash.

    A variant is either a name from ABLATION_VARIANTS, "ki=<int>" for an
    inference-time memory-size sweep entry, or a (name, overrides) pair.
    """
    from .training import train

    d_hash = dataset_hash(train_clips)
    e_hash = dataset_hash(eval_clips)
    rows = []
    trained_full = {}
    for variant in variants:
        session_cfg = SessionConfig(k_memory=k_memory_eval)
        if isinstance(variant, tuple):
            name, overrides = variant
        elif variant.startswith("ki="):
            name, overrides = variant, {}
            session_cfg = SessionConfig(k_memory=int(variant[3:]))
        else:
            name, overrides = variant, ABLATION_VARIANTS[variant]
        base = base_cfg.to_dict()
        base.update(overrides)
        cache_key = json.dumps(base, sort_keys=True)
        if cache_key in trained_full:
            model = trained_full[cache_key]
        else:
            model = TrackerModel(ModelConfig.from_dict(base), seed=train_cfg.seed)
            train(model, train_clips, train_cfg, on_step=on_step)
            trained_full[cache_key] = model
        metrics = evaluate(model, eval_clips, session_cfg)
        metrics.pop("per_video", None)
        rows.append({"variant": name, "train_hash": d_hash, "eval_hash": e_hash,
                     "metrics": metrics})
    return rows


# ---------------------------------------------------------------------------
# track output files
# ---------------------------------------------------------------------------


def write_tracks(path, records: list) -> None:
    """JSON lines, one record per (frame, query), plus a binary sidecar with
    exact float64 values for round-trip checks."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    arrays = {
        "frame": np.array([r["frame"] for r in records], dtype=np.int64),
        "query": np.array([r["query"] for r in records], dtype=np.int64),
        "point": np.array([r["point"] for r in records], dtype=np.float64),
        "patch_center": np.array([r["patch_center"] for r in records], dtype=np.float64),
        "offset": np.array([r["offset"] for r in records], dtype=np.float64),
        "visibility": np.array([r["visibility"] for r in records], dtype=np.float64),
        "visible": np.array([r["visible"] for r in records], dtype=bool),
        "uncertainty": np.array([r["uncertainty"] for r in records], dtype=np.float64),
    }
    np.savez(str(path) + ".npz", **arrays)


def read_track_sidecar(path) -> dict:
    with np.load(str(path) + ".npz") as z:
        return {k: z[k] for k in z.files}
