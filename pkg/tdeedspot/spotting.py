"""Full-video inference: overlapping-clip stitching, displacement decoding and suppression."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger as glogger

from tdeedspot.Helper import get_pretty_dict_json_no_sort
from tdeedspot.errors import ConfigError, ContractError
from tdeedspot.models import InferCfg, SpottedEvent
from tdeedspot.synthdata import SyntheticVideo
from tdeedspot.tdeed import TDEED

logger = glogger.bind(classname="spotting")


@dataclass
class VideoPredictions:
    """Stitched predictions of one video at one temporal scale.

    Attributes:
        video_id: Source video.
        class_probs: ``T x (C+1)`` averaged, re-normalized rows.
        displacements: ``T`` averaged displacements (original frames).
        valid: ``T`` mask of frames that carry a prediction (every frame at stride 1, the
            anchor frames ``t * stride`` at coarser pyramid scales).
        stride: Frames per prediction position of the producing scale.
    """

    video_id: str
    class_probs: np.ndarray
    displacements: np.ndarray
    valid: np.ndarray
    stride: int = 1

    @property
    def length(self) -> int:
        return int(self.class_probs.shape[0])


def clip_starts(video_length: int, L: int, overlap: float) -> List[int]:
    """Clip start frames: every ``L*(1-overlap)`` frames, last clip right-aligned."""
    if video_length <= L:
        return [0]
    step = max(1, int(round(L * (1.0 - overlap))))
    starts = list(range(0, video_length - L + 1, step))
    if starts[-1] + L < video_length:
        starts.append(video_length - L)
    return starts


@torch.no_grad()
def stitch_scales(
    video: SyntheticVideo,
    model: TDEED,
    L: int,
    overlap: float = 0.5,
    batch_clips: int = 4,
) -> List[VideoPredictions]:
    """Run ``model`` over overlapping clips and average the per-frame predictions.

    Videos shorter than ``L`` are padded with their last frame (a warning is logged) and the
    predictions cropped back.

    Returns:
        list[VideoPredictions]: One entry per model scale (a single entry for non-pyramid models).
    """
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    T = video.length
    frames = video.frames_float()
    if T < L:
        logger.warning(f"{video.video_id}: {T} frames < clip length {L}, padding with the last frame")
        frames = np.concatenate([frames, np.repeat(frames[-1:], L - T, axis=0)], axis=0)
    starts = clip_starts(T, L, overlap)

    sums: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    strides: List[int] = []
    for b in range(0, len(starts), batch_clips):
        chunk = starts[b : b + batch_clips]
        clips = np.stack([frames[s : s + L] for s in chunk]).transpose(0, 1, 4, 2, 3)
        outs = model.forward_all(torch.from_numpy(np.ascontiguousarray(clips)).to(device))
        if not sums:
            C1 = int(outs[0].class_probs.shape[-1])
            sums = [(np.zeros((T, C1)), np.zeros(T), np.zeros(T)) for _ in outs]
            strides = [o.stride for o in outs]
        for (psum, dsum, cnt), out in zip(sums, outs):
            probs = out.class_probs.double().cpu().numpy()
            disp = out.displacements.double().cpu().numpy()
            for ci, s in enumerate(chunk):
                anchors = s + np.arange(probs.shape[1]) * out.stride
                keep = anchors < T
                np.add.at(psum, anchors[keep], probs[ci, keep])
                np.add.at(dsum, anchors[keep], disp[ci, keep])
                np.add.at(cnt, anchors[keep], 1.0)
    if was_training:
        model.train()

    ret: List[VideoPredictions] = []
    for (psum, dsum, cnt), stride in zip(sums, strides):
        valid = cnt > 0
        probs = np.zeros_like(psum)
        probs[:, 0] = 1.0
        probs[valid] = psum[valid] / cnt[valid, None]
        probs[valid] /= probs[valid].sum(axis=1, keepdims=True)
        disp = np.zeros_like(dsum)
        disp[valid] = dsum[valid] / cnt[valid]
        ret.append(
            VideoPredictions(video_id=video.video_id, class_probs=probs, displacements=disp, valid=valid, stride=stride)
        )
    return ret


def stitch(video: SyntheticVideo, model: TDEED, L: int, overlap: float = 0.5, batch_clips: int = 4) -> VideoPredictions:
    """Full-length stitched predictions at the finest scale."""
    return stitch_scales(video, model, L, overlap, batch_clips)[0]


def decode_candidates(preds: VideoPredictions, threshold: float) -> List[SpottedEvent]:
    """Every (frame, class) with probability above ``threshold`` becomes a candidate at
    ``clamp(frame + round(displacement), 0, T-1)``."""
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"must be in [0, 1), got {threshold}", field="threshold")
    T = preds.length
    frames = np.nonzero(preds.valid)[0]
    ev = preds.class_probs[frames, 1:]
    rows, cols = np.nonzero(ev > threshold)
    src = frames[rows]
    target = np.clip(src + np.rint(preds.displacements[src]).astype(np.int64), 0, T - 1)
    return [
        SpottedEvent(video_id=preds.video_id, frame=int(f), class_id=int(c) + 1, score=float(min(1.0, p)))
        for f, c, p in zip(target, cols, ev[rows, cols])
    ]


def _groups(cands: Iterable[SpottedEvent]) -> Dict[Tuple[str, int], List[SpottedEvent]]:
    groups: Dict[Tuple[str, int], List[SpottedEvent]] = {}
    for c in cands:
        groups.setdefault((c.video_id, c.class_id), []).append(c)
    return groups


def _ordered(events: Iterable[SpottedEvent]) -> List[SpottedEvent]:
    return sorted(events, key=lambda e: (e.video_id, e.frame, e.class_id, -e.score))


def nms(cands: Sequence[SpottedEvent], window: int) -> List[SpottedEvent]:
    """Per (video, class): keep the best candidate, drop others within ``±window``, repeat.

    Ties go to the earlier frame.
    """
    if window < 0:
        raise ConfigError(f"must be >= 0, got {window}", field="nms_window")
    kept: List[SpottedEvent] = []
    for group in _groups(cands).values():
        frames = np.array([e.frame for e in group], dtype=np.int64)
        scores = np.array([e.score for e in group], dtype=np.float64)
        order = np.lexsort((frames, -scores))
        alive = np.ones(len(group), dtype=bool)
        for i in order:
            if not alive[i]:
                continue
            kept.append(group[i])
            alive[np.abs(frames - frames[i]) <= window] = False
    return _ordered(kept)


def _linear_decay(window: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda df: 1.0 - (window - df + 1.0) / (window + 1.0)


def _gaussian_decay(sigma: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda df: np.exp(-(df.astype(np.float64) ** 2) / (2.0 * sigma * sigma))


def soft_nms(
    cands: Sequence[SpottedEvent],
    window: int,
    mode: Literal["linear", "gaussian"] = "linear",
    sigma: float = 1.0,
    final_threshold: float = 0.0,
    decay: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> List[SpottedEvent]:
    """Soft-NMS per (video, class).

    Repeatedly select the highest remaining candidate (ties: earlier frame) and multiply the
    score of every remaining candidate within ``±window`` by the decay factor of its frame
    distance. Candidates whose final score is below ``final_threshold`` (or not positive) are
    dropped. ``window=0`` means no decay.

    Args:
        cands: Candidates.
        window: Decay half-window in frames.
        mode: ``linear``: ``1 - (window-|df|+1)/(window+1)``; ``gaussian``: ``exp(-df^2/(2 sigma^2))``.
        sigma: Gaussian width.
        final_threshold: Output threshold.
        decay: Override of the decay factor as a function of ``|df|``.
    """
    if window < 0:
        raise ConfigError(f"must be >= 0, got {window}", field="snms_window")
    if decay is None:
        match mode:
            case "linear":
                decay = _linear_decay(window)
            case "gaussian":
                if sigma <= 0:
                    raise ConfigError(f"must be > 0, got {sigma}", field="sigma")
                decay = _gaussian_decay(sigma)
            case _:
                raise ConfigError(f"unknown soft-nms mode {mode!r}", field="snms_mode")

    kept: List[SpottedEvent] = []
    for group in _groups(cands).values():
        order = sorted(range(len(group)), key=lambda i: group[i].frame)
        frames = np.array([group[i].frame for i in order], dtype=np.int64)
        scores = np.array([group[i].score for i in order], dtype=np.float64)
        remaining = np.ones(len(order), dtype=bool)
        while remaining.any():
            masked = np.where(remaining, scores, -np.inf)
            top = int(np.argmax(masked))
            remaining[top] = False
            if window > 0:
                df = np.abs(frames - frames[top])
                near = remaining & (df <= window)
                scores[near] = scores[near] * decay(df[near])
        for j, i in enumerate(order):
            s = float(scores[j])
            if s > 0.0 and s >= final_threshold:
                kept.append(group[i].model_copy(update={"score": min(1.0, s)}))
    return _ordered(kept)


def postprocess(cands: Sequence[SpottedEvent], cfg: InferCfg, postproc: Optional[str] = None) -> List[SpottedEvent]:
    """Apply the configured (or the given) suppression."""
    match postproc or cfg.postproc:
        case "snms":
            return soft_nms(cands, cfg.snms_window, cfg.snms_mode, cfg.sigma, cfg.final_threshold)
        case "nms":
            return nms(cands, cfg.nms_window)
        case "none":
            return _ordered(cands)
        case other:
            raise ConfigError(f"unknown post-processing {other!r}", field="postproc")


def video_candidates(
    video: SyntheticVideo, model: TDEED, L: int, cfg: InferCfg, scales: Optional[Sequence[int]] = None
) -> List[List[SpottedEvent]]:
    """Decoded, unsuppressed candidates of a video, one list per model scale (or the selected ``scales``)."""
    per_scale = stitch_scales(video, model, L, cfg.overlap, cfg.batch_clips)
    idx = range(len(per_scale)) if scales is None else scales
    return [decode_candidates(per_scale[j], cfg.threshold) for j in idx]


def spot_videos(
    videos: Sequence[SyntheticVideo],
    model: TDEED,
    L: int,
    cfg: InferCfg,
    postprocs: Sequence[str] = ("snms",),
    noisy: bool = False,
) -> Dict[str, List[SpottedEvent]]:
    """Spotted events of every video for each requested post-processing.

    Candidates of all scales of a pyramid model are pooled before suppression.
    """
    log = logger.bind(skiplog=not noisy)
    ret: Dict[str, List[SpottedEvent]] = {p: [] for p in postprocs}
    for v in videos:
        cands = [c for scale in video_candidates(v, model, L, cfg) for c in scale]
        for p in postprocs:
            ret[p].extend(postprocess(cands, cfg, p))
        log.debug(f"{v.video_id}: {len(cands)} candidates")
    return ret


def write_predictions(fp: Path, events: Sequence[SpottedEvent], video_ids: Optional[Sequence[str]] = None) -> Path:
    """Export ``[{video_id, events: [{frame, class, score}]}]``; videos without events are kept when listed."""
    by_video: Dict[str, List[SpottedEvent]] = {vid: [] for vid in (video_ids or [])}
    for e in events:
        by_video.setdefault(e.video_id, []).append(e)
    doc = [
        {
            "video_id": vid,
            "events": [{"frame": e.frame, "class": e.class_id, "score": e.score} for e in _ordered(evs)],
        }
        for vid, evs in sorted(by_video.items())
    ]
    fp.parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "w", encoding="utf-8") as fout:
        fout.write(get_pretty_dict_json_no_sort(doc, indent=2))
        fout.write("\n")
    return fp


def read_predictions(fp: Path) -> List[SpottedEvent]:
    """Read a predictions export (a list of per-video objects or a single one)."""
    with open(fp, encoding="utf-8") as fin:
        doc = json.load(fin)
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list):
        raise ContractError(f"{fp}: predictions must be a list of per-video objects")
    return [
        SpottedEvent(video_id=v["video_id"], frame=int(e["frame"]), class_id=int(e["class"]), score=float(e["score"]))
        for v in doc
        for e in v.get("events", [])
    ]
