"""Tolerance-δ mAP, token discriminability and per-layer pyramid mAP."""

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger as glogger

from tdeedspot.backbone import TokenSequence
from tdeedspot.models import EventAnnotation, InferCfg, SpottedEvent
from tdeedspot.spotting import postprocess, video_candidates
from tdeedspot.synthdata import SyntheticVideo
from tdeedspot.tdeed import TDEED, capture_stages

logger = glogger.bind(classname="evaluation")

COS_EPS: float = 1e-12
# similarity rising over at least this share of layer pairs counts as the rank-loss trend
TREND_MIN_FRACTION: float = 0.75
INPUT_STAGES: Tuple[str, ...] = ("backbone", "positional")


@dataclass
class MatchResult:
    """Greedy matching outcome.

    Attributes:
        hits: ``class_id -> [(score, is_true_positive), ...]`` in descending-score order.
        gt_counts: ``class_id -> number of ground-truth events``.
    """

    hits: Dict[int, List[Tuple[float, bool]]] = field(default_factory=dict)
    gt_counts: Dict[int, int] = field(default_factory=dict)


def _ranked(preds: Iterable[SpottedEvent]) -> List[SpottedEvent]:
    return sorted(preds, key=lambda p: (-p.score, p.video_id, p.frame))


def match_class(
    preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], class_id: int, delta: int
) -> Tuple[List[Tuple[float, bool]], int]:
    """Match predictions of one class, in descending score order, to the nearest unmatched GT
    of the same video within ``delta`` frames (ties: earlier GT)."""
    gt_frames: Dict[str, List[int]] = defaultdict(list)
    for g in gts:
        if g.class_id == class_id:
            gt_frames[g.video_id].append(g.frame)
    for frames in gt_frames.values():
        frames.sort()
    used: Dict[str, List[bool]] = {vid: [False] * len(fr) for vid, fr in gt_frames.items()}

    hits: List[Tuple[float, bool]] = []
    for p in _ranked(q for q in preds if q.class_id == class_id):
        frames = gt_frames.get(p.video_id, [])
        best: Optional[int] = None
        best_dist = delta + 1
        for i, f in enumerate(frames):
            dist = abs(p.frame - f)
            if not used[p.video_id][i] and dist <= delta and dist < best_dist:
                best, best_dist = i, dist
        if best is not None:
            used[p.video_id][best] = True
        hits.append((p.score, best is not None))
    return hits, sum(len(fr) for fr in gt_frames.values())


def match_predictions(preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], delta: int) -> MatchResult:
    """Per-class greedy matching of all classes present in predictions or ground truth."""
    res = MatchResult()
    for c in sorted({p.class_id for p in preds} | {g.class_id for g in gts}):
        res.hits[c], res.gt_counts[c] = match_class(preds, gts, c, delta)
    return res


def ap_from_hits(hits: Sequence[Tuple[float, bool]], num_gt: int) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    if num_gt == 0:
        return math.nan
    if not hits:
        return 0.0
    tp = np.array([h[1] for h in hits], dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * envelope))


def average_precision(
    preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], class_id: int, delta: int
) -> float:
    """AP of one class at tolerance ``delta``; ``nan`` when the class has no ground truth."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    hits, n = match_class(preds, gts, class_id, delta)
    return ap_from_hits(hits, n)


def per_class_ap(
    preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], num_classes: int, delta: int
) -> Dict[int, float]:
    """AP of classes ``1..num_classes`` from one matching pass; ``nan`` for classes without ground truth."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    res = match_predictions(preds, gts, delta)
    return {c: ap_from_hits(res.hits.get(c, []), res.gt_counts.get(c, 0)) for c in range(1, num_classes + 1)}


def map_at(preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], num_classes: int, delta: int) -> float:
    """Unweighted mean of the per-class APs over classes with at least one ground-truth event."""
    aps = [ap for ap in per_class_ap(preds, gts, num_classes, delta).values() if not math.isnan(ap)]
    return float(np.mean(aps)) if aps else 0.0


def evaluate(
    preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], num_classes: int, deltas: Sequence[int]
) -> Dict[int, float]:
    """``delta -> mAP``."""
    return {d: map_at(preds, gts, num_classes, d) for d in deltas}


# ---------------------------------------------------------------------------------------------
# discriminability
# ---------------------------------------------------------------------------------------------


def discriminability(tokens: torch.Tensor | TokenSequence) -> float:
    """Mean cosine similarity between each token and the sequence-mean token.

    Accepts ``L x d`` or ``N x L x d`` (averaged over the batch). Lower means more
    discriminable tokens.
    """
    x = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    x = x.detach().double()
    if x.dim() == 2:
        x = x.unsqueeze(0)
    mean = x.mean(dim=1, keepdim=True)
    dot = (x * mean).sum(dim=-1)
    norm = (x.norm(dim=-1) * mean.norm(dim=-1)).clamp_min(COS_EPS)
    return float((dot / norm).mean())


def discriminability_profile(model: TDEED, probe_batches: Iterable[torch.Tensor], label: str = "") -> pd.DataFrame:
    """Mean discriminability after the backbone, the positional encoding and every temporal layer.

    Returns:
        DataFrame: ``module, stage_index, stage, similarity`` with one row per hooked stage.
    """
    was_training = model.training
    model.eval()
    sums: Dict[str, List[float]] = defaultdict(list)
    order: List[str] = [name for name, _ in model.stage_modules()]
    with torch.no_grad():
        for frames in probe_batches:
            for name, toks in capture_stages(model, frames).items():
                sums[name].append(discriminability(toks))
    if was_training:
        model.train()
    rows = [
        {"module": label or model.cfg.temporal_module, "stage_index": i, "stage": name, "similarity": float(np.mean(sums[name]))}
        for i, name in enumerate(order)
        if sums[name]
    ]
    return pd.DataFrame(rows, columns=["module", "stage_index", "stage", "similarity"])


def non_decreasing_fraction(values: Sequence[float]) -> float:
    """Fraction of consecutive pairs with ``v[i+1] >= v[i]``."""
    if len(values) < 2:
        return 1.0
    pairs = list(zip(values[:-1], values[1:]))
    return sum(b >= a for a, b in pairs) / len(pairs)


def discriminability_summary(profile: pd.DataFrame, min_fraction: float = TREND_MIN_FRACTION) -> pd.DataFrame:
    """Per module: final-stage similarity and how often similarity grows from one temporal layer to the next.

    The backbone and positional stages are left out of the trend; ``rising`` is set when the
    non-decreasing fraction reaches ``min_fraction``.
    """
    rows = []
    for module, part in profile.groupby("module", sort=False):
        part = part.sort_values("stage_index")
        layers = part[~part["stage"].isin(INPUT_STAGES)]["similarity"].tolist()
        frac = non_decreasing_fraction(layers)
        rows.append(
            {
                "module": module,
                "final_similarity": float(part["similarity"].iloc[-1]),
                "non_decreasing_fraction": frac,
                "rising": frac >= min_fraction,
            }
        )
    return pd.DataFrame(rows, columns=["module", "final_similarity", "non_decreasing_fraction", "rising"])


# ---------------------------------------------------------------------------------------------
# pyramid
# ---------------------------------------------------------------------------------------------


def pyramid_layer_map(
    model: TDEED,
    videos: Sequence[SyntheticVideo],
    cfg: InferCfg,
    delta: int,
    L: Optional[int] = None,
    num_classes: Optional[int] = None,
) -> pd.DataFrame:
    """Per-layer mAP of a feature pyramid.

    ``standalone`` uses the candidates of layer ``j`` only; ``cumulative`` pools layers ``0..j``
    before suppression.

    Returns:
        DataFrame: ``layer, stride, standalone_map, cumulative_map`` with one row per layer.
    """
    L = L or model.cfg.clip_length
    C = num_classes or model.cfg.num_classes
    gts = [e for v in videos for e in v.events]
    per_video = [video_candidates(v, model, L, cfg) for v in videos]
    n_layers = len(per_video[0]) if per_video else 0
    rows = []
    for j in range(n_layers):
        standalone: List[SpottedEvent] = []
        cumulative: List[SpottedEvent] = []
        for scales in per_video:
            standalone.extend(postprocess(scales[j], cfg))
            cumulative.extend(postprocess([c for s in scales[: j + 1] for c in s], cfg))
        rows.append(
            {
                "layer": j,
                "stride": model.cfg.k**j,
                "standalone_map": map_at(standalone, gts, C, delta),
                "cumulative_map": map_at(cumulative, gts, C, delta),
            }
        )
        logger.debug(f"layer {j}: {rows[-1]}")
    return pd.DataFrame(rows, columns=["layer", "stride", "standalone_map", "cumulative_map"])
