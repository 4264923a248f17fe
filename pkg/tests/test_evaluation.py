import math
from typing import List, Sequence

import numpy as np
import pandas as pd
import pytest
import torch

from tdeedspot.evaluation import (
    ap_from_hits,
    average_precision,
    discriminability,
    discriminability_profile,
    discriminability_summary,
    evaluate,
    map_at,
    match_predictions,
    non_decreasing_fraction,
    per_class_ap,
    pyramid_layer_map,
)
from tdeedspot.models import EventAnnotation, InferCfg, ModelCfg, SpottedEvent
from tdeedspot.spotting import postprocess, spot_videos, video_candidates
from tdeedspot.synthdata import SyntheticVideo
from tdeedspot.tdeed import build_model


def _gt(frame: int, class_id: int = 1, video_id: str = "v") -> EventAnnotation:
    return EventAnnotation(video_id=video_id, frame=frame, class_id=class_id)


def _p(frame: int, score: float, class_id: int = 1, video_id: str = "v") -> SpottedEvent:
    return SpottedEvent(video_id=video_id, frame=frame, class_id=class_id, score=score)


def _ap_oracle(preds: Sequence[SpottedEvent], gts: Sequence[EventAnnotation], delta: int) -> float:
    n_gt = len(gts)
    if n_gt == 0:
        return math.nan
    matched = [False] * n_gt
    tps = []
    for p in sorted(preds, key=lambda q: -q.score):
        cand = [
            (abs(p.frame - g.frame), g.frame, i)
            for i, g in enumerate(gts)
            if not matched[i] and g.video_id == p.video_id and abs(p.frame - g.frame) <= delta
        ]
        if cand:
            matched[min(cand)[2]] = True
        tps.append(bool(cand))
    # VOC-style all-point interpolation
    tp = fp = 0
    rec, prec = [0.0], [0.0]
    for hit in tps:
        tp += hit
        fp += not hit
        rec.append(tp / n_gt)
        prec.append(tp / (tp + fp))
    rec.append(1.0)
    prec.append(0.0)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    return sum((rec[i] - rec[i - 1]) * prec[i] for i in range(1, len(rec)) if rec[i] != rec[i - 1])


FIXTURE_GT = [_gt(10), _gt(20)]
FIXTURE_PREDS = [_p(11, 0.9), _p(40, 0.8), _p(20, 0.7)]


def test_ap_fixture() -> None:
    assert average_precision(FIXTURE_PREDS, FIXTURE_GT, 1, 1) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision(FIXTURE_PREDS, FIXTURE_GT, 1, 0) == pytest.approx(1 / 6)
    assert evaluate(FIXTURE_PREDS, FIXTURE_GT, 1, [0, 1, 2]) == pytest.approx({0: 1 / 6, 1: 5 / 6, 2: 5 / 6})


def test_perfect_and_empty_predictions() -> None:
    gts = [_gt(5), _gt(30, 2), _gt(60, 3)]
    perfect = [_p(g.frame, 1.0, g.class_id) for g in gts]
    assert map_at(perfect, gts, 3, 0) == 1.0
    assert map_at([], gts, 3, 1) == 0.0
    assert ap_from_hits([], 2) == 0.0


def test_classes_without_ground_truth_are_excluded() -> None:
    gts = [_gt(5)]
    preds = [_p(5, 0.9), _p(7, 0.8, class_id=2)]
    aps = per_class_ap(preds, gts, 3, 1)
    assert aps[1] == 1.0
    assert math.isnan(aps[2]) and math.isnan(aps[3])
    assert map_at(preds, gts, 3, 1) == 1.0
    assert map_at(preds, [], 3, 1) == 0.0


def test_each_ground_truth_matches_once() -> None:
    res = match_predictions([_p(10, 0.9), _p(10, 0.8)], [_gt(10)], 0)
    assert res.hits[1] == [(0.9, True), (0.8, False)]
    assert res.gt_counts[1] == 1


def test_nearest_ground_truth_wins_ties_go_earlier() -> None:
    res = match_predictions([_p(12, 0.9), _p(11, 0.5)], [_gt(11), _gt(13)], 1)
    # 12 is equidistant to 11 and 13 and takes 11; 13 is out of reach for 11
    assert [h[1] for h in res.hits[1]] == [True, False]


def test_videos_do_not_cross_match() -> None:
    assert average_precision([_p(10, 0.9, video_id="a")], [_gt(10, video_id="b")], 1, 5) == 0.0


def test_larger_tolerance_on_fixtures() -> None:
    assert map_at(FIXTURE_PREDS, FIXTURE_GT, 1, 2) >= map_at(FIXTURE_PREDS, FIXTURE_GT, 1, 1)
    assert map_at(FIXTURE_PREDS, FIXTURE_GT, 1, 1) >= map_at(FIXTURE_PREDS, FIXTURE_GT, 1, 0)


def test_monotone_score_transform_keeps_ap() -> None:
    squashed = [p.model_copy(update={"score": p.score**3}) for p in FIXTURE_PREDS]
    assert average_precision(squashed, FIXTURE_GT, 1, 1) == average_precision(FIXTURE_PREDS, FIXTURE_GT, 1, 1)


def test_negative_delta() -> None:
    with pytest.raises(ValueError):
        average_precision(FIXTURE_PREDS, FIXTURE_GT, 1, -1)


def test_ap_matches_oracle() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        gts = [_gt(int(f), video_id=f"v{int(rng.integers(0, 2))}") for f in rng.choice(60, size=int(rng.integers(0, 6)), replace=False)]
        scores = rng.permutation(np.linspace(0.05, 1.0, 20))
        preds = [
            _p(int(rng.integers(0, 60)), float(s), video_id=f"v{int(rng.integers(0, 2))}")
            for s in scores[: int(rng.integers(0, 20))]
        ]
        delta = int(rng.integers(0, 4))
        got = average_precision(preds, gts, 1, delta)
        want = _ap_oracle(preds, gts, delta)
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, abs=1e-9)


def test_discriminability_bounds() -> None:
    same = torch.ones(6, 4)
    assert discriminability(same) == pytest.approx(1.0)
    v = torch.randn(4)
    assert discriminability(torch.stack([v, -v])) == pytest.approx(0.0, abs=1e-9)
    assert discriminability(torch.eye(4)) == pytest.approx(0.5)


def test_discriminability_is_scale_invariant() -> None:
    torch.manual_seed(0)
    x = torch.randn(2, 10, 8)
    assert discriminability(3.5 * x) == pytest.approx(discriminability(x), abs=1e-9)


def test_discriminability_profile_rows(tiny_model_cfg: ModelCfg, clip_batch: torch.Tensor) -> None:
    model = build_model(tiny_model_cfg, seed=0)
    df = discriminability_profile(model, [clip_batch, clip_batch[:1]], label="sgp_ed")
    B = tiny_model_cfg.num_blocks
    assert len(df) == 2 * B + 3
    assert list(df.columns) == ["module", "stage_index", "stage", "similarity"]
    assert df["stage_index"].tolist() == list(range(2 * B + 3))
    assert df["similarity"].between(-1.0, 1.0 + 1e-9).all()
    assert model.training


def test_non_decreasing_fraction() -> None:
    assert non_decreasing_fraction([1.0, 2.0, 2.0, 1.0]) == pytest.approx(2 / 3)
    assert non_decreasing_fraction([0.3]) == 1.0


def test_discriminability_summary_skips_input_stages() -> None:
    profile = pd.DataFrame(
        {
            "module": ["transformer"] * 6 + ["sgp_ed"] * 4,
            "stage_index": [0, 1, 2, 3, 4, 5, 0, 1, 2, 3],
            "stage": ["backbone", "positional", "enc0", "enc1", "enc2", "enc3", "backbone", "positional", "enc0", "dec0"],
            "similarity": [0.9, 0.2, 0.3, 0.4, 0.4, 0.6, 0.5, 0.1, 0.4, 0.3],
        }
    )
    summary = discriminability_summary(profile)
    assert summary["module"].tolist() == ["transformer", "sgp_ed"]
    assert summary["final_similarity"].tolist() == [0.6, 0.3]
    assert summary["non_decreasing_fraction"].tolist() == [1.0, 0.0]
    assert summary["rising"].tolist() == [True, False]


def test_per_class_ap_agrees_with_single_class_ap() -> None:
    preds = [_p(10, 0.9), _p(31, 0.8), _p(50, 0.7, class_id=2), _p(52, 0.6, class_id=2), _p(80, 0.5, class_id=3)]
    gts = [_gt(10), _gt(30), _gt(51, class_id=2), _gt(90, class_id=2)]
    for delta in (0, 1, 2):
        aps = per_class_ap(preds, gts, 3, delta)
        for c in (1, 2):
            assert aps[c] == pytest.approx(average_precision(preds, gts, c, delta))
        assert math.isnan(aps[3])


def test_pyramid_layer_map(tiny_model_cfg: ModelCfg, tiny_videos: List[SyntheticVideo]) -> None:
    cfg = tiny_model_cfg.model_copy(update={"temporal_module": "sgp_pyramid"})
    model = build_model(cfg, seed=0)
    infer = InferCfg(threshold=0.1)
    df = pyramid_layer_map(model, tiny_videos, infer, delta=1)
    assert len(df) == cfg.num_blocks + 1
    assert df["stride"].tolist() == [1, 2, 4]
    gts = [e for v in tiny_videos for e in v.events]

    finest = [e for v in tiny_videos for e in postprocess(video_candidates(v, model, 16, infer, scales=[0])[0], infer)]
    assert df["standalone_map"].iloc[0] == pytest.approx(map_at(finest, gts, 4, 1))
    assert df["cumulative_map"].iloc[0] == pytest.approx(df["standalone_map"].iloc[0])

    pooled = spot_videos(tiny_videos, model, 16, infer, ["snms"])["snms"]
    assert df["cumulative_map"].iloc[-1] == pytest.approx(map_at(pooled, gts, 4, 1))
