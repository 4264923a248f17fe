from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch

from tdeedspot.errors import ConfigError
from tdeedspot.models import InferCfg, ModelCfg, SpottedEvent
from tdeedspot.spotting import (
    VideoPredictions,
    clip_starts,
    decode_candidates,
    nms,
    postprocess,
    read_predictions,
    soft_nms,
    spot_videos,
    stitch,
    write_predictions,
)
from tdeedspot.synthdata import SyntheticVideo
from tdeedspot.tdeed import build_model


def _ev(frame: int, score: float, class_id: int = 1, video_id: str = "v") -> SpottedEvent:
    return SpottedEvent(video_id=video_id, frame=frame, class_id=class_id, score=score)


def _key(events: List[SpottedEvent]) -> List[tuple]:
    return sorted((e.video_id, e.class_id, e.frame, round(e.score, 12)) for e in events)


def _random_candidates(rng: np.random.Generator) -> List[SpottedEvent]:
    n = int(rng.integers(0, 25))
    return [
        _ev(
            int(rng.integers(0, 40)),
            float(np.round(rng.uniform(0.05, 1.0), 1)),
            class_id=int(rng.integers(1, 3)),
            video_id=f"v{int(rng.integers(0, 2))}",
        )
        for _ in range(n)
    ]


def _nms_oracle(cands: List[SpottedEvent], window: int) -> List[SpottedEvent]:
    kept = []
    for key in {(c.video_id, c.class_id) for c in cands}:
        group = sorted((c for c in cands if (c.video_id, c.class_id) == key), key=lambda c: (-c.score, c.frame))
        while group:
            best = group.pop(0)
            kept.append(best)
            group = [c for c in group if abs(c.frame - best.frame) > window]
    return kept


def _soft_nms_oracle(cands: List[SpottedEvent], window: int, threshold: float) -> List[SpottedEvent]:
    kept = []
    for key in {(c.video_id, c.class_id) for c in cands}:
        group = sorted((c for c in cands if (c.video_id, c.class_id) == key), key=lambda c: c.frame)
        scores = [c.score for c in group]
        remaining = list(range(len(group)))
        while remaining:
            top = max(remaining, key=lambda i: (scores[i], -i))
            remaining.remove(top)
            for i in remaining:
                df = abs(group[i].frame - group[top].frame)
                if window > 0 and df <= window:
                    scores[i] *= 1.0 - (window - df + 1.0) / (window + 1.0)
        kept.extend(
            c.model_copy(update={"score": s}) for c, s in zip(group, scores) if s > 0.0 and s >= threshold
        )
    return kept


def _video(length: int, size: int = 16) -> SyntheticVideo:
    rng = np.random.default_rng(1)
    frames = rng.integers(0, 256, size=(length, size, size, 3), dtype=np.uint8)
    return SyntheticVideo(video_id="v", frames=frames, events=[], num_classes=4)


def test_clip_starts() -> None:
    assert clip_starts(150, 100, 0.5) == [0, 50]
    assert clip_starts(64, 16, 0.0) == [0, 16, 32, 48]
    assert clip_starts(70, 16, 0.0) == [0, 16, 32, 48, 54]
    assert clip_starts(10, 16, 0.5) == [0]


def test_stitched_rows_are_distributions(tiny_model_cfg: ModelCfg, tiny_videos: List[SyntheticVideo]) -> None:
    model = build_model(tiny_model_cfg, seed=0)
    preds = stitch(tiny_videos[0], model, 16, overlap=0.5)
    assert preds.class_probs.shape == (64, 5)
    assert preds.valid.all()
    assert np.allclose(preds.class_probs.sum(axis=1), 1.0)
    assert np.all(preds.class_probs >= 0.0)


def test_single_clip_stitch_equals_forward(tiny_model_cfg: ModelCfg) -> None:
    model = build_model(tiny_model_cfg, seed=0).eval()
    video = _video(16)
    preds = stitch(video, model, 16)
    clip = torch.from_numpy(np.ascontiguousarray(video.frames_float().transpose(0, 3, 1, 2)))[None]
    with torch.no_grad():
        ref = model(clip)
    assert np.allclose(preds.class_probs, ref.class_probs[0].double().numpy(), atol=1e-5)
    assert np.allclose(preds.displacements, ref.displacements[0].double().numpy(), atol=1e-5)


def test_short_video_is_padded_and_cropped(tiny_model_cfg: ModelCfg) -> None:
    preds = stitch(_video(10), build_model(tiny_model_cfg, seed=0), 16)
    assert preds.length == 10


def test_decode_applies_rounded_displacement() -> None:
    probs = np.zeros((20, 2))
    probs[:, 0] = 1.0
    probs[10] = [0.1, 0.9]
    probs[1] = [0.2, 0.8]
    disp = np.zeros(20)
    disp[10] = -2.0
    disp[1] = -5.4
    preds = VideoPredictions("v", probs, disp, np.ones(20, dtype=bool))
    events = sorted(decode_candidates(preds, 0.5), key=lambda e: e.frame)
    assert [(e.frame, e.class_id) for e in events] == [(0, 1), (8, 1)]
    assert events[1].score == pytest.approx(0.9)


def test_decode_background_only_yields_nothing() -> None:
    probs = np.zeros((12, 3))
    probs[:, 0] = 1.0
    preds = VideoPredictions("v", probs, np.zeros(12), np.ones(12, dtype=bool))
    assert decode_candidates(preds, 0.01) == []
    with pytest.raises(ConfigError):
        decode_candidates(preds, 1.0)


def test_nms_keeps_the_stronger_neighbour() -> None:
    kept = nms([_ev(10, 0.9), _ev(11, 0.8)], 1)
    assert [(e.frame, e.score) for e in kept] == [(10, 0.9)]
    both = nms([_ev(10, 0.9), _ev(11, 0.8, class_id=2)], 1)
    assert len(both) == 2
    assert [e.frame for e in nms([_ev(12, 0.5), _ev(11, 0.5)], 1)] == [11]
    with pytest.raises(ConfigError):
        nms([], -1)


def test_nms_matches_oracle() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        cands = _random_candidates(rng)
        window = int(rng.integers(0, 4))
        assert _key(nms(cands, window)) == _key(_nms_oracle(cands, window))


def test_soft_nms_matches_oracle() -> None:
    rng = np.random.default_rng(1)
    for _ in range(200):
        cands = _random_candidates(rng)
        window = int(rng.integers(0, 4))
        threshold = float(rng.choice([0.0, 0.05, 0.2]))
        assert _key(soft_nms(cands, window, final_threshold=threshold)) == _key(
            _soft_nms_oracle(cands, window, threshold)
        )


def test_soft_nms_single_candidate_and_zero_window() -> None:
    (only,) = soft_nms([_ev(5, 0.4)], 3)
    assert only.score == 0.4
    cands = [_ev(5, 0.4), _ev(6, 0.3), _ev(7, 0.01)]
    assert _key(soft_nms(cands, 0, final_threshold=0.05)) == _key(cands[:2])


def test_soft_nms_linear_fixture() -> None:
    cands = [_ev(10, 0.9), _ev(11, 0.8), _ev(12, 0.6), _ev(15, 0.5), _ev(20, 0.7), _ev(21, 0.2)]
    out = {e.frame: e.score for e in soft_nms(cands, 2, "linear", final_threshold=0.05)}
    expected = {10: 0.9, 11: 0.8 / 3 / 3, 12: 0.4, 15: 0.5, 20: 0.7, 21: 0.2 / 3}
    assert out.keys() == expected.keys()
    for f, s in expected.items():
        assert out[f] == pytest.approx(s, abs=1e-12)
    strict = soft_nms(cands, 2, "linear", final_threshold=0.07)
    assert 21 not in {e.frame for e in strict}


def test_soft_nms_gaussian_decays_neighbours() -> None:
    out = {e.frame: e.score for e in soft_nms([_ev(10, 0.9), _ev(11, 0.8)], 2, "gaussian", sigma=1.0)}
    assert out[10] == 0.9
    assert out[11] == pytest.approx(0.8 * np.exp(-0.5))


def test_soft_nms_with_zero_decay_is_nms() -> None:
    rng = np.random.default_rng(2)
    for _ in range(50):
        cands = _random_candidates(rng)
        window = int(rng.integers(1, 4))
        hard = soft_nms(cands, window, decay=lambda df: np.zeros(df.shape))
        assert _key(hard) == _key(nms(cands, window))


def test_unknown_modes_rejected() -> None:
    with pytest.raises(ConfigError):
        soft_nms([_ev(1, 0.5)], 2, "cubic")  # type: ignore[arg-type]
    with pytest.raises(ConfigError):
        postprocess([_ev(1, 0.5)], InferCfg(), "bogus")
    assert postprocess([_ev(3, 0.5), _ev(1, 0.5)], InferCfg(), "none")[0].frame == 1


def test_spot_videos_per_postproc(tiny_model_cfg: ModelCfg, tiny_videos: List[SyntheticVideo]) -> None:
    model = build_model(tiny_model_cfg, seed=0)
    out = spot_videos(tiny_videos, model, 16, InferCfg(threshold=0.1), ["snms", "nms", "none"])
    assert set(out) == {"snms", "nms", "none"}
    assert len(out["nms"]) <= len(out["none"])
    for events in out.values():
        assert all(0 <= e.frame < 64 and 1 <= e.class_id <= 4 for e in events)


def test_predictions_file(tmp_path: Path) -> None:
    events = [_ev(8, 0.9, video_id="b"), _ev(3, 0.25, class_id=2, video_id="a")]
    fp = write_predictions(Path(tmp_path, "p.json"), events, video_ids=["a", "b", "c"])
    back = read_predictions(fp)
    assert _key(back) == _key(events)
    assert '"video_id": "c"' in fp.read_text()
