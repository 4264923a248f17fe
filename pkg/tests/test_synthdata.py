import dataclasses
from typing import List

import numpy as np
import pytest
import torch

from tdeedspot.errors import ConfigError, ContractError, RangeError
from tdeedspot.models import AugmentCfg, EventAnnotation, GeneratorSpec
from tdeedspot.synthdata import (
    SyntheticVideo,
    assign_targets,
    augment,
    collate_clips,
    generate_dataset,
    mixup,
    sample_clip,
    targets_at_stride,
)


def _video(length: int, events: List[tuple], num_classes: int = 4, size: int = 8) -> SyntheticVideo:
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 256, size=(length, size, size, 3), dtype=np.uint8)
    evs = [EventAnnotation(video_id="v", frame=f, class_id=c) for f, c in events]
    return SyntheticVideo(video_id="v", frames=frames, events=evs, num_classes=num_classes)


@pytest.mark.parametrize("sparsity, expected", [(0.002, 2), (0.022, 22)])
def test_event_count_follows_sparsity(sparsity: float, expected: int) -> None:
    spec = GeneratorSpec(num_videos=1, video_length=1000, num_classes=4, sparsity=sparsity, frame_size=8, seed=7)
    (video,) = generate_dataset(spec)
    assert len(video.events) == expected
    assert video.length == 1000


def test_generation_is_deterministic(tiny_spec: GeneratorSpec) -> None:
    a = generate_dataset(tiny_spec)
    b = generate_dataset(tiny_spec)
    for va, vb in zip(a, b):
        assert va.video_id == vb.video_id
        assert va.frames.tobytes() == vb.frames.tobytes()
        assert va.events == vb.events


def test_events_sorted_distinct_and_in_bounds(tiny_videos: List[SyntheticVideo]) -> None:
    for v in tiny_videos:
        frames = [e.frame for e in v.events]
        assert frames == sorted(frames)
        assert len(set(frames)) == len(frames)
        assert all(0 <= f < v.length for f in frames)
        assert all(1 <= e.class_id <= v.num_classes for e in v.events)
        assert v.frames.dtype == np.uint8
        assert v.frames.shape == (64, 16, 16, 3)


def test_generate_dataset_validates_mappings() -> None:
    with pytest.raises(ConfigError) as ei:
        generate_dataset({"num_videos": 1, "sparsity": 0.5})
    assert ei.value.field == "sparsity"


def test_sample_clip_radius_rule() -> None:
    video = _video(200, [(50, 3)])
    clip = sample_clip(video, 45, 100, 2)
    labels = clip.class_targets.argmax(dim=1)
    positive = torch.nonzero(labels).flatten().tolist()
    assert [45 + i for i in positive] == [48, 49, 50, 51, 52]
    assert all(labels[i] == 3 for i in positive)
    assert clip.disp_targets[positive].tolist() == [2.0, 1.0, 0.0, -1.0, -2.0]
    assert float(clip.disp_targets.abs().sum()) == 6.0
    assert clip.frames.shape == (100, 3, 8, 8)


def test_sample_clip_zero_radius() -> None:
    clip = sample_clip(_video(200, [(50, 1)]), 45, 100, 0)
    labels = clip.class_targets.argmax(dim=1)
    assert torch.nonzero(labels).flatten().tolist() == [5]
    assert float(clip.disp_targets.abs().sum()) == 0.0


def test_sample_clip_out_of_range() -> None:
    video = _video(120, [])
    with pytest.raises(RangeError):
        sample_clip(video, 30, 100, 2)
    with pytest.raises(RangeError):
        sample_clip(video, -1, 10, 2)


def test_overlapping_radii_nearest_then_earlier() -> None:
    # events at 10 and 14, radius 2: frame 12 is equidistant and goes to the earlier event
    cls, disp = assign_targets([(10, 1), (14, 2)], 20, 4, 2)
    labels = cls.argmax(axis=1)
    assert labels[12] == 1 and disp[12] == -2
    assert labels[13] == 2 and disp[13] == 1
    assert labels[11] == 1 and disp[11] == -1


def test_events_just_outside_clip_still_label_inside() -> None:
    clip = sample_clip(_video(200, [(44, 2)]), 45, 20, 2)
    labels = clip.class_targets.argmax(dim=1)
    assert torch.nonzero(labels).flatten().tolist() == [0, 1]
    assert clip.disp_targets[:2].tolist() == [-1.0, -2.0]


def test_targets_are_total_and_reconstruct_event_frames(tiny_videos: List[SyntheticVideo]) -> None:
    video = tiny_videos[0]
    L = 16
    labelled = set()
    for start in range(0, video.length, L):
        clip = sample_clip(video, start, L, 1)
        assert torch.allclose(clip.class_targets.sum(dim=1), torch.ones(L))
        labels = clip.class_targets.argmax(dim=1)
        event_frames = {e.frame for e in video.events}
        for i in torch.nonzero(labels).flatten().tolist():
            assert start + i + int(clip.disp_targets[i]) in event_frames
            labelled.add(start + i)
        assert float(clip.disp_targets[labels == 0].abs().sum()) == 0.0
    expected = {f for e in video.events for f in range(e.frame - 1, e.frame + 2) if 0 <= f < video.length}
    assert labelled == expected


def test_targets_at_stride_use_floor_index() -> None:
    clip = sample_clip(_video(64, [(13, 2)]), 0, 16, 1)
    cls, disp = targets_at_stride(clip, stride=4)
    assert cls.shape == (4, 5)
    labels = cls.argmax(dim=1).tolist()
    assert labels == [0, 0, 0, 2]
    assert disp[3].item() == 1.0


def test_augment_all_off_is_identity() -> None:
    clip = sample_clip(_video(40, [(10, 1)]), 0, 20, 1)
    out = augment(clip, AugmentCfg.all_off(), np.random.default_rng(0))
    assert torch.equal(out.frames, clip.frames)
    assert torch.equal(out.class_targets, clip.class_targets)


def test_hflip_mirrors_every_frame() -> None:
    clip = sample_clip(_video(40, [(10, 1)]), 0, 20, 1)
    cfg = AugmentCfg(crop_prob=0.0, hflip_prob=1.0, blur_prob=0.0, jitter_prob=0.0, mixup=False)
    out = augment(clip, cfg, np.random.default_rng(0))
    assert torch.equal(out.frames, clip.frames.flip(-1))
    assert torch.equal(out.class_targets, clip.class_targets)
    assert torch.equal(out.disp_targets, clip.disp_targets)


def test_augment_keeps_shape_and_range() -> None:
    clip = sample_clip(_video(40, [(10, 1)], size=16), 0, 20, 1)
    cfg = AugmentCfg(crop_prob=1.0, hflip_prob=1.0, blur_prob=1.0, jitter_prob=1.0)
    out = augment(clip, cfg, np.random.default_rng(1))
    assert out.frames.shape == clip.frames.shape
    assert float(out.frames.min()) >= 0.0 and float(out.frames.max()) <= 1.0
    assert torch.equal(out.class_targets, clip.class_targets)


def test_mixup_endpoints_and_midpoint() -> None:
    a = sample_clip(_video(40, [(10, 1)]), 0, 20, 1)
    b = sample_clip(_video(40, [(15, 2)]), 0, 20, 1)
    rng = np.random.default_rng(0)

    same = mixup(a, b, 0.2, 0.2, rng, lam=1.0)
    assert torch.equal(same.frames, a.frames)
    assert torch.equal(same.class_targets, a.class_targets)

    a0 = dataclasses.replace(a, frames=torch.zeros_like(a.frames))
    b1 = dataclasses.replace(b, frames=torch.ones_like(b.frames))
    mid = mixup(a0, b1, 0.2, 0.2, rng, lam=0.5)
    assert torch.allclose(mid.frames, torch.full_like(mid.frames, 0.5))
    assert torch.allclose(mid.class_targets, 0.5 * a.class_targets + 0.5 * b.class_targets)
    assert torch.equal(mid.disp_targets, a.disp_targets)
    assert mid.mixup_info is not None and mid.mixup_info.lam == 0.5

    low = mixup(a, b, 0.2, 0.2, rng, lam=0.3)
    assert torch.equal(low.disp_targets, b.disp_targets)


def test_mixup_shape_mismatch() -> None:
    a = sample_clip(_video(40, []), 0, 20, 1)
    b = sample_clip(_video(40, []), 0, 10, 1)
    with pytest.raises(ContractError):
        mixup(a, b, 0.2, 0.2, np.random.default_rng(0))


def test_collate_stacks_batch(tiny_videos: List[SyntheticVideo]) -> None:
    clips = [sample_clip(v, 0, 16, 1) for v in tiny_videos]
    batch = collate_clips(clips)
    assert batch["frames"].shape == (2, 16, 3, 16, 16)
    assert batch["class_targets"].shape == (2, 16, 5)
    assert batch["disp_targets"].shape == (2, 16)
