"""Synthetic precise-event-spotting videos, clip sampling and clip augmentation.

Videos show sprites moving (with toroidal wrap-around) over a textured background. The main
sprite undergoes instantaneous state changes; each change kind is one event class:

* ``color_flip``  - the sprite switches to the next palette color.
* ``reversal``    - the sprite reverses its direction.
* ``split``       - a twin sprite detaches and drifts away.
* ``merge``       - a twin sprite drifts in and is absorbed.
* ``grow``        - the sprite toggles between its base and an enlarged radius.
* ``stop``        - the sprite pauses.

The per-class context scale controls how many frames the cue spans (twin travel time, pause
length), so some classes are decidable from one or two frames and others need more.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from loguru import logger as glogger

from tdeedspot.errors import ContractError, RangeError
from tdeedspot.models import EVENT_KINDS, AugmentCfg, EventAnnotation, GeneratorSpec, build_config

PALETTE: np.ndarray = np.array(
    [[0.95, 0.15, 0.15], [0.15, 0.9, 0.2], [0.2, 0.35, 0.95], [0.95, 0.85, 0.1]], dtype=np.float32
)
DISTRACTOR_COLOR: np.ndarray = np.array([0.75, 0.75, 0.75], dtype=np.float32)


@dataclass
class SyntheticVideo:
    """A rendered video with exact-frame ground truth.

    Attributes:
        video_id: Identifier.
        frames: ``T x H x W x 3`` array, ``uint8`` (0..255) or ``float32`` in ``[0, 1]``.
        events: Ground-truth events sorted by frame, at most one per frame.
        num_classes: Number of event classes of the dataset.
        fps: Nominal frame rate (metadata only).
    """

    video_id: str
    frames: np.ndarray
    events: List[EventAnnotation]
    num_classes: int
    fps: float = 25.0

    @property
    def length(self) -> int:
        """Number of frames."""
        return int(self.frames.shape[0])

    def frames_float(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Frames ``[start, stop)`` as float32 in ``[0, 1]``."""
        chunk = self.frames[start:stop]
        if chunk.dtype == np.uint8:
            return chunk.astype(np.float32) / 255.0
        return chunk.astype(np.float32, copy=False)

    def event_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Event frames and class ids as int64 arrays (sorted by frame)."""
        frames = np.array([e.frame for e in self.events], dtype=np.int64)
        classes = np.array([e.class_id for e in self.events], dtype=np.int64)
        return frames, classes


@dataclass
class MixupInfo:
    """Record of a mixup pairing.

    Attributes:
        partner_video_id: Video of the partner clip.
        partner_start: Start frame of the partner clip.
        partner_events: Partner events as ``(relative_frame, class_id)``.
        lam: Mixing coefficient applied to the primary clip.
    """

    partner_video_id: str
    partner_start: int
    partner_events: List[Tuple[int, int]]
    lam: float

    @property
    def primary_dominant(self) -> bool:
        """Whether displacement targets come from the primary clip."""
        return self.lam >= 0.5


@dataclass
class ClipSample:
    """One element of a ClipBatch.

    Attributes:
        frames: ``L x 3 x H x W`` float tensor in ``[0, 1]`` (channel-first, as the backbone eats it).
        class_targets: ``L x (C+1)`` one-hot (or mixup-soft) targets, column 0 is background.
        disp_targets: ``L`` signed offsets (event_frame - frame), 0 on background frames.
        events: Events touching the clip as ``(relative_frame, class_id)``.
        video_id: Source video.
        start: First frame of the clip in the source video.
        radius: Detection radius the targets were built with.
        mixup_info: Set when the clip is a mixup of two clips.
    """

    frames: torch.Tensor
    class_targets: torch.Tensor
    disp_targets: torch.Tensor
    events: List[Tuple[int, int]]
    video_id: str
    start: int
    radius: int
    mixup_info: Optional[MixupInfo] = None
    index: int = -1

    @property
    def length(self) -> int:
        """Clip length ``L``."""
        return int(self.frames.shape[0])

    @property
    def num_classes(self) -> int:
        """Event classes ``C``."""
        return int(self.class_targets.shape[1]) - 1


# ---------------------------------------------------------------------------------------------
# label assignment
# ---------------------------------------------------------------------------------------------


def assign_targets(
    events: Sequence[Tuple[int, int]],
    length: int,
    num_classes: int,
    radius: int,
    stride: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Build per-position targets with the detection-radius rule.

    Position ``i`` sits at frame ``i * stride`` (clip-relative). It is assigned to an event at
    ``e`` when ``|e - i*stride| <= radius``, or, for ``stride > 1``, when ``i == e // stride``.
    Among several candidates the nearest event wins, ties go to the earlier event.

    Args:
        events: ``(relative_frame, class_id)`` pairs.
        length: Clip length in frames.
        num_classes: ``C``.
        radius: Detection radius in original frames.
        stride: Frames per position.

    Returns:
        tuple: ``(class_targets[n, C+1], disp_targets[n])`` with ``n = ceil(length / stride)``.
    """
    n = math.ceil(length / stride)
    cls = np.zeros((n, num_classes + 1), dtype=np.float32)
    disp = np.zeros((n,), dtype=np.float32)
    cls[:, 0] = 1.0
    if len(events) == 0:
        return cls, disp

    ev = sorted(events)
    ev_frames = np.array([e[0] for e in ev], dtype=np.int64)
    ev_classes = np.array([e[1] for e in ev], dtype=np.int64)
    pos = np.arange(n, dtype=np.int64) * stride

    offset = ev_frames[None, :] - pos[:, None]
    dist = np.abs(offset).astype(np.float64)
    valid = dist <= radius
    if stride > 1:
        inside = (ev_frames >= 0) & (ev_frames < length)
        valid |= (np.arange(n)[:, None] == (ev_frames // stride)[None, :]) & inside[None, :]
    dist[~valid] = np.inf

    best = np.argmin(dist, axis=1)  # first minimum -> earlier event
    hit = np.isfinite(dist[np.arange(n), best])
    rows = np.nonzero(hit)[0]
    cls[rows, 0] = 0.0
    cls[rows, ev_classes[best[rows]]] = 1.0
    disp[rows] = offset[rows, best[rows]].astype(np.float32)
    return cls, disp


def targets_at_stride(sample: ClipSample, stride: int, radius: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Targets of ``sample`` for a prediction grid of the given stride.

    Mixup samples mix class targets with the recorded ``lam`` and take displacement targets
    from the dominant clip, as :func:`mixup` does at full resolution.
    """
    radius = sample.radius if radius is None else radius
    c, d = assign_targets(sample.events, sample.length, sample.num_classes, radius, stride)
    mi = sample.mixup_info
    if mi is not None:
        cb, db = assign_targets(mi.partner_events, sample.length, sample.num_classes, radius, stride)
        c = mi.lam * c + (1.0 - mi.lam) * cb
        d = d if mi.primary_dominant else db
    return torch.from_numpy(np.ascontiguousarray(c, dtype=np.float32)), torch.from_numpy(d.astype(np.float32))


# ---------------------------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------------------------


def _place_events(rng: np.random.Generator, length: int, n: int, min_gap: int) -> np.ndarray:
    # n distinct frames in [1, length-2] with pairwise distance >= min_gap
    slack = (length - 2) - (n - 1) * (min_gap - 1)
    idx = np.sort(rng.choice(slack, size=n, replace=False))
    return 1 + idx + np.arange(n) * (min_gap - 1)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = max(2, size // 8)
    coarse = rng.uniform(0.08, 0.35, size=(cells, cells, 1)).astype(np.float32)
    reps = math.ceil(size / cells)
    bg = np.kron(coarse, np.ones((reps, reps, 1), dtype=np.float32))[:size, :size]
    tint = rng.uniform(0.7, 1.0, size=(1, 1, 3)).astype(np.float32)
    fine = rng.normal(0.0, 0.03, size=(size, size, 1)).astype(np.float32)
    return np.clip(bg * tint + fine, 0.0, 1.0)


def _wrap_dist2(yy: np.ndarray, xx: np.ndarray, pos: np.ndarray, size: int) -> np.ndarray:
    dy = (yy - pos[0] + size / 2.0) % size - size / 2.0
    dx = (xx - pos[1] + size / 2.0) % size - size / 2.0
    return dy * dy + dx * dx


def render_video(spec: GeneratorSpec, video_index: int) -> SyntheticVideo:
    """Render one video of the dataset described by ``spec``.

    Args:
        spec: Generator parameters.
        video_index: Index of the video; with ``spec.seed`` it fully determines the output.

    Returns:
        SyntheticVideo: Frames as uint8 plus sorted events.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, video_index]))
    T, S, C = spec.video_length, spec.frame_size, spec.num_classes
    scales = spec.resolved_context_scales()
    video_id = f"synth_{spec.seed:05d}_{video_index:05d}"

    n = spec.events_per_video
    ev_frames = _place_events(rng, T, n, spec.min_gap)
    ev_classes = rng.permutation(np.arange(n) % C) + 1
    by_frame: Dict[int, int] = {int(f): int(c) for f, c in zip(ev_frames, ev_classes)}

    base_radius = max(2.0, S / 10.0)
    speed = rng.uniform(S / 48.0, S / 24.0)
    angle = rng.uniform(0.0, 2.0 * math.pi)

    # pass 1: main sprite state per frame
    pos = np.zeros((T, 2), dtype=np.float64)
    color_idx = np.zeros((T,), dtype=np.int64)
    radius = np.zeros((T,), dtype=np.float64)
    p = rng.uniform(0.0, S, size=2)
    v = np.array([math.sin(angle), math.cos(angle)]) * speed
    ci = int(rng.integers(0, len(PALETTE)))
    big = False
    pause_until = -1
    for t in range(T):
        c = by_frame.get(t)
        if c is not None:
            kind = EVENT_KINDS[c - 1]
            if kind == "color_flip":
                ci = (ci + 1) % len(PALETTE)
            elif kind == "reversal":
                v = -v
            elif kind == "grow":
                big = not big
            elif kind == "stop":
                pause_until = t + scales[c - 1] + 1
        pos[t] = p
        color_idx[t] = ci
        radius[t] = base_radius * (1.6 if big else 1.0)
        if t + 1 >= pause_until:
            p = (p + v) % S

    # pass 2: twins of split/merge events, visible for 2*scale frames
    twins: List[List[Tuple[np.ndarray, float, int]]] = [[] for _ in range(T)]
    for f, c in by_frame.items():
        kind = EVENT_KINDS[c - 1]
        if kind not in ("split", "merge"):
            continue
        span = 2 * scales[c - 1]
        step = max(speed, base_radius * 1.5 / max(1, span // 2))
        u_angle = rng.uniform(0.0, 2.0 * math.pi)
        u = np.array([math.sin(u_angle), math.cos(u_angle)]) * step
        frames_ = range(f, f + span) if kind == "split" else range(f - span, f)
        for g in frames_:
            if 0 <= g < T:
                twin_pos = (pos[f] + u * abs(g - f)) % S
                twins[g].append((twin_pos, radius[f] * 0.8, int(color_idx[f])))

    # distractors: event-free sprites with constant velocity
    distractors: List[Tuple[np.ndarray, np.ndarray, float]] = []
    for _ in range(spec.distractors):
        dp = rng.uniform(0.0, S, size=2)
        da = rng.uniform(0.0, 2.0 * math.pi)
        dv = np.array([math.sin(da), math.cos(da)]) * rng.uniform(S / 64.0, S / 32.0)
        distractors.append((dp, dv, base_radius * 0.6))

    bg = _background(rng, S)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    noise_rng = np.random.default_rng(noise_seed)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    yy += 0.5
    xx += 0.5

    frames = np.empty((T, S, S, 3), dtype=np.uint8)
    for t in range(T):
        img = bg + noise_rng.normal(0.0, 0.01, size=(S, S, 1)).astype(np.float32)
        for dp, dv, dr in distractors:
            m = _wrap_dist2(yy, xx, (dp + dv * t) % S, S) <= dr * dr
            img[m] = DISTRACTOR_COLOR
        for tp, tr, tc in twins[t]:
            m = _wrap_dist2(yy, xx, tp, S) <= tr * tr
            img[m] = PALETTE[tc]
        m = _wrap_dist2(yy, xx, pos[t], S) <= radius[t] * radius[t]
        img[m] = PALETTE[color_idx[t]]
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    events = [EventAnnotation(video_id=video_id, frame=int(f), class_id=int(c)) for f, c in sorted(by_frame.items())]
    return SyntheticVideo(video_id=video_id, frames=frames, events=events, num_classes=C, fps=spec.fps)


def generate_dataset(spec: GeneratorSpec | Dict, noisy: bool = False) -> List[SyntheticVideo]:
    """Generate ``spec.num_videos`` synthetic videos.

    Args:
        spec: Generator parameters (a mapping is validated first).
        noisy: Log one line per rendered video.

    Returns:
        list[SyntheticVideo]: Deterministic for a fixed ``spec.seed``.

    Raises:
        ConfigError: If ``spec`` is invalid; names the offending field.
    """
    logger = glogger.bind(classname="synthdata", skiplog=not noisy)
    spec = build_config(GeneratorSpec, spec)
    videos: List[SyntheticVideo] = []
    for i in range(spec.num_videos):
        vid = render_video(spec, i)
        logger.debug(f"rendered {vid.video_id}: {vid.length} frames, {len(vid.events)} events")
        videos.append(vid)
    return videos


# ---------------------------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------------------------


def clip_events(video: SyntheticVideo, start: int, length: int, margin: int) -> List[Tuple[int, int]]:
    """Events within ``margin`` frames of the clip, as ``(relative_frame, class_id)``."""
    return [
        (e.frame - start, e.class_id) for e in video.events if start - margin <= e.frame < start + length + margin
    ]


def sample_clip(video: SyntheticVideo, start: int, L: int, r_E: int) -> ClipSample:
    """Cut ``L`` frames starting at ``start`` and build their supervision targets.

    Every frame within ``r_E`` of an event gets that event's class and
    ``disp_target = event_frame - frame``; all others are background with 0. Overlapping radii
    resolve to the nearest event, ties to the earlier one.

    Raises:
        RangeError: If ``[start, start+L)`` is not inside the video.
    """
    if start < 0 or L < 1 or start + L > video.length:
        raise RangeError(f"clip [{start}, {start + L}) outside video {video.video_id} of length {video.length}")
    if r_E < 0:
        raise ContractError(f"r_E must be >= 0, got {r_E}")
    events = clip_events(video, start, L, r_E)
    cls, disp = assign_targets(events, L, video.num_classes, r_E)
    frames = torch.from_numpy(np.ascontiguousarray(video.frames_float(start, start + L).transpose(0, 3, 1, 2)))
    return ClipSample(
        frames=frames,
        class_targets=torch.from_numpy(cls),
        disp_targets=torch.from_numpy(disp),
        events=events,
        video_id=video.video_id,
        start=start,
        radius=r_E,
    )


def augment(clip: ClipSample, cfg: AugmentCfg, rng: np.random.Generator) -> ClipSample:
    """Apply the spatial augmentations to every frame of a clip with shared parameters.

    Random resized crop (back to the original size), horizontal flip, color jitter and
    gaussian blur; targets are left untouched. ``cfg.enabled=False`` returns the clip as is.
    """
    if not cfg.enabled:
        return clip
    frames = clip.frames
    _, _, H, W = frames.shape

    if rng.random() < cfg.crop_prob:
        scale = rng.uniform(cfg.crop_scale_min, 1.0)
        ch = max(1, int(round(H * math.sqrt(scale))))
        cw = max(1, int(round(W * math.sqrt(scale))))
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        frames = TF.resized_crop(frames, top, left, ch, cw, [H, W], antialias=True)

    if rng.random() < cfg.hflip_prob:
        frames = TF.hflip(frames)

    if rng.random() < cfg.jitter_prob:
        s = cfg.jitter_strength
        frames = TF.adjust_brightness(frames, float(rng.uniform(1.0 - s, 1.0 + s)))
        frames = TF.adjust_contrast(frames, float(rng.uniform(1.0 - s, 1.0 + s)))
        frames = TF.adjust_saturation(frames, float(rng.uniform(1.0 - s, 1.0 + s)))

    if rng.random() < cfg.blur_prob:
        sigma = float(rng.uniform(*cfg.blur_sigma))
        frames = TF.gaussian_blur(frames, [cfg.blur_kernel, cfg.blur_kernel], [sigma, sigma])

    return dataclasses.replace(clip, frames=frames.clamp(0.0, 1.0).contiguous())


def mixup(
    a: ClipSample,
    b: ClipSample,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> ClipSample:
    """Mix two clips.

    ``frames = lam*a + (1-lam)*b`` and the class targets are mixed with the same ``lam``;
    displacement targets come from the dominant clip (``a`` when ``lam >= 0.5``).

    Args:
        a: Primary clip.
        b: Partner clip.
        alpha: Beta-distribution alpha.
        beta: Beta-distribution beta.
        rng: Random generator used to draw ``lam``.
        lam: Force the mixing coefficient instead of drawing it.

    Raises:
        ContractError: On shape mismatch or non-positive alpha/beta.
    """
    if a.frames.shape != b.frames.shape or a.class_targets.shape != b.class_targets.shape:
        raise ContractError(f"mixup shape mismatch: {tuple(a.frames.shape)} vs {tuple(b.frames.shape)}")
    if alpha <= 0 or beta <= 0:
        raise ContractError(f"mixup needs alpha, beta > 0, got {alpha}, {beta}")
    if lam is None:
        lam = float(rng.beta(alpha, beta))
    frames = lam * a.frames + (1.0 - lam) * b.frames
    cls = lam * a.class_targets + (1.0 - lam) * b.class_targets
    disp = a.disp_targets if lam >= 0.5 else b.disp_targets
    info = MixupInfo(partner_video_id=b.video_id, partner_start=b.start, partner_events=list(b.events), lam=lam)
    return dataclasses.replace(a, frames=frames, class_targets=cls, disp_targets=disp.clone(), mixup_info=info)


def collate_clips(samples: Sequence[ClipSample]) -> Dict[str, torch.Tensor]:
    """Stack clip samples into batch tensors."""
    return {
        "frames": torch.stack([s.frames for s in samples]),
        "class_targets": torch.stack([s.class_targets for s in samples]),
        "disp_targets": torch.stack([s.disp_targets for s in samples]),
    }
