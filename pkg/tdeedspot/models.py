"""Configuration and record models for tdeedspot.

This module defines the pydantic models that describe a run (data generation,
model architecture, training, inference, evaluation, ablation and analysis
sections) as well as the small record types exchanged between modules
(ground-truth events and spotted events). Every configuration model forbids
unknown keys, so a typo in a run file fails before any work starts.
"""

import math
from pathlib import Path
from typing import Annotated, Any, ClassVar, Dict, List, Literal, Mapping, Optional, Tuple, Type, TypeVar
from typing_extensions import Self

import yaml
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tdeedspot import Helper
from tdeedspot.errors import ConfigError

SPARSITY_PRESETS: Dict[str, float] = {"fs-like": 0.0023, "fd-like": 0.022}

# renderer signatures; class i uses EVENT_KINDS[i - 1]
EVENT_KINDS: Tuple[str, ...] = ("color_flip", "reversal", "split", "merge", "grow", "stop")

SkipVariant = Literal["none", "sum", "concat", "sgp_mixer_sum", "sgp_mixer"]
SKIP_VARIANTS: Tuple[str, ...] = ("none", "sum", "concat", "sgp_mixer_sum", "sgp_mixer")

TemporalModule = Literal["sgp_ed", "sgp", "transformer", "gru", "sgp_pyramid"]

HEAD_MODE_PRESETS: Dict[str, Dict[str, Any]] = {
    "dil0": {"head_mode": "dilation", "dilation": 0, "radius": 0},
    "dil1": {"head_mode": "dilation", "dilation": 1, "radius": 0},
    "rE1": {"head_mode": "displacement", "dilation": 0, "radius": 1},
    "rE2": {"head_mode": "displacement", "dilation": 0, "radius": 2},
}

M = TypeVar("M", bound=BaseModel)


class _StrictModel(BaseModel):
    """Base for all configuration sections: unknown keys are rejected."""

    model_config: ClassVar[ConfigDict] = ConfigDict(extra="forbid", populate_by_name=True, protected_namespaces=())


# ---------------------------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------------------------


class EventAnnotation(BaseModel):
    """Ground-truth event: a (class, frame) pair within one video.

    Attributes:
        video_id: Identifier of the video.
        frame: 0-based frame index.
        class_id: Event class in ``[1, C]``; 0 is reserved for background.
    """

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True, extra="forbid")

    video_id: str
    frame: Annotated[int, Field(ge=0)]
    class_id: Annotated[int, Field(ge=1)]


class SpottedEvent(BaseModel):
    """Decoded event candidate produced by inference.

    Attributes:
        video_id: Identifier of the video.
        frame: Frame index within the video.
        class_id: Event class in ``[1, C]``.
        score: Confidence in ``(0, 1]``.
    """

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True, extra="forbid")

    video_id: str
    frame: Annotated[int, Field(ge=0)]
    class_id: Annotated[int, Field(ge=1)]
    score: Annotated[float, Field(gt=0.0, le=1.0)]


# ---------------------------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------------------------


class GeneratorSpec(_StrictModel):
    """Parameters of the synthetic precise-event-spotting generator.

    Attributes:
        num_videos: Number of videos to generate.
        video_length: Frames per video.
        num_classes: Number of event classes ``C`` (2..6, one renderer signature each).
        sparsity: Fraction of annotated frames in ``(0, 0.05]`` or a preset name
            (``fs-like``, ``fd-like``).
        context_scales: Frames of temporal context each class signature spans; defaults to
            ``1, 2, 4, 8, ...`` so some classes are decidable from 1-2 frames and others
            need several.
        clip_length: Clip length the dataset is meant for (bounds ``video_length``).
        frame_size: Square frame side in pixels.
        fps: Nominal frames per second (metadata only).
        distractors: Number of event-free sprites moving in the background.
        min_gap: Minimum distance in frames between two events of a video.
        seed: Seed of the generator.
    """

    num_videos: Annotated[int, Field(ge=1)] = 1
    video_length: Annotated[int, Field(ge=4)] = 1000
    num_classes: int = Field(4, validation_alias=AliasChoices("C", "num_classes"))
    sparsity: float = 0.01
    context_scales: Optional[List[Annotated[int, Field(ge=1)]]] = None
    clip_length: Annotated[int, Field(ge=1)] = 100
    frame_size: Annotated[int, Field(ge=8)] = 64
    fps: Annotated[float, Field(gt=0)] = 25.0
    distractors: Annotated[int, Field(ge=0)] = 1
    min_gap: Annotated[int, Field(ge=1)] = 3
    seed: int = 0

    @field_validator("sparsity", mode="before")
    @classmethod
    def resolve_sparsity_preset(cls, v: Any) -> Any:
        """Translate a preset name (``fs-like``, ``fd-like``) into its sparsity value."""
        if isinstance(v, str) and v in SPARSITY_PRESETS:
            return SPARSITY_PRESETS[v]
        return v

    @model_validator(mode="after")
    def check_contract(self) -> Self:
        """Cross-field checks; each failure names the offending field."""
        if not 2 <= self.num_classes <= len(EVENT_KINDS):
            raise ConfigError(f"must be in [2, {len(EVENT_KINDS)}], got {self.num_classes}", field="num_classes")
        if not 0.0 < self.sparsity <= 0.05:
            raise ConfigError(f"must be in (0, 0.05], got {self.sparsity}", field="sparsity")
        if self.video_length < 4 * self.clip_length:
            raise ConfigError(
                f"must be >= 4*clip_length={4 * self.clip_length}, got {self.video_length}", field="video_length"
            )
        if self.context_scales is not None and len(self.context_scales) != self.num_classes:
            raise ConfigError(
                f"needs one entry per class ({self.num_classes}), got {len(self.context_scales)}",
                field="context_scales",
            )
        n = self.events_per_video
        if n >= 1 and self.video_length - 2 - (n - 1) * (self.min_gap - 1) < n:
            raise ConfigError(f"{n} events with min_gap={self.min_gap} do not fit", field="min_gap")
        return self

    @property
    def events_per_video(self) -> int:
        """``floor(video_length * sparsity)``, at least one event."""
        return max(1, math.floor(self.video_length * self.sparsity + 1e-9))

    def resolved_context_scales(self) -> List[int]:
        """Per-class context span in frames."""
        if self.context_scales is not None:
            return list(self.context_scales)
        return [2 ** (i % 4) for i in range(self.num_classes)]


class SplitSizes(_StrictModel):
    """Number of videos per split."""

    train: Annotated[int, Field(ge=1)] = 50
    val: Annotated[int, Field(ge=0)] = 10
    test: Annotated[int, Field(ge=0)] = 10


class DataCfg(_StrictModel):
    """Where the dataset lives and how it is generated/stored.

    Attributes:
        root: Dataset directory; defaults to ``<output_dir>/data``.
        generator: Generator parameters shared by all splits (``num_videos`` is taken from
            ``splits``).
        splits: Videos per split.
        storage: ``packed`` (one PESV1 file per split) or ``npz`` (one compressed file per video).
        pixel_format: Pixel encoding inside packed files.
    """

    root: Optional[Path] = None
    generator: GeneratorSpec = Field(default_factory=lambda: GeneratorSpec(video_length=400, frame_size=32))
    splits: SplitSizes = Field(default_factory=SplitSizes)
    storage: Literal["packed", "npz"] = "packed"
    pixel_format: Literal["u8", "f32"] = "u8"


class AugmentCfg(_StrictModel):
    """Training-time clip augmentations.

    Spatial augmentations sample their parameters once per clip and apply them to every
    frame. ``enabled=False`` turns everything (mixup included) into the identity.
    """

    enabled: bool = True
    crop_prob: Annotated[float, Field(ge=0, le=1)] = 0.5
    crop_scale_min: Annotated[float, Field(gt=0, le=1)] = 0.8
    hflip_prob: Annotated[float, Field(ge=0, le=1)] = 0.5
    blur_prob: Annotated[float, Field(ge=0, le=1)] = 0.25
    blur_kernel: Annotated[int, Field(ge=3)] = 5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    jitter_prob: Annotated[float, Field(ge=0, le=1)] = 0.25
    jitter_strength: Annotated[float, Field(ge=0, lt=1)] = 0.2
    mixup: bool = True
    mixup_alpha: Annotated[float, Field(gt=0)] = 0.2
    mixup_beta: Annotated[float, Field(gt=0)] = 0.2

    @field_validator("blur_kernel")
    @classmethod
    def blur_kernel_odd(cls, v: int) -> int:
        """Gaussian blur kernels must be odd."""
        if v % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        return v

    @classmethod
    def all_off(cls) -> "AugmentCfg":
        """Configuration under which augmentation is the identity."""
        return cls(enabled=False, mixup=False)


# ---------------------------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------------------------


class BackboneCfg(_StrictModel):
    """Per-frame feature extractor.

    Attributes:
        variant: ``tiny-desk`` (four single-block stages), ``200MF-like`` or ``800MF-like``
            (RegNetY design-space trunks, trained from scratch).
        d: Token (hidden) dimension.
        shift_module: Temporal shift module inserted into residual blocks.
        shift_placement: ``all`` stages or only the ``latter_half``.
        shift_channel_fraction: Fraction of block channels that are shifted.
        tiny_widths: Stage widths of the ``tiny-desk`` variant.
    """

    variant: Literal["tiny-desk", "200MF-like", "800MF-like"] = "tiny-desk"
    d: Annotated[int, Field(ge=1)] = 64
    shift_module: Literal["none", "GSM", "GSF"] = "GSF"
    shift_placement: Literal["all", "latter_half"] = "latter_half"
    shift_channel_fraction: Annotated[float, Field(gt=0, le=1)] = 0.25
    tiny_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)

    _like_dims: ClassVar[Dict[str, int]] = {"200MF-like": 368, "800MF-like": 768}

    @model_validator(mode="after")
    def check_like_dims(self) -> Self:
        """The RegNetY-like variants come with their native token width."""
        if self.variant in self._like_dims and self.d != self._like_dims[self.variant]:
            raise ConfigError(f"{self.variant} requires d={self._like_dims[self.variant]}, got {self.d}", field="d")
        return self


class SgpCfg(_StrictModel):
    """SGP / SGP-Mixer layer hyperparameters.

    Attributes:
        ks: Window kernel size (odd, >= 3).
        r: Scalable factor; the widened window path uses kernel ``ks`` with dilation ``r``.
        group_norm_groups: GroupNorm groups; ``None`` picks the divisor of d nearest to 8.
        ffn_ratio: Expansion ratio of the feed-forward block.
    """

    ks: Annotated[int, Field(ge=3)] = 5
    r: Annotated[int, Field(ge=1)] = 2
    group_norm_groups: Optional[Annotated[int, Field(ge=1)]] = None
    ffn_ratio: Annotated[int, Field(ge=1)] = 4

    @field_validator("ks")
    @classmethod
    def ks_odd(cls, v: int) -> int:
        """Window kernels are centred, so they must be odd."""
        if v % 2 == 0:
            raise ValueError("ks must be odd")
        return v

    def groups_for(self, d: int) -> int:
        """Number of GroupNorm groups for width ``d``."""
        if self.group_norm_groups is not None:
            if d % self.group_norm_groups != 0:
                raise ConfigError(f"{self.group_norm_groups} does not divide d={d}", field="group_norm_groups")
            return self.group_norm_groups
        divisors = [g for g in range(1, d + 1) if d % g == 0]
        return min(divisors, key=lambda g: (abs(g - 8), -g))


class ModelCfg(_StrictModel):
    """Complete model description (backbone, temporal module, heads).

    Attributes:
        backbone: Feature extractor configuration.
        clip_length: Frames per clip ``L``.
        num_blocks: Encoder/decoder blocks ``B``.
        k: Temporal scale factor between blocks.
        sgp: SGP layer hyperparameters.
        skip: Decoder skip-connection variant.
        num_classes: Event classes ``C``.
        radius: Detection radius ``r_E`` in frames.
        temporal_module: ``sgp_ed`` (T-DEED encoder-decoder), ``sgp`` (plain SGP stack),
            ``transformer``, ``gru`` or ``sgp_pyramid``.
        head_mode: ``displacement`` (classification + displacement) or ``dilation``
            (classification only, labels dilated by ``dilation`` frames).
        dilation: Label dilation radius used in ``dilation`` mode.
        baseline_layers: Layer count of the plain stacks; ``None`` matches the encoder-decoder
            (``2B+1`` layers).
        transformer_heads: Attention heads of the Transformer baseline.
        max_len: Rows of the learnable positional table; defaults to ``clip_length``.
    """

    backbone: BackboneCfg = Field(default_factory=BackboneCfg)
    clip_length: Annotated[int, Field(ge=1)] = Field(100, validation_alias=AliasChoices("L", "clip_length"))
    num_blocks: Annotated[int, Field(ge=1)] = Field(2, validation_alias=AliasChoices("B", "num_blocks"))
    k: Annotated[int, Field(ge=1)] = 2
    sgp: SgpCfg = Field(default_factory=SgpCfg)
    skip: SkipVariant = "sgp_mixer"
    num_classes: Annotated[int, Field(ge=1)] = Field(4, validation_alias=AliasChoices("C", "num_classes"))
    radius: Annotated[int, Field(ge=0)] = Field(2, validation_alias=AliasChoices("r_E", "radius"))
    temporal_module: TemporalModule = "sgp_ed"
    head_mode: Literal["displacement", "dilation"] = "displacement"
    dilation: Annotated[int, Field(ge=0)] = 0
    baseline_layers: Optional[Annotated[int, Field(ge=1)]] = None
    transformer_heads: Annotated[int, Field(ge=1)] = 4
    max_len: Optional[int] = None

    @model_validator(mode="after")
    def check_contract(self) -> Self:
        """Cross-field checks on the architecture."""
        if self.max_len is not None and self.max_len < self.clip_length:
            raise ConfigError(f"must be >= clip_length={self.clip_length}", field="max_len")
        if self.temporal_module == "transformer" and self.backbone.d % self.transformer_heads != 0:
            raise ConfigError(f"must divide d={self.backbone.d}", field="transformer_heads")
        if self.temporal_module == "sgp_pyramid" and self.head_mode == "dilation":
            raise ConfigError("the feature pyramid needs the displacement head", field="head_mode")
        self.sgp.groups_for(self.backbone.d)
        return self

    @property
    def table_len(self) -> int:
        """Rows of the positional table."""
        return self.max_len or self.clip_length

    @property
    def uses_displacement(self) -> bool:
        """Whether the displacement head is trained and decoded."""
        return self.head_mode == "displacement"

    def with_head_preset(self, name: str) -> "ModelCfg":
        """Return a copy with one of the displacement/dilation presets applied."""
        if name not in HEAD_MODE_PRESETS:
            raise ConfigError(f"unknown head-mode preset {name!r}", field="head_mode")
        return self.model_copy(update=HEAD_MODE_PRESETS[name])


# ---------------------------------------------------------------------------------------------
# training / inference / evaluation
# ---------------------------------------------------------------------------------------------


class TrainCfg(_StrictModel):
    """Training recipe.

    Attributes:
        epochs: Number of epochs.
        clips_per_epoch: Clips randomly sampled from the training videos each epoch.
        batch_size: Clips per optimizer step.
        base_lr: Peak learning rate.
        warmup_epochs: Linear warmup epochs before cosine decay.
        pos_weight: Cross-entropy weight ``w`` of every event class (background has 1).
        seed: Seed for initialization, sampling and augmentation.
        weight_decay: AdamW decoupled weight decay.
        grad_clip: Max gradient norm, ``None`` disables clipping.
        patience: Early-stopping patience (epochs without val mAP improvement).
        val_delta: Tolerance of the validation mAP used for early stopping.
        device: Torch device string.
        num_workers: DataLoader workers.
        resume: Resume from ``trainer_state.pt`` when present.
    """

    epochs: Annotated[int, Field(ge=1)] = 50
    clips_per_epoch: Annotated[int, Field(ge=1)] = 5000
    batch_size: Annotated[int, Field(ge=1)] = 8
    base_lr: Annotated[float, Field(gt=0)] = 8e-4
    warmup_epochs: Annotated[int, Field(ge=0)] = 3
    pos_weight: Annotated[float, Field(ge=1)] = Field(5.0, validation_alias=AliasChoices("w", "pos_weight"))
    seed: int = 0
    weight_decay: Annotated[float, Field(ge=0)] = 1e-2
    grad_clip: Optional[Annotated[float, Field(gt=0)]] = None
    patience: Annotated[int, Field(ge=1)] = 10
    val_delta: Annotated[int, Field(ge=0)] = 1
    device: str = "cpu"
    num_workers: Annotated[int, Field(ge=0)] = 0
    resume: bool = True

    @model_validator(mode="after")
    def check_warmup(self) -> Self:
        """Warmup must leave room for the cosine phase."""
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f"must be < epochs={self.epochs}", field="warmup_epochs")
        return self

    @property
    def steps_per_epoch(self) -> int:
        """Optimizer steps per epoch."""
        return math.ceil(self.clips_per_epoch / self.batch_size)


class InferCfg(_StrictModel):
    """Full-video inference and post-processing.

    Attributes:
        overlap: Fraction of overlap between consecutive clips.
        threshold: Minimum class probability for a candidate.
        postproc: ``snms``, ``nms`` or ``none``.
        nms_window: Suppression half-window of NMS in frames.
        snms_window: Decay half-window of Soft-NMS in frames.
        snms_mode: Soft-NMS decay function.
        sigma: Gaussian decay width.
        final_threshold: Soft-NMS output threshold.
        batch_clips: Clips per forward pass during stitching.
    """

    overlap: Annotated[float, Field(ge=0, lt=1)] = 0.5
    threshold: Annotated[float, Field(ge=0, lt=1)] = 0.01
    postproc: Literal["snms", "nms", "none"] = "snms"
    nms_window: Annotated[int, Field(ge=0)] = 1
    snms_window: Annotated[int, Field(ge=0)] = 3
    snms_mode: Literal["linear", "gaussian"] = "linear"
    sigma: Annotated[float, Field(gt=0)] = 1.0
    final_threshold: Annotated[float, Field(ge=0, lt=1)] = 0.05
    batch_clips: Annotated[int, Field(ge=1)] = 4


class EvalCfg(_StrictModel):
    """Evaluation section of a run.

    Attributes:
        split: Split to evaluate.
        deltas: Frame tolerances to report.
        checkpoint: Checkpoint directory (defaults to ``<output_dir>/checkpoint``).
        predictions: Evaluate an existing predictions JSON instead of running a model.
        compare_postproc: Post-processing variants reported side by side.
    """

    split: Literal["train", "val", "test"] = "test"
    deltas: List[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [1, 2])
    checkpoint: Optional[Path] = None
    predictions: Optional[Path] = None
    compare_postproc: List[Literal["snms", "nms", "none"]] = Field(default_factory=lambda: ["snms", "nms"])


StudyName = Literal["temporal_module", "skip_variant", "head_mode", "pyramid", "shift_module", "clip_length", "postproc"]


class AblateCfg(_StrictModel):
    """Ablation campaign.

    Attributes:
        study: Which ablation matrix to run.
        seeds: Training seeds per cell; cells report the mean.
        workers: Cells trained concurrently (separate processes).
        clip_lengths: Clip lengths of the ``clip_length`` study.
        delta: Tolerance of the headline metric.
    """

    study: StudyName = "skip_variant"
    seeds: List[int] = Field(default_factory=lambda: [0, 1])
    workers: Annotated[int, Field(ge=1)] = 1
    clip_lengths: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [25, 50, 100, 200])
    delta: Annotated[int, Field(ge=0)] = 1


class AnalyzeCfg(_StrictModel):
    """Analysis section.

    Attributes:
        kind: ``discriminability`` (per-stage cosine similarity) or ``pyramid_layers``.
        checkpoints: Label -> checkpoint directory; missing models are trained first.
        modules: Temporal modules compared in the discriminability analysis.
        probe_batches: Batches of clips used for the discriminability probe.
        split: Split providing probe clips / evaluation videos.
        delta: Tolerance of the per-layer pyramid mAP.
    """

    kind: Literal["discriminability", "pyramid_layers"] = "discriminability"
    checkpoints: Dict[str, Path] = Field(default_factory=dict)
    modules: List[TemporalModule] = Field(default_factory=lambda: ["sgp_ed", "transformer", "gru"])
    probe_batches: Annotated[int, Field(ge=1)] = 4
    split: Literal["train", "val", "test"] = "val"
    delta: Annotated[int, Field(ge=0)] = 1


class RunConfig(_StrictModel):
    """Command-scoped configuration of a run.

    Attributes:
        seed: Master seed; when set it overrides ``data.generator.seed`` and ``train.seed``.
        output_dir: Every artifact of the run is written below this directory.
    """

    seed: Optional[int] = None
    output_dir: Path = Path("runs/default")
    data: DataCfg = Field(default_factory=DataCfg)
    model: ModelCfg = Field(default_factory=ModelCfg)
    augment: AugmentCfg = Field(default_factory=AugmentCfg)
    train: TrainCfg = Field(default_factory=TrainCfg)
    infer: InferCfg = Field(default_factory=InferCfg)
    eval: EvalCfg = Field(default_factory=EvalCfg)
    ablate: AblateCfg = Field(default_factory=AblateCfg)
    analyze: AnalyzeCfg = Field(default_factory=AnalyzeCfg)

    @model_validator(mode="after")
    def propagate_seed_and_shapes(self) -> Self:
        """Apply the master seed and keep data/model clip length and class count in sync."""
        if self.seed is not None:
            self.data.generator.seed = self.seed
            self.train.seed = self.seed
        if self.data.generator.num_classes != self.model.num_classes:
            raise ConfigError(
                f"model has C={self.model.num_classes}, data has C={self.data.generator.num_classes}",
                field="model.num_classes",
            )
        if self.data.generator.video_length < self.model.clip_length:
            raise ConfigError(
                f"videos ({self.data.generator.video_length}) shorter than clip_length", field="model.clip_length"
            )
        return self

    @property
    def data_root(self) -> Path:
        """Dataset directory."""
        return self.data.root if self.data.root is not None else Path(self.output_dir, "data")


# ---------------------------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------------------------


def _field_of(err: Mapping[str, Any]) -> Optional[str]:
    ctx_err = (err.get("ctx") or {}).get("error")
    prefix = ".".join(str(p) for p in err.get("loc", ()) if not isinstance(p, int))
    if isinstance(ctx_err, ConfigError) and ctx_err.field:
        return f"{prefix}.{ctx_err.field}" if prefix else ctx_err.field
    return prefix or None


def build_config(cls: Type[M], data: Mapping[str, Any] | M) -> M:
    """Validate ``data`` into ``cls`` and convert pydantic errors into :class:`ConfigError`.

    Args:
        cls: Target model class.
        data: Raw mapping or an already built instance.

    Returns:
        The validated model instance.

    Raises:
        ConfigError: Naming the first offending (dotted) field.
    """
    if isinstance(data, cls):
        return data
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        errs = e.errors()
        first = errs[0]
        field = _field_of(first)
        ctx_err = (first.get("ctx") or {}).get("error")
        msg = str(ctx_err.args[0]) if isinstance(ctx_err, ConfigError) else first.get("msg", str(e))
        if isinstance(ctx_err, ConfigError) and ctx_err.field and msg.startswith(f"{ctx_err.field}: "):
            msg = msg[len(ctx_err.field) + 2 :]
        raise ConfigError(msg, field=field) from e


def load_run_config(fp: Optional[Path], overrides: Optional[List[str]] = None) -> RunConfig:
    """Read a YAML run file, apply dotted overrides and validate.

    Args:
        fp: YAML file; ``None`` starts from defaults.
        overrides: ``dotted.key=value`` strings applied on top of the file.

    Returns:
        RunConfig: The validated run configuration.

    Raises:
        ConfigError: On unreadable YAML, malformed overrides or schema violations.
    """
    raw: Dict[str, Any] = {}
    if fp is not None:
        try:
            with open(fp, encoding="utf-8") as fin:
                raw = yaml.safe_load(fin) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read run config {fp}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"run config {fp} must contain a mapping")
    try:
        raw = Helper.apply_dotted_overrides(raw, overrides or [])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return build_config(RunConfig, raw)
