"""Loss, label dilation, learning-rate schedule and the epoch loop."""

import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger as glogger
from torch.utils.data import DataLoader, Dataset

from tdeedspot.checkpoint import BEST_FILE, MODEL_FILE, save_checkpoint, write_tensors
from tdeedspot.errors import ContractError, DivergenceError
from tdeedspot.evaluation import map_at
from tdeedspot.models import AugmentCfg, InferCfg, ModelCfg, TrainCfg
from tdeedspot.spotting import spot_videos
from tdeedspot.synthdata import (
    ClipSample,
    SyntheticVideo,
    augment,
    collate_clips,
    mixup,
    sample_clip,
    targets_at_stride,
)
from tdeedspot.tdeed import TDEED, FramePredictions

PROB_EPS: float = 1e-12
STATE_FILE: str = "trainer_state.pt"
METRICS_FILE: str = "metrics.csv"


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------------------------


def class_weights(num_classes: int, pos_weight: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``[1, w, w, ..., w]``: background weight 1, every event class ``w``."""
    w = torch.full((num_classes + 1,), float(pos_weight), dtype=dtype)
    w[0] = 1.0
    return w


def combined_loss(
    preds: FramePredictions | Tuple[torch.Tensor, torch.Tensor],
    class_targets: torch.Tensor,
    disp_targets: torch.Tensor,
    pos_weight: float = 5.0,
    use_displacement: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted cross-entropy plus displacement MSE, averaged over frames.

    ``L_c = mean_l -sum_c w_c y_c log(max(p_c, 1e-12))``, ``L_d = mean_l (d_hat - d)^2`` (every
    frame; background targets are 0). With ``use_displacement=False`` ``L_d`` is 0.

    Returns:
        tuple: ``(total, L_c, L_d)`` with ``total = L_c + L_d``.

    Raises:
        ContractError: On shape mismatch or NaN inputs.
    """
    probs, disp = (preds.class_probs, preds.displacements) if isinstance(preds, FramePredictions) else preds
    if probs.shape != class_targets.shape or disp.shape != disp_targets.shape:
        raise ContractError(
            f"prediction/target shapes differ: {tuple(probs.shape)} vs {tuple(class_targets.shape)}, "
            f"{tuple(disp.shape)} vs {tuple(disp_targets.shape)}"
        )
    for t, what in ((probs, "class_probs"), (disp, "displacements"), (class_targets, "class_targets"), (disp_targets, "disp_targets")):
        if torch.isnan(t).any():
            raise ContractError(f"{what} contains NaN")
    w = class_weights(probs.shape[-1] - 1, pos_weight, probs.dtype).to(probs.device)
    ce = -(w * class_targets * torch.log(probs.clamp_min(PROB_EPS))).sum(dim=-1)
    loss_c = ce.mean()
    loss_d = ((disp - disp_targets) ** 2).mean() if use_displacement else torch.zeros((), dtype=probs.dtype, device=probs.device)
    return loss_c + loss_d, loss_c, loss_d


def dilate_labels(class_targets: torch.Tensor, dilation: int) -> torch.Tensor:
    """Expand every positive frame to ``±dilation`` frames (classification-only targets).

    Frames reached by several events take the nearest one, ties the earlier one. Works on
    ``L x (C+1)`` or ``N x L x (C+1)`` one-hot targets.
    """
    if dilation < 0:
        raise ContractError(f"dilation must be >= 0, got {dilation}")
    if dilation == 0:
        return class_targets
    single = class_targets.dim() == 2
    t = class_targets.unsqueeze(0) if single else class_targets
    labels = t.argmax(dim=-1)
    out_labels = labels.clone()
    assigned = labels > 0
    L = int(labels.shape[1])
    for delta in range(1, dilation + 1):
        # earlier event (frame - delta) first, then later (frame + delta)
        for shift in (delta, -delta):
            src = torch.zeros_like(labels)
            if shift > 0:
                src[:, shift:] = labels[:, : L - shift]
            else:
                src[:, :shift] = labels[:, -shift:]
            take = (~assigned) & (src > 0)
            out_labels[take] = src[take]
            assigned |= take
    out = torch.nn.functional.one_hot(out_labels, num_classes=t.shape[-1]).to(t.dtype)
    return out[0] if single else out


# ---------------------------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------------------------


def lr_at(epoch: int, cfg: TrainCfg) -> float:
    """Linear warmup for ``warmup_epochs`` then cosine decay to 0 at ``epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: TDEED, cfg: TrainCfg) -> Tuple[torch.optim.AdamW, torch.optim.lr_scheduler.LambdaLR]:
    """AdamW plus an epoch-level LambdaLR following :func:`lr_at`."""
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: lr_at(min(e, cfg.epochs - 1), cfg) / cfg.base_lr)
    return opt, sched


# ---------------------------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------------------------


class TrainClipDataset(Dataset):
    """``clips_per_epoch`` random clips per epoch.

    Sample ``i`` of epoch ``e`` is a pure function of ``(seed, e, i)``, so results do not depend
    on worker scheduling and a resumed run sees the same clips.
    """

    def __init__(
        self,
        videos: Sequence[SyntheticVideo],
        model_cfg: ModelCfg,
        augment_cfg: AugmentCfg,
        clips_per_epoch: int,
        seed: int,
    ) -> None:
        if not videos:
            raise ContractError("training needs at least one video")
        L = model_cfg.clip_length
        short = [v.video_id for v in videos if v.length < L]
        if short:
            raise ContractError(f"videos shorter than clip_length={L}: {short[:3]}")
        self.videos = list(videos)
        self.model_cfg = model_cfg
        self.augment_cfg = augment_cfg
        self.clips_per_epoch = clips_per_epoch
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.clips_per_epoch

    def _draw(self, rng: np.random.Generator) -> ClipSample:
        mc = self.model_cfg
        v = self.videos[int(rng.integers(0, len(self.videos)))]
        start = int(rng.integers(0, v.length - mc.clip_length + 1))
        radius = mc.radius if mc.uses_displacement else 0
        clip = sample_clip(v, start, mc.clip_length, radius)
        if not mc.uses_displacement and mc.dilation > 0:
            clip.class_targets = dilate_labels(clip.class_targets, mc.dilation)
            clip.disp_targets = torch.zeros_like(clip.disp_targets)
        return augment(clip, self.augment_cfg, rng)

    def __getitem__(self, index: int) -> ClipSample:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch, index]))
        clip = self._draw(rng)
        ac = self.augment_cfg
        if ac.enabled and ac.mixup:
            partner = self._draw(rng)
            clip = mixup(clip, partner, ac.mixup_alpha, ac.mixup_beta, rng)
        clip.index = index
        return clip


def _collate(samples: List[ClipSample]) -> List[ClipSample]:
    return samples


def scale_targets(samples: Sequence[ClipSample], stride: int, radius: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stacked stride-aware targets of a batch for a pyramid scale."""
    cls, disp = zip(*(targets_at_stride(s, stride, radius) for s in samples))
    return torch.stack(cls), torch.stack(disp)


# ---------------------------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    """Outcome of :meth:`Trainer.fit`."""

    metrics: pd.DataFrame
    best_score: Optional[float]
    best_epoch: Optional[int]
    epochs_run: int
    checkpoint_dir: Path
    stopped_early: bool


class Trainer:
    """Epoch loop with validation-mAP early stopping, checkpointing and resume."""

    logger: ClassVar["loguru.Logger"] = glogger.bind(classname=__qualname__)  # type: ignore[name-defined]

    def __init__(
        self,
        model: TDEED,
        train_videos: Sequence[SyntheticVideo],
        train_cfg: TrainCfg,
        augment_cfg: AugmentCfg,
        infer_cfg: InferCfg,
        output_dir: Path,
        val_videos: Optional[Sequence[SyntheticVideo]] = None,
        config_hash: str = "",
        noisy: bool = False,
    ) -> None:
        self.model = model
        self.cfg = train_cfg
        self.infer_cfg = infer_cfg
        self.output_dir = Path(output_dir)
        self.checkpoint_dir = Path(self.output_dir, "checkpoint")
        self.val_videos = list(val_videos or [])
        self.config_hash = config_hash
        self.noisy = noisy
        self.device = torch.device(train_cfg.device)
        self.model.to(self.device)
        self.dataset = TrainClipDataset(
            train_videos, model.cfg, augment_cfg, train_cfg.clips_per_epoch, train_cfg.seed
        )
        self.loader = DataLoader(
            self.dataset,
            batch_size=train_cfg.batch_size,
            shuffle=False,
            num_workers=train_cfg.num_workers,
            collate_fn=_collate,
        )
        self.optimizer, self.scheduler = build_optimizer(model, train_cfg)

    @property
    def val_column(self) -> str:
        return f"val_map_d{self.cfg.val_delta}"

    def _batch_loss(self, samples: List[ClipSample]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mc = self.model.cfg
        batch = collate_clips(samples)
        frames = batch["frames"].to(self.device)
        outs = self.model.forward_all(frames)
        total = loss_c = loss_d = torch.zeros((), device=self.device)
        for out in outs:
            if out.stride == 1:
                ct, dt = batch["class_targets"], batch["disp_targets"]
            else:
                ct, dt = scale_targets(samples, out.stride, mc.radius)
            t, c, d = combined_loss(
                out, ct.to(self.device), dt.to(self.device), self.cfg.pos_weight, mc.uses_displacement
            )
            total, loss_c, loss_d = total + t, loss_c + c, loss_d + d
        return total, loss_c, loss_d

    def validate(self) -> Optional[float]:
        """Validation mAP at ``val_delta`` (``None`` without validation videos)."""
        if not self.val_videos:
            return None
        mc = self.model.cfg
        preds = spot_videos(self.val_videos, self.model, mc.clip_length, self.infer_cfg, [self.infer_cfg.postproc])
        gts = [e for v in self.val_videos for e in v.events]
        return map_at(preds[self.infer_cfg.postproc], gts, mc.num_classes, self.cfg.val_delta)

    def _state_path(self) -> Path:
        return Path(self.output_dir, STATE_FILE)

    def _save_state(self, state: Dict[str, Any]) -> None:
        torch.save(
            {
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "config_hash": self.config_hash,
                **state,
            },
            self._state_path(),
        )

    def _load_state(self) -> Optional[Dict[str, Any]]:
        fp = self._state_path()
        if not (self.cfg.resume and fp.exists()):
            return None
        state = torch.load(fp, map_location=self.device, weights_only=False)
        if state.get("config_hash") != self.config_hash:
            self.__class__.logger.warning(f"{fp} belongs to a different configuration, starting fresh")
            return None
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.__class__.logger.info(f"resuming at epoch {state['next_epoch']} from {fp}")
        return state

    def _write_metrics(self, rows: List[Dict[str, Any]]) -> pd.DataFrame:
        df = pd.DataFrame(rows, columns=["epoch", "lr", "loss", "loss_c", "loss_d", self.val_column])
        df.to_csv(Path(self.output_dir, METRICS_FILE), index=False, float_format="%.10g")
        return df

    def fit(self, max_epochs: Optional[int] = None) -> TrainResult:
        """Train until ``epochs`` (or ``max_epochs`` more epochs) or early stopping.

        Raises:
            DivergenceError: When a loss becomes non-finite.
        """
        logger = self.__class__.logger
        self.output_dir.mkdir(parents=True, exist_ok=True)
        rows: List[Dict[str, Any]] = []
        best_score: Optional[float] = None
        best_epoch: Optional[int] = None
        bad_epochs = 0
        start_epoch = 0
        stopped_early = False

        state = self._load_state()
        if state is not None:
            rows = list(state["metrics"])
            best_score, best_epoch = state["best_score"], state["best_epoch"]
            bad_epochs, start_epoch = state["bad_epochs"], state["next_epoch"]
            stopped_early = state.get("stopped_early", False)

        end_epoch = self.cfg.epochs if max_epochs is None else min(self.cfg.epochs, start_epoch + max_epochs)
        epoch = start_epoch
        for epoch in range(start_epoch, end_epoch):
            if stopped_early:
                break
            self.model.train()
            self.dataset.set_epoch(epoch)
            lr = self.optimizer.param_groups[0]["lr"]
            sums = np.zeros(3)
            steps = 0
            for step, samples in enumerate(self.loader):
                total, loss_c, loss_d = self._batch_loss(samples)
                if not torch.isfinite(total):
                    raise DivergenceError(
                        "non-finite training loss",
                        diagnostic={
                            "epoch": epoch,
                            "step": step,
                            "loss": float(total),
                            "loss_c": float(loss_c),
                            "loss_d": float(loss_d),
                            "lr": lr,
                        },
                    )
                self.optimizer.zero_grad(set_to_none=True)
                total.backward()
                if self.cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
                self.optimizer.step()
                sums += [float(total), float(loss_c), float(loss_d)]
                steps += 1
                logger.bind(skiplog=not self.noisy).debug(f"epoch {epoch} step {step}: loss={float(total):.5f}")
            self.scheduler.step()

            val = self.validate()
            mean = sums / max(1, steps)
            rows.append(
                {
                    "epoch": epoch,
                    "lr": lr,
                    "loss": mean[0],
                    "loss_c": mean[1],
                    "loss_d": mean[2],
                    self.val_column: val if val is not None else float("nan"),
                }
            )
            logger.info(
                f"epoch {epoch}: lr={lr:.3e} L_c={mean[1]:.5f} L_d={mean[2]:.5f} "
                f"val mAP@{self.cfg.val_delta}={'-' if val is None else f'{val:.4f}'}"
            )

            save_checkpoint(self.checkpoint_dir, self.model, MODEL_FILE)
            score = val if val is not None else -mean[0]
            if best_score is None or score > best_score:
                best_score, best_epoch, bad_epochs = score, epoch, 0
                write_tensors(Path(self.checkpoint_dir, BEST_FILE), self.model.state_dict())
            else:
                bad_epochs += 1
                if val is not None and bad_epochs >= self.cfg.patience:
                    logger.info(f"early stop after epoch {epoch}: no improvement for {bad_epochs} epochs")
                    stopped_early = True

            self._write_metrics(rows)
            self._save_state(
                {
                    "next_epoch": epoch + 1,
                    "best_score": best_score,
                    "best_epoch": best_epoch,
                    "bad_epochs": bad_epochs,
                    "metrics": rows,
                    "stopped_early": stopped_early,
                }
            )

        df = self._write_metrics(rows)
        return TrainResult(
            metrics=df,
            best_score=best_score,
            best_epoch=best_epoch,
            epochs_run=len(rows),
            checkpoint_dir=self.checkpoint_dir,
            stopped_early=stopped_early,
        )


def train(
    model: TDEED,
    train_videos: Sequence[SyntheticVideo],
    train_cfg: TrainCfg,
    augment_cfg: AugmentCfg,
    infer_cfg: InferCfg,
    output_dir: Path,
    val_videos: Optional[Sequence[SyntheticVideo]] = None,
    config_hash: str = "",
    noisy: bool = False,
) -> TrainResult:
    """Train ``model`` and write the checkpoint, metrics CSV and trainer state below ``output_dir``."""
    return Trainer(
        model, train_videos, train_cfg, augment_cfg, infer_cfg, output_dir, val_videos, config_hash, noisy
    ).fit()


def loss_on_batch(model: TDEED, samples: Sequence[ClipSample], pos_weight: float) -> float:
    """Loss of a fixed batch (no gradient)."""
    batch = collate_clips(samples)
    with torch.no_grad():
        total, _, _ = combined_loss(
            model(batch["frames"]), batch["class_targets"], batch["disp_targets"], pos_weight, model.cfg.uses_displacement
        )
    return float(total)


__all__ = [
    "PROB_EPS",
    "Trainer",
    "TrainClipDataset",
    "TrainResult",
    "build_optimizer",
    "class_weights",
    "combined_loss",
    "dilate_labels",
    "lr_at",
    "seed_everything",
    "train",
]
