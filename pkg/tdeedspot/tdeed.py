"""T-DEED: frame backbone, temporally discriminant encoder-decoder and prediction heads.

Besides the encoder-decoder (``sgp_ed``) the same wrapper hosts the temporal-module baselines
(a plain SGP stack, a pre-norm Transformer stack and a bidirectional GRU stack, sized to the
encoder-decoder's parameter count) and the encoder-only SGP feature pyramid.
"""

from dataclasses import dataclass
from typing import Callable, ClassVar, Dict, List, Optional, Tuple

import torch
from loguru import logger as glogger
from torch import nn

from tdeedspot.backbone import FrameBackbone
from tdeedspot.errors import ContractError
from tdeedspot.models import ModelCfg
from tdeedspot.sgp import DecoderBlock, PositionalTable, SGPLayer, pad_to_multiple, temporal_pool


@dataclass
class FramePredictions:
    """Per-position predictions of a batch of clips at one temporal scale.

    Attributes:
        class_probs: ``N x n x (C+1)`` rows on the probability simplex (column 0 = background).
        displacements: ``N x n`` signed offsets in original frames.
        stride: Frames per position (``k**j`` at pyramid scale ``j``, 1 otherwise).
    """

    class_probs: torch.Tensor
    displacements: torch.Tensor
    stride: int = 1

    @property
    def length(self) -> int:
        return int(self.class_probs.shape[-2])


def classification_head(tokens: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
    """Linear projection to ``C+1`` logits followed by a row softmax."""
    return torch.softmax(linear(tokens), dim=-1)


def displacement_head(tokens: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
    """Unbounded per-position displacement (no activation)."""
    return linear(tokens).squeeze(-1)


class PredictionHead(nn.Module):
    """Classification (+ optional displacement) head pair."""

    def __init__(self, d: int, num_classes: int, with_displacement: bool) -> None:
        super().__init__()
        self.cls = nn.Linear(d, num_classes + 1)
        self.disp: Optional[nn.Linear] = nn.Linear(d, 1) if with_displacement else None
        for lin in (self.cls, self.disp):
            if lin is not None:
                nn.init.normal_(lin.weight, std=0.01)
                nn.init.zeros_(lin.bias)

    def forward(self, tokens: torch.Tensor, stride: int = 1) -> FramePredictions:
        probs = classification_head(tokens, self.cls)
        if self.disp is not None:
            disp = displacement_head(tokens, self.disp)
        else:
            disp = torch.zeros(tokens.shape[:-1], dtype=tokens.dtype, device=tokens.device)
        return FramePredictions(class_probs=probs, displacements=disp, stride=stride)


# ---------------------------------------------------------------------------------------------
# temporal modules
# ---------------------------------------------------------------------------------------------


class SgpEncoderDecoder(nn.Module):
    """``B`` encoder blocks (SGP + max-pool), one neck SGP layer, ``B`` decoder blocks.

    Lengths that are not divisible by ``k`` at some scale are padded to the next multiple
    before that encoder block and cropped again after the matching decoder block; the pad is
    masked out of normalization statistics.
    """

    def __init__(self, cfg: ModelCfg) -> None:
        super().__init__()
        d = cfg.backbone.d
        self.k = cfg.k
        self.encoders = nn.ModuleList([SGPLayer(d, cfg.sgp) for _ in range(cfg.num_blocks)])
        self.neck = SGPLayer(d, cfg.sgp)
        self.decoders = nn.ModuleList([DecoderBlock(d, cfg.sgp, cfg.k, cfg.skip) for _ in range(cfg.num_blocks)])

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        return (
            [(f"enc{j}", m) for j, m in enumerate(self.encoders)]
            + [("neck", self.neck)]
            + [(f"dec{j}", self.decoders[j]) for j in reversed(range(len(self.decoders)))]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips: List[Tuple[torch.Tensor, Optional[torch.Tensor], int]] = []
        for enc in self.encoders:
            length = int(x.shape[1])
            x, mask = pad_to_multiple(x, self.k)
            x = enc(x, mask)
            skips.append((x, mask, length))
            x = temporal_pool(x, self.k, mask)
        x = self.neck(x)
        for j in reversed(range(len(self.decoders))):
            skip, mask, length = skips[j]
            x = self.decoders[j](x, skip, mask)[:, :length]
        return x


class SgpStack(nn.Module):
    """Plain full-resolution stack of SGP layers."""

    def __init__(self, cfg: ModelCfg) -> None:
        super().__init__()
        n = cfg.baseline_layers or 2 * cfg.num_blocks + 1
        self.layers = nn.ModuleList([SGPLayer(cfg.backbone.d, cfg.sgp) for _ in range(n)])

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        return [(f"layer{i}", m) for i, m in enumerate(self.layers)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def transformer_params(d: int, ffn: int, layers: int) -> int:
    """Parameter count of :class:`TransformerStack`."""
    per_layer = 4 * d * d + 4 * d + 2 * d * ffn + ffn + d + 4 * d
    return layers * per_layer + 2 * d


def gru_params(d: int, hidden: int, layers: int) -> int:
    """Parameter count of :class:`GruStack`."""
    total = 0
    for i in range(layers):
        inp = d if i == 0 else 2 * hidden
        total += 2 * 3 * hidden * (inp + hidden + 2)
    return total + 2 * hidden * d + d


def sgp_ed_params(cfg: ModelCfg) -> int:
    """Parameter count of the SGP encoder-decoder temporal module of ``cfg``."""
    with torch.device("meta"):
        return sum(p.numel() for p in SgpEncoderDecoder(cfg).parameters())


class TransformerStack(nn.Module):
    """Pre-norm self-attention stack; each layer is separately hookable."""

    def __init__(self, d: int, heads: int, ffn: int, layers: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            [
                nn.TransformerEncoderLayer(
                    d, heads, dim_feedforward=ffn, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
                )
                for _ in range(layers)
            ]
        )
        self.norm = nn.LayerNorm(d)
        self.identity_attention = False

    @classmethod
    def matched(cls, cfg: ModelCfg, target: int) -> "TransformerStack":
        """Stack whose parameter count is as close as possible to ``target``."""
        d = cfg.backbone.d
        layers = cfg.baseline_layers or 2 * cfg.num_blocks + 1
        while True:
            ffn = round(((target - 2 * d) / layers - (4 * d * d + 9 * d)) / (2 * d + 1))
            if ffn >= d or layers == 1:
                break
            layers -= 1
        return cls(d, cfg.transformer_heads, max(1, ffn), layers)

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        return [(f"layer{i}", m) for i, m in enumerate(self.layers)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mask = None
        if self.identity_attention:
            L = int(x.shape[1])
            # every token attends to itself only
            mask = ~torch.eye(L, dtype=torch.bool, device=x.device)
        for layer in self.layers:
            x = layer(x, src_mask=mask)
        return self.norm(x)


class GruStack(nn.Module):
    """Stack of single-layer bidirectional GRUs and a projection back to ``d``."""

    def __init__(self, d: int, hidden: int, layers: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            [nn.GRU(d if i == 0 else 2 * hidden, hidden, batch_first=True, bidirectional=True) for i in range(layers)]
        )
        self.proj = nn.Linear(2 * hidden, d)

    @classmethod
    def matched(cls, cfg: ModelCfg, target: int) -> "GruStack":
        """Stack whose hidden size brings the parameter count closest to ``target``."""
        d = cfg.backbone.d
        layers = cfg.baseline_layers or 2 * cfg.num_blocks + 1
        hidden = min(range(1, 4 * d + 1), key=lambda h: abs(gru_params(d, h, layers) - target))
        return cls(d, hidden, layers)

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        return [(f"layer{i}", m) for i, m in enumerate(self.layers)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for gru in self.layers:
            x, _ = gru(x)
        return self.proj(x)


class SgpPyramid(nn.Module):
    """Encoder-only SGP feature pyramid with one head pair per scale ``j = 0..B``."""

    def __init__(self, cfg: ModelCfg) -> None:
        super().__init__()
        d = cfg.backbone.d
        self.k = cfg.k
        self.layers = nn.ModuleList([SGPLayer(d, cfg.sgp) for _ in range(cfg.num_blocks + 1)])

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        return [(f"scale{j}", m) for j, m in enumerate(self.layers)]

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        outs: List[torch.Tensor] = []
        mask: Optional[torch.Tensor] = None
        for j, layer in enumerate(self.layers):
            if j > 0:
                x, mask = pad_to_multiple(x, self.k)
                x = temporal_pool(x, self.k, mask)
            x = layer(x)
            outs.append(x)
        return outs


# ---------------------------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------------------------


class TDEED(nn.Module):
    """Backbone + positional table + temporal module + prediction head(s)."""

    logger: ClassVar["loguru.Logger"] = glogger.bind(classname=__qualname__)  # type: ignore[name-defined]

    def __init__(self, cfg: ModelCfg) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.backbone.d
        self.backbone = FrameBackbone(cfg.backbone)
        self.positional = PositionalTable(cfg.table_len, d)

        match cfg.temporal_module:
            case "sgp_ed":
                self.temporal: nn.Module = SgpEncoderDecoder(cfg)
            case "sgp":
                self.temporal = SgpStack(cfg)
            case "transformer":
                self.temporal = TransformerStack.matched(cfg, sgp_ed_params(cfg))
            case "gru":
                self.temporal = GruStack.matched(cfg, sgp_ed_params(cfg))
            case "sgp_pyramid":
                self.temporal = SgpPyramid(cfg)

        n_heads = cfg.num_blocks + 1 if cfg.temporal_module == "sgp_pyramid" else 1
        self.heads = nn.ModuleList(
            [PredictionHead(d, cfg.num_classes, cfg.uses_displacement) for _ in range(n_heads)]
        )
        self.__class__.logger.debug(
            f"{cfg.temporal_module}/{cfg.skip}: {self.parameter_count()} parameters "
            f"(temporal {sum(p.numel() for p in self.temporal.parameters())})"
        )

    @property
    def is_pyramid(self) -> bool:
        return self.cfg.temporal_module == "sgp_pyramid"

    def parameter_count(self) -> int:
        """Exact number of learnable parameters."""
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def stage_modules(self) -> List[Tuple[str, nn.Module]]:
        """Modules whose outputs are the hooked token stages, in forward order."""
        return [("backbone", self.backbone), ("positional", self.positional)] + self.temporal.stage_modules()  # type: ignore[operator]

    def tokens(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5:
            raise ContractError(f"expected N x L x 3 x H x W frames, got {tuple(frames.shape)}")
        if frames.shape[1] > self.cfg.table_len:
            raise ContractError(f"clip of {frames.shape[1]} frames exceeds max_len={self.cfg.table_len}")
        return self.positional(self.backbone(frames))

    def forward_all(self, frames: torch.Tensor) -> List[FramePredictions]:
        """Predictions at every scale (one entry unless the model is a pyramid)."""
        x = self.tokens(frames)
        if self.is_pyramid:
            feats = self.temporal(x)
            return [head(f, stride=self.cfg.k**j) for j, (head, f) in enumerate(zip(self.heads, feats))]
        return [self.heads[0](self.temporal(x))]

    def forward(self, frames: torch.Tensor) -> FramePredictions:
        return self.forward_all(frames)[0]


def build_model(cfg: ModelCfg, seed: Optional[int] = None) -> TDEED:
    """Build a model; with ``seed`` the initialization is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return TDEED(cfg)


def baseline_forward(frames: torch.Tensor, model: TDEED) -> FramePredictions:
    """Forward of a baseline (Transformer / GRU / plain SGP stack) model."""
    if model.cfg.temporal_module not in ("transformer", "gru", "sgp"):
        raise ContractError(f"{model.cfg.temporal_module} is not a baseline temporal module")
    return model(frames)


def pyramid_forward(frames: torch.Tensor, model: TDEED) -> List[FramePredictions]:
    """Per-scale predictions of an SGP feature pyramid, scale 0 first."""
    if not model.is_pyramid:
        raise ContractError(f"{model.cfg.temporal_module} is not a pyramid model")
    return model.forward_all(frames)


def capture_stages(model: TDEED, frames: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Run ``model`` once and return the token sequence after every hooked stage."""
    captured: Dict[str, torch.Tensor] = {}
    handles = []

    def make_hook(name: str) -> Callable:
        def hook(_m: nn.Module, _inp: object, out: object) -> None:
            t = out[0] if isinstance(out, tuple) else out
            captured[name] = t.detach()

        return hook

    for name, mod in model.stage_modules():
        handles.append(mod.register_forward_hook(make_hook(name)))
    try:
        model.forward_all(frames)
    finally:
        for h in handles:
            h.remove()
    return captured


def mean_row_entropy(preds: FramePredictions) -> float:
    """Mean entropy of the class rows (nats)."""
    p = preds.class_probs.clamp_min(1e-12)
    return float((-(p * p.log()).sum(dim=-1)).mean())
