"""Per-frame feature extraction with gate-shift temporal modules.

The trunks are torchvision RegNet networks built from RegNetY design-space parameters and
trained from scratch. Gate-shift modules are spliced into the residual branch of the first
block of every shift-equipped stage, so each equipped stage widens the temporal receptive
field by exactly one frame in each direction.
"""

import math
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Literal, Optional

import torch
from loguru import logger as glogger
from torch import nn
from torchvision.models.regnet import BlockParams, RegNet

from tdeedspot.errors import ConfigError, ContractError
from tdeedspot.models import BackboneCfg

# RegNetY design-space parameters (depth, w_0, w_a, w_m, group width); SE ratio 0.25
REGNETY_PARAMS: Dict[str, Dict[str, float]] = {
    "200MF-like": {"depth": 13, "w_0": 24, "w_a": 36.44, "w_m": 2.49, "group_width": 8},
    "800MF-like": {"depth": 14, "w_0": 56, "w_a": 38.84, "w_m": 2.4, "group_width": 16},
}
SE_RATIO: float = 0.25


@dataclass
class TokenSequence:
    """Per-frame token matrix of a clip.

    Attributes:
        tokens: ``L x d`` (or batched ``N x L x d``) features.
        scale: ``j`` such that the length is ``L / k**j`` of the clip's base length.
    """

    tokens: torch.Tensor
    scale: int = 0

    @property
    def length(self) -> int:
        return int(self.tokens.shape[-2])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[-1])


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ContractError(f"{what} contains non-finite values")


def temporal_shift(x: torch.Tensor, n_segment: int, n_fwd: int) -> torch.Tensor:
    """Shift channels along time inside each clip of ``n_segment`` frames.

    Channels ``[0, n_fwd)`` move forward (``out[t] = x[t-1]``), the remaining channels move
    backward (``out[t] = x[t+1]``); clip boundaries are zero padded.

    Args:
        x: ``(N*n_segment) x C x h x w``.
        n_segment: Frames per clip.
        n_fwd: Number of forward-shifted channels.
    """
    nt, c, h, w = x.shape
    y = x.view(nt // n_segment, n_segment, c, h, w)
    fwd = torch.cat([torch.zeros_like(y[:, :1, :n_fwd]), y[:, :-1, :n_fwd]], dim=1)
    bwd = torch.cat([y[:, 1:, n_fwd:], torch.zeros_like(y[:, :1, n_fwd:])], dim=1)
    return torch.cat([fwd, bwd], dim=2).view(nt, c, h, w)


class GateShift(nn.Module):
    """Gate-shift (GSM) / gate-shift-fuse (GSF) module.

    The first ``n_shift`` channels are gated per pixel by a learnable sigmoid gate (one gate
    map per shift direction). The gated part is shifted in time; GSM adds the shifted stream to
    the ungated residual, GSF first fuses shifted and unshifted gated streams with learnable
    per-channel convex weights. A closed gate is the identity.
    """

    logger: ClassVar["loguru.Logger"] = glogger.bind(classname=__qualname__)  # type: ignore[name-defined]

    def __init__(self, channels: int, fraction: float = 0.25, mode: Literal["GSM", "GSF"] = "GSF") -> None:
        super().__init__()
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"must be in (0, 1], got {fraction}", field="shift_channel_fraction")
        if fraction * channels < 2:
            raise ConfigError(
                f"{fraction} of {channels} channels leaves no channel per direction", field="shift_channel_fraction"
            )
        if mode not in ("GSM", "GSF"):
            raise ConfigError(f"unknown gate-shift mode {mode!r}", field="shift_module")
        self.channels = channels
        self.mode = mode
        self.n_shift = 2 * int(math.floor(fraction * channels / 2.0 + 1e-9))
        self.n_fwd = self.n_shift // 2
        self.n_segment = 1
        self.gate_conv = nn.Conv2d(self.n_shift, 2, kernel_size=3, padding=1)
        nn.init.normal_(self.gate_conv.weight, std=0.01)
        nn.init.zeros_(self.gate_conv.bias)
        self.fuse_logits: Optional[nn.Parameter] = nn.Parameter(torch.zeros(self.n_shift)) if mode == "GSF" else None

    def forward(
        self,
        x: torch.Tensor,
        n_segment: Optional[int] = None,
        gate: Optional[float | torch.Tensor] = None,
        fuse: Optional[float | torch.Tensor] = None,
    ) -> torch.Tensor:
        """Apply the gated shift.

        Args:
            x: ``(N*n_segment) x C x h x w``.
            n_segment: Frames per clip; defaults to the value set by the owning backbone.
            gate: Force the gate (scalar or ``(N*n_segment) x 2 x h x w``) instead of the learned one.
            fuse: Force the GSF fusion weight of the shifted stream.
        """
        n_segment = n_segment or self.n_segment
        if x.shape[0] % n_segment != 0:
            raise ContractError(f"{x.shape[0]} frames are not a multiple of n_segment={n_segment}")
        xs, xr = x[:, : self.n_shift], x[:, self.n_shift :]

        g = torch.sigmoid(self.gate_conv(xs)) if gate is None else torch.as_tensor(gate, dtype=x.dtype, device=x.device)
        if g.dim() == 4:
            n_bwd = self.n_shift - self.n_fwd
            g = torch.cat([g[:, 0:1].expand(-1, self.n_fwd, -1, -1), g[:, 1:2].expand(-1, n_bwd, -1, -1)], dim=1)
        gated = g * xs
        residual = xs - gated
        shifted = temporal_shift(gated, n_segment, self.n_fwd)

        if self.mode == "GSF":
            if fuse is None:
                f = torch.sigmoid(self.fuse_logits).view(1, -1, 1, 1)  # type: ignore[arg-type]
            else:
                f = torch.as_tensor(fuse, dtype=x.dtype, device=x.device)
            shifted = f * shifted + (1.0 - f) * gated
        return torch.cat([shifted + residual, xr], dim=1)


def gate_shift(
    feature_map: torch.Tensor,
    fraction: float,
    mode: Literal["GSM", "GSF"] = "GSF",
    module: Optional[GateShift] = None,
    gate: Optional[float | torch.Tensor] = None,
    fuse: Optional[float | torch.Tensor] = None,
) -> torch.Tensor:
    """Gate-shift a single clip's feature map ``L x C_f x h x w``.

    A fresh module is built when ``module`` is not given (with ``feature_map``'s dtype).
    """
    if module is None:
        module = GateShift(int(feature_map.shape[1]), fraction, mode).to(feature_map.dtype)
    return module(feature_map, n_segment=int(feature_map.shape[0]), gate=gate, fuse=fuse)


class _ShiftedTransform(nn.Module):
    # residual-branch wrapper: f(shift(x)); the block's shortcut keeps the unshifted input
    def __init__(self, shift: GateShift, transform: nn.Module) -> None:
        super().__init__()
        self.shift = shift
        self.transform = transform

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.transform(self.shift(x))


def block_params_for(cfg: BackboneCfg) -> BlockParams:
    """RegNet block parameters of a backbone variant."""
    if cfg.variant == "tiny-desk":
        widths = list(cfg.tiny_widths)
        return BlockParams(
            depths=[1] * len(widths),
            widths=widths,
            group_widths=[min(8, w) for w in widths],
            bottleneck_multipliers=[1.0] * len(widths),
            strides=[2] * len(widths),
            se_ratio=SE_RATIO,
        )
    p = REGNETY_PARAMS[cfg.variant]
    return BlockParams.from_init_params(
        depth=int(p["depth"]),
        w_0=int(p["w_0"]),
        w_a=p["w_a"],
        w_m=p["w_m"],
        group_width=int(p["group_width"]),
        se_ratio=SE_RATIO,
    )


def shift_stage_indices(num_stages: int, placement: Literal["all", "latter_half"]) -> List[int]:
    """Stages that receive a gate-shift module; latter half = index >= ceil(num_stages/2)."""
    if placement == "all":
        return list(range(num_stages))
    return list(range(math.ceil(num_stages / 2), num_stages))


class FrameBackbone(nn.Module):
    """2D RegNet trunk applied frame by frame, with gate-shift modules and a projection to ``d``.

    Input clips are ``N x L x 3 x H x W``; the output is ``N x L x d``.
    """

    logger: ClassVar["loguru.Logger"] = glogger.bind(classname=__qualname__)  # type: ignore[name-defined]

    def __init__(self, cfg: BackboneCfg) -> None:
        super().__init__()
        self.cfg = cfg
        params = block_params_for(cfg)
        stem_width = 16 if cfg.variant == "tiny-desk" else 32
        net = RegNet(params, num_classes=1, stem_width=stem_width)
        self.stem = net.stem
        self.trunk = net.trunk_output

        widths = list(params.widths)
        in_widths = [stem_width] + widths[:-1]
        self.shift_modules = nn.ModuleList()
        self.shift_stages: List[int] = []
        if cfg.shift_module != "none":
            for si in shift_stage_indices(len(widths), cfg.shift_placement):
                stage = self.trunk[si]
                first = next(iter(stage.children()))
                gs = GateShift(in_widths[si], cfg.shift_channel_fraction, cfg.shift_module)
                first.f = _ShiftedTransform(gs, first.f)
                self.shift_modules.append(gs)
                self.shift_stages.append(si)

        self.feature_width = widths[-1]
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj: nn.Module = nn.Identity() if widths[-1] == cfg.d else nn.Linear(widths[-1], cfg.d)
        self.__class__.logger.debug(
            f"{cfg.variant}: widths={widths} depths={list(params.depths)} shift={cfg.shift_module}@{self.shift_stages}"
        )

    @property
    def num_shift_stages(self) -> int:
        """Number of gate-shift equipped stages ``S``; tokens see frames within ``±S``."""
        return len(self.shift_modules)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ContractError(f"expected N x L x 3 x H x W frames, got {tuple(frames.shape)}")
        _check_finite(frames, "frames")
        n, L = int(frames.shape[0]), int(frames.shape[1])
        for gs in self.shift_modules:
            gs.n_segment = L
        x = frames.reshape(n * L, *frames.shape[2:])
        x = self.trunk(self.stem(x))
        x = self.pool(x).flatten(1)
        return self.proj(x).view(n, L, -1)


def build_backbone(cfg: BackboneCfg) -> FrameBackbone:
    return FrameBackbone(cfg)


def extract(frames: torch.Tensor, backbone: FrameBackbone | BackboneCfg) -> TokenSequence:
    """Tokens of a clip (``L x 3 x H x W``) or a batch of clips (``N x L x 3 x H x W``).

    A configuration builds a fresh backbone in eval mode, so BatchNorm uses running statistics
    and frames never share normalization. A prebuilt module is used in whatever mode it is in.

    Raises:
        ContractError: If ``frames`` contains non-finite values or is mis-shaped.
    """
    if isinstance(backbone, BackboneCfg):
        backbone = build_backbone(backbone).eval()
    single = frames.dim() == 4
    out = backbone(frames.unsqueeze(0) if single else frames)
    return TokenSequence(tokens=out[0] if single else out, scale=0)
