"""Temporal layers: positional table, SGP / SGP-Mixer layers, decoder skip variants, pooling.

Tokens are laid out ``N x L x d``. Optional masks are ``N x L`` booleans (``True`` = real
token) and only appear on the pad-and-crop path, where padded positions are excluded from
normalization statistics and from sequence means.
"""

from typing import ClassVar, Literal, Optional, Tuple

import torch
import torch.nn.functional as F
from loguru import logger as glogger
from torch import nn

from tdeedspot.errors import ConfigError, ContractError
from tdeedspot.models import SgpCfg, SkipVariant


# ---------------------------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------------------------


def add_positional(tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """``out[l] = tokens[l] + table[l]`` for ``L x d`` or ``N x L x d`` tokens.

    Raises:
        ConfigError: If the sequence is longer than the table.
    """
    L = int(tokens.shape[-2])
    if L > table.shape[0]:
        raise ConfigError(f"sequence length {L} exceeds positional table of {table.shape[0]} rows", field="max_len")
    return tokens + table[:L]


class PositionalTable(nn.Module):
    """Learnable ``max_len x d`` temporal position table."""

    def __init__(self, max_len: int, d: int) -> None:
        super().__init__()
        self.table = nn.Parameter(torch.zeros(max_len, d))
        nn.init.trunc_normal_(self.table, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return add_positional(tokens, self.table)


def temporal_pool(x: torch.Tensor, k: int, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Max-pool ``N x L x d`` tokens over windows of ``k`` frames.

    Masked (padded) positions never win the max.

    Raises:
        ContractError: If ``L`` is not divisible by ``k``.
    """
    L = int(x.shape[-2])
    if k < 1 or L % k != 0:
        raise ContractError(f"sequence length {L} is not divisible by k={k}")
    if k == 1:
        return x
    if mask is not None:
        x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    return F.max_pool1d(x.transpose(-1, -2), kernel_size=k, stride=k).transpose(-1, -2)


def upsample(z: torch.Tensor, k: int) -> torch.Tensor:
    """Endpoint-aligned linear interpolation of ``N x n x d`` tokens to length ``k*n``."""
    n = int(z.shape[-2])
    if k == 1:
        return z
    return F.interpolate(z.transpose(-1, -2), size=k * n, mode="linear", align_corners=True).transpose(-1, -2)


def masked_mean(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Sequence mean token ``N x 1 x d`` over the real positions."""
    if mask is None:
        return x.mean(dim=-2, keepdim=True)
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(dim=-2, keepdim=True) / m.sum(dim=-2, keepdim=True).clamp_min(1.0)


def pad_to_multiple(x: torch.Tensor, k: int) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Zero-pad ``N x L x d`` tokens to the next multiple of ``k``; the mask is ``None`` when no pad was needed."""
    n, L, _ = x.shape
    pad = (-L) % k
    if pad == 0:
        return x, None
    mask = torch.arange(L + pad, device=x.device)[None, :] < L
    return F.pad(x, (0, 0, 0, pad)), mask.expand(n, -1)


def fill_padding(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Replace masked positions of ``N x L x d`` tokens with the last real token of their row."""
    if mask is None:
        return x
    n, L, d = x.shape
    last = (mask.sum(dim=1, keepdim=True) - 1).clamp_min(0)
    idx = torch.where(mask, torch.arange(L, device=x.device)[None, :], last)
    return x.gather(1, idx.unsqueeze(-1).expand(n, L, d))


class MaskedGroupNorm(nn.Module):
    """GroupNorm over ``(channels of a group) x time`` that ignores masked positions."""

    def __init__(self, num_groups: int, num_channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        if num_channels % num_groups != 0:
            raise ConfigError(f"{num_groups} groups do not divide {num_channels} channels", field="group_norm_groups")
        self.num_groups = num_groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        n, L, d = x.shape
        g = self.num_groups
        xg = x.view(n, L, g, d // g)
        if mask is None:
            mean = xg.mean(dim=(1, 3), keepdim=True)
            var = xg.var(dim=(1, 3), unbiased=False, keepdim=True)
        else:
            m = mask.view(n, L, 1, 1).to(x.dtype)
            cnt = m.sum(dim=1, keepdim=True).clamp_min(1.0) * (d // g)
            mean = (xg * m).sum(dim=(1, 3), keepdim=True) / cnt
            var = (((xg - mean) * m) ** 2).sum(dim=(1, 3), keepdim=True) / cnt
        y = ((xg - mean) / torch.sqrt(var + self.eps)).view(n, L, d) * self.weight + self.bias
        if mask is not None:
            y = y * mask.unsqueeze(-1).to(y.dtype)
        return y


def _dwconv(d: int, ks: int, dilation: int = 1) -> nn.Conv1d:
    # depthwise, centred; replicate padding keeps a constant sequence constant
    return nn.Conv1d(d, d, ks, padding=dilation * (ks // 2), dilation=dilation, groups=d, padding_mode="replicate")


def _conv(conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
    return conv(x.transpose(-1, -2)).transpose(-1, -2)


class FeedForward(nn.Module):
    def __init__(self, d: int, ratio: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class InstantBranch(nn.Module):
    """``fc(x) * sigmoid(fc_global(mean token))``: pushes tokens relative to the sequence mean."""

    def __init__(self, d: int) -> None:
        super().__init__()
        self.fc = nn.Linear(d, d)
        self.global_fc = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.fc(x) * torch.sigmoid(self.global_fc(masked_mean(x, mask)))


class WindowBranch(nn.Module):
    """``psi(g) * (conv_ks(x) + conv_ks_dilated_r(x))``; ``g`` defaults to ``x``."""

    def __init__(self, d: int, ks: int, r: int) -> None:
        super().__init__()
        self.psi = _dwconv(d, ks)
        self.convw = _dwconv(d, ks)
        self.convkw = _dwconv(d, ks, dilation=r)

    def forward(
        self, x: torch.Tensor, gate_src: Optional[torch.Tensor] = None, mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        g = x if gate_src is None else gate_src
        # padded tail reads as the edge token, like replicate padding of the real sequence
        x, g = fill_padding(x, mask), fill_padding(g, mask)
        return _conv(self.psi, g) * (_conv(self.convw, x) + _conv(self.convkw, x))


# ---------------------------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------------------------


class SGPLayer(nn.Module):
    """SGP layer: ``y = x + SGP(GroupNorm(x))``, ``out = y + FFN(LayerNorm(y))``.

    ``SGP(u) = instant(u) + window(u) + u``.
    """

    def __init__(self, d: int, cfg: SgpCfg) -> None:
        super().__init__()
        self.gn = MaskedGroupNorm(cfg.groups_for(d), d)
        self.instant = InstantBranch(d)
        self.window = WindowBranch(d, cfg.ks, cfg.r)
        self.ln = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_ratio)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        u = self.gn(x, mask)
        y = x + self.instant(u, mask) + self.window(u, mask=mask) + u
        out = y + self.ffn(self.ln(y))
        if mask is not None:
            out = out * mask.unsqueeze(-1).to(out.dtype)
        return out


def sgp_layer(x: torch.Tensor, cfg: SgpCfg, layer: Optional[SGPLayer] = None) -> torch.Tensor:
    """Apply an SGP layer to ``L x d`` or ``N x L x d`` tokens (a fresh layer when none is given)."""
    single = x.dim() == 2
    xb = x.unsqueeze(0) if single else x
    layer = layer if layer is not None else SGPLayer(int(x.shape[-1]), cfg).to(x.dtype)
    out = layer(xb)
    return out[0] if single else out


class SGPMixerLayer(nn.Module):
    """SGP-Mixer layer fusing a coarse sequence ``z`` (scale ``j``) into its skip ``x`` (scale ``j-1``).

    Both inputs are layer-normalized, ``z`` is linearly upsampled, each input gets an instant
    branch, two window branches evolve one input gated by the other, and the six streams
    (two instant, two window, two shortcuts) are aggregated by concatenation + projection
    (``aggregate="concat"``) or by addition (``aggregate="sum"``). The result then goes
    through ``out = y + FFN(GroupNorm(y))``.
    """

    def __init__(self, d: int, cfg: SgpCfg, k: int, aggregate: Literal["concat", "sum"] = "concat") -> None:
        super().__init__()
        self.k = k
        self.aggregate = aggregate
        self.ln_z = nn.LayerNorm(d)
        self.ln_x = nn.LayerNorm(d)
        self.instant_z = InstantBranch(d)
        self.instant_x = InstantBranch(d)
        self.window_z = WindowBranch(d, cfg.ks, cfg.r)  # evolves z, gated by x
        self.window_x = WindowBranch(d, cfg.ks, cfg.r)  # evolves x, gated by z
        self.proj: Optional[nn.Linear] = nn.Linear(6 * d, d) if aggregate == "concat" else None
        self.gn = MaskedGroupNorm(cfg.groups_for(d), d)
        self.ffn = FeedForward(d, cfg.ffn_ratio)

    # order of the concatenated streams, also the column blocks of ``proj``
    STREAMS: ClassVar[Tuple[str, ...]] = ("instant_z", "instant_x", "window_z", "window_x", "shortcut_z", "shortcut_x")

    def forward(self, z: torch.Tensor, x_skip: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_skip.shape[-2] != self.k * z.shape[-2]:
            raise ContractError(f"skip length {x_skip.shape[-2]} != k*{z.shape[-2]} (k={self.k})")
        zu = upsample(self.ln_z(z), self.k)
        xs = self.ln_x(x_skip)
        if mask is not None:
            mf = mask.unsqueeze(-1).to(xs.dtype)
            zu, xs = zu * mf, xs * mf
        streams = [
            self.instant_z(zu, mask),
            self.instant_x(xs, mask),
            self.window_z(zu, gate_src=xs, mask=mask),
            self.window_x(xs, gate_src=zu, mask=mask),
            zu,
            xs,
        ]
        y = self.proj(torch.cat(streams, dim=-1)) if self.proj is not None else torch.stack(streams).sum(dim=0)
        out = y + self.ffn(self.gn(y, mask))
        if mask is not None:
            out = out * mask.unsqueeze(-1).to(out.dtype)
        return out


def sgp_mixer_layer(
    z: torch.Tensor, x_skip: torch.Tensor, cfg: SgpCfg, k: int = 2, layer: Optional[SGPMixerLayer] = None
) -> torch.Tensor:
    """Apply an SGP-Mixer layer to unbatched (``n x d``, ``kn x d``) or batched inputs."""
    single = z.dim() == 2
    zb, xb = (z.unsqueeze(0), x_skip.unsqueeze(0)) if single else (z, x_skip)
    layer = layer if layer is not None else SGPMixerLayer(int(z.shape[-1]), cfg, k).to(z.dtype)
    out = layer(zb, xb)
    return out[0] if single else out


class DecoderBlock(nn.Module):
    """Decoder block restoring scale ``j-1`` from scale ``j`` with one of the skip variants.

    * ``none``          - ``SGP(up(z))``
    * ``sum``           - ``SGP(up(z) + x_skip)``
    * ``concat``        - ``SGP(proj([up(z) | x_skip]))``
    * ``sgp_mixer_sum`` - SGP-Mixer, streams aggregated by addition
    * ``sgp_mixer``     - SGP-Mixer, streams concatenated and projected
    """

    logger: ClassVar["loguru.Logger"] = glogger.bind(classname=__qualname__)  # type: ignore[name-defined]

    def __init__(self, d: int, cfg: SgpCfg, k: int, variant: SkipVariant) -> None:
        super().__init__()
        self.k = k
        self.variant = variant
        self.layer: Optional[SGPLayer] = None
        self.fuse_proj: Optional[nn.Linear] = None
        self.mixer: Optional[SGPMixerLayer] = None
        match variant:
            case "none" | "sum":
                self.layer = SGPLayer(d, cfg)
            case "concat":
                self.layer = SGPLayer(d, cfg)
                self.fuse_proj = nn.Linear(2 * d, d)
            case "sgp_mixer_sum":
                self.mixer = SGPMixerLayer(d, cfg, k, aggregate="sum")
            case "sgp_mixer":
                self.mixer = SGPMixerLayer(d, cfg, k, aggregate="concat")
            case _:
                raise ConfigError(f"unknown skip variant {variant!r}", field="skip")

    def forward(self, z: torch.Tensor, x_skip: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x_skip.shape[-2] != self.k * z.shape[-2]:
            raise ContractError(f"skip length {x_skip.shape[-2]} != k*{z.shape[-2]} (k={self.k})")
        if self.mixer is not None:
            return self.mixer(z, x_skip, mask)
        u = upsample(z, self.k)
        if self.variant == "sum":
            u = u + x_skip
        elif self.variant == "concat":
            u = self.fuse_proj(torch.cat([u, x_skip], dim=-1))  # type: ignore[misc]
        if mask is not None:
            u = u * mask.unsqueeze(-1).to(u.dtype)
        return self.layer(u, mask)  # type: ignore[misc]


def skip_fuse(
    z: torch.Tensor,
    x_skip: torch.Tensor,
    variant: SkipVariant,
    cfg: SgpCfg,
    k: int = 2,
    block: Optional[DecoderBlock] = None,
) -> torch.Tensor:
    """Fuse a coarse sequence with its skip input through a decoder block of the given variant."""
    single = z.dim() == 2
    zb, xb = (z.unsqueeze(0), x_skip.unsqueeze(0)) if single else (z, x_skip)
    block = block if block is not None else DecoderBlock(int(z.shape[-1]), cfg, k, variant).to(z.dtype)
    out = block(zb, xb)
    return out[0] if single else out
