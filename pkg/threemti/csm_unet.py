"""One-step denoising UNet with cross-modal self-attention.

Latents of every modality travel together as a `ModalityStack`
(B, M, C, H, W): RGB references first, thermal last. Convolutional blocks see
the stack folded into the batch, `(B*M, C, H, W)`, so modalities never mix
there. Transformer blocks instead merge the stack into one token sequence per
sample, `(B, M*H*W, C)`, so self-attention relates every RGB pixel to every
thermal pixel with exactly the parameters of ordinary self-attention.

Token order in the merged sequence is modality-major, then row-major pixels:
token t = m*H*W + y*W + x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from threemti.errors import BadShape, ConfigError, CountMismatch, ShapeMismatch


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    widths: tuple[int, ...] = (32, 64, 128)
    attention_levels: tuple[int, ...] = (1, 2)
    heads: int = 4
    prompt_dim: int = 64
    prompt_tokens: int = 1
    timestep_index: int = 999
    cross_modal: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))
        if self.levels < 1 or len(self.widths) != self.levels:
            raise ConfigError("unet needs one width per level")
        if not self.attention_levels:
            raise ConfigError("unet needs attention in at least one level")
        if any(lvl < 0 or lvl >= self.levels for lvl in self.attention_levels):
            raise ConfigError(f"attention_levels out of range: {self.attention_levels}")
        if any(w % self.heads for w in self.widths):
            raise ConfigError(f"widths {self.widths} must be divisible by heads {self.heads}")

    @classmethod
    def from_section(cls, section: Any) -> "UNetConfig":
        return cls(
            levels=section.levels,
            widths=tuple(section.widths),
            attention_levels=tuple(section.attention_levels),
            heads=section.heads,
            prompt_dim=section.prompt_dim,
            prompt_tokens=section.prompt_tokens,
            timestep_index=section.timestep_index,
            cross_modal=section.cross_modal,
        )

    @property
    def size_unit(self) -> int:
        return 2 ** (self.levels - 1)


# --- modality stack ------------------------------------------------------------


@dataclass(frozen=True)
class ModalityStack:
    data: torch.Tensor
    modality_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.data.dim() != 5:
            raise BadShape(f"modality stack must be (B, M, C, H, W), got {tuple(self.data.shape)}")
        if self.data.shape[1] < 1:
            raise BadShape("modality stack is empty (M = 0)")
        if not self.modality_names:
            m = self.data.shape[1]
            object.__setattr__(self, "modality_names", ("rgb",) * (m - 1) + ("thermal",))

    @classmethod
    def from_latents(
        cls, thermal: torch.Tensor, references: Sequence[torch.Tensor] = ()
    ) -> "ModalityStack":
        for ref in references:
            if ref.shape != thermal.shape:
                raise ShapeMismatch(
                    f"reference latent {tuple(ref.shape)} != thermal latent {tuple(thermal.shape)}"
                )
        return cls(torch.stack([*references, thermal], dim=1))

    @property
    def modalities(self) -> int:
        return self.data.shape[1]

    @property
    def thermal(self) -> torch.Tensor:
        return self.data[:, -1]

    @property
    def references(self) -> torch.Tensor:
        return self.data[:, :-1]

    @property
    def modality_index(self) -> dict[int, str]:
        return dict(enumerate(self.modality_names))


def fold_modalities(s: ModalityStack) -> torch.Tensor:
    return rearrange(s.data, "b m c h w -> (b m) c h w")


def unfold_modalities(x: torch.Tensor, m: int) -> ModalityStack:
    if x.shape[0] % m:
        raise CountMismatch(f"batch {x.shape[0]} is not a multiple of {m} modalities")
    return ModalityStack(rearrange(x, "(b m) c h w -> b m c h w", m=m))


def merge_tokens(s: ModalityStack) -> torch.Tensor:
    return rearrange(s.data, "b m c h w -> b (m h w) c")


def split_tokens(tokens: torch.Tensor, m: int, h: int, w: int) -> torch.Tensor:
    if tokens.dim() != 3 or tokens.shape[1] != m * h * w:
        raise CountMismatch(
            f"token tensor {tuple(tokens.shape)} does not hold {m}x{h}x{w} = {m * h * w} tokens"
        )
    return rearrange(tokens, "b (m h w) c -> (b m) c h w", m=m, h=h, w=w)


# --- attention -------------------------------------------------------------------


class Attention(nn.Module):
    """Multi-head attention; self-attention when no context is given."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise BadShape(f"dim {dim} is not divisible by {heads} heads")
        ctx = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(ctx, dim, bias=False)
        self.to_v = nn.Linear(ctx, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] % self.heads:
            raise BadShape(f"channels {x.shape[-1]} not divisible by {self.heads} heads")
        ctx = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(ctx), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(ctx), "b n (h d) -> b h n d", h=self.heads)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


def csm_attention(s: ModalityStack, attn: Attention) -> ModalityStack:
    """Self-attention over all modalities' pixels at once."""
    _, m, _, h, w = s.data.shape
    out = attn(merge_tokens(s))
    return unfold_modalities(split_tokens(out, m, h, w), m)


def vanilla_attention(x: torch.Tensor, attn: Attention) -> torch.Tensor:
    """Per-image self-attention on a (N, C, H, W) batch."""
    h, w = x.shape[-2:]
    out = attn(rearrange(x, "n c h w -> n (h w) c"))
    return rearrange(out, "n (h w) c -> n c h w", h=h, w=w)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.proj_in = nn.Linear(dim, dim * mult)
        self.proj_out = nn.Linear(dim * mult, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj_out(F.gelu(self.proj_in(x)))


class TransformerBlock(nn.Module):
    """Self-attention, prompt cross-attention, feed-forward; pre-norm residuals.

    With `cross_modal` the self-attention runs over the merged modality
    sequence, otherwise over each folded image alone. The parameter set is
    the same either way.
    """

    def __init__(self, dim: int, heads: int, prompt_dim: int, cross_modal: bool = True):
        super().__init__()
        self.cross_modal = cross_modal
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, heads, context_dim=prompt_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor, m: int, prompt: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        if self.cross_modal:
            tokens = merge_tokens(unfold_modalities(x, m))
        else:
            tokens = rearrange(x, "n c h w -> n (h w) c")
        tokens = tokens + self.attn1(self.norm1(tokens))
        context = prompt.expand(tokens.shape[0], -1, -1)
        tokens = tokens + self.attn2(self.norm2(tokens), context)
        tokens = tokens + self.ff(self.norm3(tokens))
        if self.cross_modal:
            return split_tokens(tokens, m, h, w)
        return rearrange(tokens, "n (h w) c -> n c h w", h=h, w=w)


# --- convolutional parts ------------------------------------------------------------


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def timestep_embedding(index: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = index * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(dtype)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNetLevel(nn.Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        temb_dim: int,
        cfg: UNetConfig,
        with_attention: bool,
        resample: nn.Module | None,
    ):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.transformer = (
            TransformerBlock(cout, cfg.heads, cfg.prompt_dim, cfg.cross_modal)
            if with_attention
            else None
        )
        self.resample = resample

    def body(
        self, h: torch.Tensor, temb: torch.Tensor, m: int, prompt: torch.Tensor
    ) -> torch.Tensor:
        h = self.res(h, temb)
        if self.transformer is not None:
            h = self.transformer(h, m, prompt)
        return h


class PromptEmbedding(nn.Module):
    """Learned prompt tokens shared by every sample (stands in for text prompts)."""

    def __init__(self, dim: int = 64, tokens: int = 1):
        super().__init__()
        self.vector = nn.Parameter(torch.randn(tokens, dim) * 0.02)

    def forward(self) -> torch.Tensor:
        return self.vector.unsqueeze(0)


class CSMUNet(nn.Module):
    def __init__(self, cfg: UNetConfig | None = None, latent_channels: int = 4):
        super().__init__()
        self.cfg = cfg = cfg or UNetConfig()
        widths = list(cfg.widths)
        base = widths[0]
        temb_dim = 4 * base
        self.time_mlp = nn.Sequential(
            nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(latent_channels, base, 3, padding=1)

        self.down = nn.ModuleList()
        prev = base
        for lvl, width in enumerate(widths):
            last = lvl == cfg.levels - 1
            self.down.append(
                UNetLevel(
                    prev,
                    width,
                    temb_dim,
                    cfg,
                    lvl in cfg.attention_levels,
                    None if last else Downsample(width),
                )
            )
            prev = width

        mid_attention = cfg.levels - 1 in cfg.attention_levels
        self.mid = UNetLevel(prev, prev, temb_dim, cfg, mid_attention, None)

        self.up = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            width = widths[lvl]
            self.up.append(
                UNetLevel(
                    prev + width,
                    width,
                    temb_dim,
                    cfg,
                    lvl in cfg.attention_levels,
                    Upsample(width, widths[lvl - 1]) if lvl > 0 else None,
                )
            )
            prev = widths[lvl - 1] if lvl > 0 else width

        self.norm_out = nn.GroupNorm(_groups(base), base)
        self.conv_out = nn.Conv2d(base, latent_channels, 3, padding=1)
        self.zero_proj = nn.Conv2d(latent_channels, latent_channels, 1)
        nn.init.zeros_(self.zero_proj.weight)
        nn.init.zeros_(self.zero_proj.bias)

    def forward(
        self, latents: ModalityStack, prompt: PromptEmbedding | torch.Tensor
    ) -> torch.Tensor:
        """Refined thermal latent: z_th + zero_proj(refined thermal slice)."""
        m = latents.modalities
        h_size, w_size = latents.data.shape[-2:]
        unit = self.cfg.size_unit
        if h_size % unit or w_size % unit:
            raise BadShape(f"latent size {h_size}x{w_size} must be divisible by {unit}")
        context = prompt() if isinstance(prompt, PromptEmbedding) else prompt
        x = fold_modalities(latents)
        context = context.to(x.dtype)

        temb = timestep_embedding(self.cfg.timestep_index, self.cfg.widths[0], x.dtype)
        temb = self.time_mlp(temb.to(x.device)).expand(x.shape[0], -1)

        h = self.conv_in(x)
        hs: list[torch.Tensor] = []
        for level in self.down:
            h = level.body(h, temb, m, context)
            hs.append(h)
            if level.resample is not None:
                h = level.resample(h)
        h = self.mid.body(h, temb, m, context)
        for level in self.up:
            h = level.body(torch.cat([h, hs.pop()], dim=1), temb, m, context)
            if level.resample is not None:
                h = level.resample(h)
        out = self.conv_out(F.silu(self.norm_out(h)))

        refined = unfold_modalities(out, m).thermal
        return latents.thermal + self.zero_proj(refined)


def count_params(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
