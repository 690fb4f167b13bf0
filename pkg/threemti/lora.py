"""Low-rank adapters for linear and 1x1 convolution layers."""

from __future__ import annotations

import logging
import math
from fnmatch import fnmatch
from typing import Any, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from threemti.errors import AdaptersAbsent, ConfigError, NoMatch

logger = logging.getLogger(__name__)


def is_adaptable(module: nn.Module) -> bool:
    if isinstance(module, nn.Linear):
        return True
    return (
        isinstance(module, nn.Conv2d)
        and module.kernel_size == (1, 1)
        and module.stride == (1, 1)
        and module.groups == 1
    )


class LoraAdapter(nn.Module):
    """base(x) + (alpha / r) * B(A(x)) with A ~ N(0, 1/r) and B = 0."""

    def __init__(self, base: nn.Linear | nn.Conv2d, rank: int, alpha: float | None = None):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        if not is_adaptable(base):
            raise TypeError(f"cannot adapt {type(base).__name__}; need Linear or 1x1 Conv2d")
        if isinstance(base, nn.Linear):
            d_in, d_out = base.in_features, base.out_features
        else:
            d_in, d_out = base.in_channels, base.out_channels
        self.base = base
        self.base_trainable = base.weight.requires_grad
        base.requires_grad_(False)
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scale = self.alpha / rank
        w = base.weight
        self.lora_A = nn.Parameter(
            torch.randn(rank, d_in, dtype=w.dtype, device=w.device) / math.sqrt(rank)
        )
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=w.dtype, device=w.device))

    @property
    def is_conv(self) -> bool:
        return isinstance(self.base, nn.Conv2d)

    def delta_weight(self) -> torch.Tensor:
        delta = self.scale * (self.lora_B @ self.lora_A)
        return delta[:, :, None, None] if self.is_conv else delta

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.is_conv:
            down = F.conv2d(x, self.lora_A[:, :, None, None])
            low = F.conv2d(down, self.lora_B[:, :, None, None])
        else:
            low = F.linear(F.linear(x, self.lora_A), self.lora_B)
        return out + self.scale * low


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, attr = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, attr, module)


def lora_sites(model: nn.Module) -> dict[str, LoraAdapter]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoraAdapter)}


def _inside(name: str, prefixes: Iterable[str]) -> bool:
    return any(name.startswith(p + ".") for p in prefixes)


def inject(
    model: nn.Module,
    patterns: str | Iterable[str],
    rank: int,
    alpha: float | None = None,
) -> list[str]:
    """Wrap every Linear / 1x1 Conv2d whose qualified name matches a glob.

    Returns the adapted names. Base weights are frozen; only the new factors
    are trainable.
    """
    pats = [patterns] if isinstance(patterns, str) else list(patterns)
    existing = lora_sites(model)
    targets = [
        name
        for name, module in model.named_modules()
        if name
        and name not in existing
        and not _inside(name, existing)
        and is_adaptable(module)
        and any(fnmatch(name, p) for p in pats)
    ]
    if not targets:
        raise NoMatch(f"no Linear/1x1 Conv2d layer matches {pats}")
    for name in targets:
        _set_submodule(model, name, LoraAdapter(model.get_submodule(name), rank, alpha))
    logger.debug("Injected rank-%d adapters into %d layers: %s", rank, len(targets), targets)
    return targets


@torch.no_grad()
def merge(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and unwrap it."""
    sites = lora_sites(model)
    if not sites:
        raise AdaptersAbsent("model has no LoRA adapters to merge")
    for name, adapter in sites.items():
        base = adapter.base
        base.weight.add_(adapter.delta_weight().to(base.weight.dtype))
        base.requires_grad_(adapter.base_trainable)
        _set_submodule(model, name, base)
    return model


def lora_spec(model: nn.Module) -> dict[str, dict[str, Any]]:
    """Site name -> rank/alpha, as stored in checkpoint headers."""
    return {n: {"rank": a.rank, "alpha": a.alpha} for n, a in lora_sites(model).items()}


def restore_sites(model: nn.Module, spec: dict[str, dict[str, Any]]) -> None:
    """Re-create adapters recorded by `lora_spec` before loading their weights."""
    for name, entry in spec.items():
        base = model.get_submodule(name)
        _set_submodule(model, name, LoraAdapter(base, int(entry["rank"]), float(entry["alpha"])))
