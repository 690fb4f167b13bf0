"""Training loss: L2 plus a weighted perceptual distance.

The perceptual distance compares unit-normalized feature maps of a frozen
feature pyramid, LPIPS-style. The default pyramid has random weights fixed by
`feature_seed`; any module returning a list of feature maps can replace it.
"""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass
from typing import Any, Callable, Literal, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from threemti.errors import BadChannelCount, ConfigError, RangeError, ShapeMismatch

FeatureExtractor = Callable[[torch.Tensor], list[torch.Tensor]]

PYRAMID_WIDTHS = (16, 32, 64, 128)
NORM_EPS = 1e-10


@dataclass(frozen=True)
class LossConfig:
    perceptual_weight: float = 1.0
    feature_net: Literal["random_pyramid", "external"] = "random_pyramid"
    feature_seed: int = 0
    extractor: str | None = None

    def __post_init__(self) -> None:
        if self.perceptual_weight < 0:
            raise ConfigError(f"perceptual weight must be >= 0, got {self.perceptual_weight}")
        if self.feature_net not in ("random_pyramid", "external"):
            raise ConfigError(f"unknown feature_net: {self.feature_net}")

    @classmethod
    def from_section(cls, section: Any) -> "LossConfig":
        return cls(
            perceptual_weight=section.perceptual_weight,
            feature_net=section.feature_net,
            feature_seed=section.feature_seed,
            extractor=section.extractor,
        )


def load_extractor(ref: str) -> FeatureExtractor:
    """Import `module:attr`. A class is instantiated with no arguments."""
    module_name, sep, attr = ref.partition(":")
    if not sep or not module_name or not attr:
        raise ConfigError(f"extractor must look like module:attr, got {ref!r}")
    try:
        obj = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load extractor {ref!r}: {e}") from e
    if isinstance(obj, type):
        obj = obj()
    if not callable(obj):
        raise ConfigError(f"extractor {ref!r} is not callable")
    return obj


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} != target {tuple(gt.shape)}")


def l2_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, gt)
    return F.mse_loss(pred, gt)


class RandomPyramid(nn.Module):
    """Four stride-2 3x3 conv stages with ReLU; weights drawn once from a seed."""

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = PYRAMID_WIDTHS):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        cin = 3
        for i, cout in enumerate(widths):
            std = math.sqrt(2.0 / (cin * 9))
            self.register_buffer(f"weight{i}", torch.randn(cout, cin, 3, 3, generator=g) * std)
            cin = cout
        self.stages = len(widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats: list[torch.Tensor] = []
        h = x
        for i in range(self.stages):
            w = getattr(self, f"weight{i}").to(dtype=h.dtype, device=h.device)
            h = F.relu(F.conv2d(h, w, stride=2, padding=1))
            feats.append(h)
        return feats


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    # eps inside the root keeps the gradient finite where ReLU zeroed a whole pixel
    return f / torch.sqrt(torch.sum(f * f, dim=1, keepdim=True) + NORM_EPS)


class PerceptualDistance(nn.Module):
    def __init__(self, cfg: LossConfig | None = None, extractor: FeatureExtractor | None = None):
        super().__init__()
        self.cfg = cfg or LossConfig()
        if extractor is not None:
            self.extractor = extractor
        elif self.cfg.feature_net == "external":
            if self.cfg.extractor is None:
                raise ConfigError("feature_net = external needs an extractor")
            self.extractor = load_extractor(self.cfg.extractor)
        else:
            self.extractor = RandomPyramid(self.cfg.feature_seed)
        if isinstance(self.extractor, nn.Module):
            self.extractor.requires_grad_(False)

    @staticmethod
    def _prepare(x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise BadChannelCount(f"perceptual distance takes 1 or 3 channels, got {x.shape[1]}")
        return x * 2.0 - 1.0

    def forward(
        self, pred: torch.Tensor, gt: torch.Tensor, check_range: bool = True
    ) -> torch.Tensor:
        _check_pair(pred, gt)
        if check_range:
            for name, t in (("prediction", pred), ("target", gt)):
                lo, hi = float(t.min()), float(t.max())
                if lo < 0.0 or hi > 1.0:
                    raise RangeError(f"{name} values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
        fa = self.extractor(self._prepare(pred))
        fb = self.extractor(self._prepare(gt))
        total = pred.new_zeros(())
        for a, b in zip(fa, fb):
            diff = _unit_normalize(a) - _unit_normalize(b)
            total = total + torch.sum(diff * diff, dim=1).mean()
        return total


def perceptual_distance(
    pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig | None = None
) -> torch.Tensor:
    return PerceptualDistance(cfg)(pred, gt)


class LossTerms(NamedTuple):
    l2: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


class ThermalLoss(nn.Module):
    def __init__(self, cfg: LossConfig | None = None, extractor: FeatureExtractor | None = None):
        super().__init__()
        self.cfg = cfg or LossConfig()
        self.perceptual = PerceptualDistance(self.cfg, extractor)

    def forward(self, pred: torch.Tensor, gt: torch.Tensor, check_range: bool = True) -> LossTerms:
        l2 = l2_loss(pred, gt)
        weight = self.cfg.perceptual_weight
        if weight == 0.0:
            return LossTerms(l2, l2.new_zeros(()), l2)
        p = self.perceptual(pred, gt, check_range=check_range)
        return LossTerms(l2, p, l2 + weight * p)


def total_loss(
    pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig | None = None
) -> torch.Tensor:
    return ThermalLoss(cfg)(pred, gt).total
