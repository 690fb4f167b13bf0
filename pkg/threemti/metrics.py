"""PSNR, SSIM, metric reports and paired bootstrap intervals."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from threemti.errors import BadChannelCount, InputError, ShapeMismatch, TooSmall
from threemti.logs import FORMAT_VERSION
from threemti.seeding import numpy_rng

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRIC_KEYS = ("psnr_db", "ssim", "perceptual")


def _as_tensor(x: torch.Tensor | np.ndarray) -> torch.Tensor:
    return torch.as_tensor(x).detach().cpu().to(torch.float64)


def psnr(a: torch.Tensor | np.ndarray, b: torch.Tensor | np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give math.inf."""
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ShapeMismatch(f"psnr inputs differ in shape: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float(torch.mean((ta - tb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def _as_plane(x: torch.Tensor | np.ndarray) -> torch.Tensor:
    t = _as_tensor(x)
    while t.dim() > 2 and t.shape[0] == 1:
        t = t[0]
    if t.dim() != 2:
        raise BadChannelCount(f"ssim takes single-channel images, got shape {tuple(t.shape)}")
    return t


def ssim(a: torch.Tensor | np.ndarray, b: torch.Tensor | np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    pa, pb = _as_plane(a), _as_plane(b)
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"ssim inputs differ in shape: {tuple(pa.shape)} vs {tuple(pb.shape)}")
    if min(pa.shape) < SSIM_WINDOW:
        raise TooSmall(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(pa.shape)}")
    win = _gaussian_window()
    x = pa[None, None]
    y = pb[None, None]

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(torch.mean(num / den))


# --- reports -----------------------------------------------------------------


def _aggregate(rows: Sequence[dict[str, Any]]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for key in METRIC_KEYS:
        values = np.array([float(r[key]) for r in rows], dtype=np.float64)
        if values.size == 0:
            out[key] = {"mean": math.nan, "std": math.nan}
        elif np.isinf(values).any():
            out[key] = {"mean": float(values.mean()), "std": math.nan}
        else:
            out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


@dataclass
class MetricsReport:
    per_image: list[dict[str, Any]] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    condition: str = "aligned"

    def add(self, record_id: str, psnr_db: float, ssim_value: float, perceptual: float) -> None:
        self.per_image.append(
            {"id": record_id, "psnr_db": psnr_db, "ssim": ssim_value, "perceptual": perceptual}
        )

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        return _aggregate(self.per_image)

    def column(self, key: str) -> np.ndarray:
        return np.array([float(r[key]) for r in self.per_image], dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "condition": self.condition,
            "per_image": self.per_image,
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsReport":
        return cls(
            per_image=list(data.get("per_image") or []),
            config_hash=data.get("config_hash", ""),
            seed=int(data.get("seed", 0)),
            condition=data.get("condition", "aligned"),
        )

    def save_json(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return p

    @classmethod
    def load_json(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def csv_row(self) -> str:
        agg = self.aggregates
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [
                self.condition,
                len(self.per_image),
                *(f"{agg[k]['mean']:.6f}" for k in METRIC_KEYS),
                self.config_hash,
                self.seed,
                FORMAT_VERSION,
            ]
        )
        return buf.getvalue()


CSV_HEADER = "condition,count,psnr_db,ssim,perceptual,config_hash,seed,format_version\n"


# --- paired bootstrap --------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    low: float
    high: float
    confidence: float

    @property
    def excludes_zero(self) -> bool:
        return self.low > 0.0 or self.high < 0.0


def paired_bootstrap(
    a: Sequence[float] | np.ndarray,
    b: Sequence[float] | np.ndarray,
    *,
    samples: int = 1000,
    confidence: float = 0.95,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile interval for mean(a - b) over resampled record pairs."""
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ShapeMismatch(f"paired samples differ in length: {xa.shape} vs {xb.shape}")
    if xa.size == 0:
        raise InputError("paired bootstrap needs at least one pair")
    diff = xa - xb
    rng = numpy_rng(seed, "bootstrap")
    idx = rng.integers(0, diff.size, size=(samples, diff.size))
    means = diff[idx].mean(axis=1)
    tail = (1.0 - confidence) / 2.0
    low, high = np.quantile(means, [tail, 1.0 - tail])
    return BootstrapResult(float(diff.mean()), float(low), float(high), confidence)
