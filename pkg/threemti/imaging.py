"""Degradation and reference preparation, plus PNG I/O.

Images are float tensors in [0, 1] laid out (C, H, W). Thermal PNGs are
16-bit single channel, RGB PNGs 8-bit three channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from threemti.errors import BadChannelCount, ConfigError, InputTooSmall
from threemti.logs import FORMAT_VERSION

Filter = Literal["bicubic", "bilinear", "area"]


@dataclass(frozen=True)
class DegradeConfig:
    lr_size: int = 64
    ref_size: int = 512
    noise_sigma: float = 0.02
    downsample_filter: Filter = "bicubic"

    def __post_init__(self) -> None:
        if self.lr_size < 8:
            raise ConfigError("lr_size must be >= 8")
        if self.ref_size % self.lr_size != 0:
            raise ConfigError("ref_size must be an integer multiple of lr_size")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.downsample_filter not in ("bicubic", "bilinear", "area"):
            raise ConfigError(f"unknown downsample_filter: {self.downsample_filter}")

    @classmethod
    def from_section(cls, section: Any) -> "DegradeConfig":
        return cls(
            lr_size=section.lr_size,
            ref_size=section.ref_size,
            noise_sigma=section.noise_sigma,
            downsample_filter=section.downsample_filter,
        )

    @property
    def scale_factor(self) -> int:
        return self.ref_size // self.lr_size


def as_chw(img: torch.Tensor | np.ndarray) -> torch.Tensor:
    """(H, W), (H, W, C) arrays or (C, H, W) tensors -> float (C, H, W) tensor."""
    if isinstance(img, np.ndarray):
        arr = img
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3:
            arr = np.moveaxis(arr, -1, 0)
        t = torch.from_numpy(np.ascontiguousarray(arr))
    else:
        t = img
        if t.dim() == 2:
            t = t.unsqueeze(0)
    if t.dim() != 3:
        raise BadChannelCount(f"expected a single image, got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.float()
    return t


def center_crop_square(img: torch.Tensor) -> torch.Tensor:
    _, h, w = img.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return img[:, top : top + side, left : left + side]


def resize(img: torch.Tensor, size: int, filt: Filter = "bicubic") -> torch.Tensor:
    """Square resize of a (C, H, W) tensor; antialiased when downsampling."""
    _, h, w = img.shape
    if (h, w) == (size, size):
        return img
    x = img.unsqueeze(0)
    if filt == "area":
        out = F.interpolate(x, size=(size, size), mode="area")
    else:
        out = F.interpolate(
            x, size=(size, size), mode=filt, align_corners=False, antialias=size < min(h, w)
        )
    return out.squeeze(0)


def degrade_thermal(
    hr_thermal: torch.Tensor | np.ndarray, cfg: DegradeConfig, seed: int
) -> torch.Tensor:
    """Center-crop, resize to lr_size, add seeded Gaussian noise, clamp to [0, 1]."""
    img = as_chw(hr_thermal)
    if img.shape[0] != 1:
        raise BadChannelCount(f"thermal image must be single-channel, got {img.shape[0]}")
    if min(img.shape[1:]) < cfg.lr_size:
        raise InputTooSmall(
            f"thermal image {tuple(img.shape[1:])} smaller than lr_size {cfg.lr_size}"
        )
    out = resize(center_crop_square(img), cfg.lr_size, cfg.downsample_filter)
    if cfg.noise_sigma > 0:
        g = torch.Generator().manual_seed(seed)
        noise = torch.randn(out.shape, generator=g, dtype=torch.float64)
        out = (out.to(torch.float64) + cfg.noise_sigma * noise).to(out.dtype)
    return out.clamp(0.0, 1.0)


def prepare_reference(rgb: torch.Tensor | np.ndarray, cfg: DegradeConfig) -> torch.Tensor:
    """Center-crop to a square (same relative window as the thermal) and resize."""
    img = as_chw(rgb)
    if img.shape[0] != 3:
        raise BadChannelCount(f"RGB reference must have 3 channels, got {img.shape[0]}")
    crop = center_crop_square(img)
    if crop.shape[-1] < cfg.ref_size:
        raise InputTooSmall(
            f"RGB reference {tuple(img.shape[1:])} smaller than ref_size {cfg.ref_size}"
        )
    if crop.shape[-1] == cfg.ref_size:
        return crop
    return resize(crop, cfg.ref_size, cfg.downsample_filter).clamp(0.0, 1.0)


def prepare_ground_truth(hr_thermal: torch.Tensor | np.ndarray, cfg: DegradeConfig) -> torch.Tensor:
    """HR thermal brought onto the reference grid (the super-resolution target)."""
    img = as_chw(hr_thermal)
    if img.shape[0] != 1:
        raise BadChannelCount(f"thermal image must be single-channel, got {img.shape[0]}")
    crop = center_crop_square(img)
    if crop.shape[-1] < cfg.lr_size:
        raise InputTooSmall(f"thermal image smaller than lr_size {cfg.lr_size}")
    return resize(crop, cfg.ref_size, cfg.downsample_filter).clamp(0.0, 1.0)


def upsample_thermal(lr: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bicubic upsampling of a (B, 1, h, w) batch onto the reference grid."""
    if tuple(lr.shape[-2:]) == tuple(size):
        return lr.clamp(0.0, 1.0)
    up = F.interpolate(lr, size=size, mode="bicubic", align_corners=False)
    return up.clamp(0.0, 1.0)


# --- PNG I/O ----------------------------------------------------------------


def png_info(provenance: Mapping[str, Any] | None) -> PngInfo | None:
    """tEXt chunks for `provenance`, stamped with the format version."""
    if provenance is None:
        return None
    info = PngInfo()
    for key, value in {"format_version": FORMAT_VERSION, **provenance}.items():
        info.add_text(key, str(value))
    return info


def read_png_provenance(path: str | Path) -> dict[str, str]:
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}))


def load_rgb(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return as_chw(arr)


def save_rgb(
    img: torch.Tensor, path: str | Path, provenance: Mapping[str, Any] | None = None
) -> None:
    arr = img.detach().cpu().clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    q = np.round(arr.astype(np.float64) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG", pnginfo=png_info(provenance))


def load_thermal(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise BadChannelCount(f"{path}: thermal PNG must be single-channel")
    scale = 65535.0 if arr.dtype != np.uint8 else 255.0
    return as_chw((arr.astype(np.float64) / scale).astype(np.float32))


def save_thermal(
    img: torch.Tensor, path: str | Path, provenance: Mapping[str, Any] | None = None
) -> None:
    t = img.detach().cpu()
    if t.dim() == 3:
        if t.shape[0] != 1:
            raise BadChannelCount("thermal image must be single-channel")
        t = t[0]
    q = np.round(t.clamp(0.0, 1.0).numpy().astype(np.float64) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG", pnginfo=png_info(provenance))
