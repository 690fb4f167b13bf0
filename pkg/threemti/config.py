"""Run configuration: one YAML file, seven sections, every key defaulted.

Precedence is flag > file > preset > default. Unknown keys are rejected so a
typo in an ablation config fails loudly instead of silently training the
wrong variant.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from threemti.errors import ConfigError

Interval = tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class WarpRangesSection(_Section):
    tx: Interval = (-0.05, 0.05)
    ty: Interval = (-0.05, 0.05)
    scale: Interval = (0.95, 1.05)
    theta: Interval = (-3.0, 3.0)
    corner_jitter: Interval = (-0.02, 0.02)


class DataSection(_Section):
    lr_size: int = 64
    ref_size: int = 512
    noise_sigma: float = 0.02
    downsample_filter: Literal["bicubic", "bilinear", "area"] = "bicubic"
    scene_size: int = 512
    warp: WarpRangesSection = Field(default_factory=WarpRangesSection)

    @model_validator(mode="after")
    def _check(self) -> "DataSection":
        if self.lr_size < 8:
            raise ValueError("data.lr_size must be >= 8")
        if self.ref_size % self.lr_size != 0:
            raise ValueError("data.ref_size must be an integer multiple of data.lr_size")
        if self.noise_sigma < 0:
            raise ValueError("data.noise_sigma must be >= 0")
        return self


class CodecSection(_Section):
    mode: Literal["identity", "conv_ae"] = "conv_ae"
    downsample_factor: int = 4
    latent_channels: int = 4
    base_width: int = 32
    skip_scales: Literal[4] = 4

    @model_validator(mode="after")
    def _check(self) -> "CodecSection":
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("codec.downsample_factor must be a power of 2")
        return self


class UNetSection(_Section):
    levels: int = 3
    widths: list[int] = Field(default_factory=lambda: [32, 64, 128])
    attention_levels: list[int] = Field(default_factory=lambda: [1, 2])
    heads: int = 4
    prompt_dim: int = 64
    prompt_tokens: int = 1
    timestep_index: int = 999
    cross_modal: bool = True

    @model_validator(mode="after")
    def _check(self) -> "UNetSection":
        if len(self.widths) != self.levels:
            raise ValueError("unet.widths must list one width per level")
        if not self.attention_levels:
            raise ValueError("unet.attention_levels must name at least one level")
        if any(lvl < 0 or lvl >= self.levels for lvl in self.attention_levels):
            raise ValueError("unet.attention_levels out of range")
        if any(w % self.heads for w in self.widths):
            raise ValueError("unet.widths must be divisible by unet.heads")
        return self


class LoraSection(_Section):
    unet_rank: int = 16
    decoder_rank: int = 4
    alpha: float | None = None
    unet_targets: list[str] = Field(
        default_factory=lambda: ["*.attn1.to_*", "*.attn2.to_*"]
    )
    decoder_targets: list[str] = Field(
        default_factory=lambda: ["decoder.skip_convs.*", "decoder.conv_out"]
    )


class LossSection(_Section):
    perceptual_weight: float = Field(1.0, alias="lambda", ge=0.0)
    feature_net: Literal["random_pyramid", "external"] = "random_pyramid"
    feature_seed: int = 0
    extractor: str | None = None


class TrainSection(_Section):
    lr: float = Field(2e-5, gt=0.0)
    batch_size: int = Field(4, ge=1)
    iterations: int = Field(8000, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    use_reference: bool = True
    use_skip: bool = True
    seed: int = 0
    lora_mode: Literal["lora", "full"] = "lora"
    checkpoint_every: int = 1000
    grad_clip: float = 1.0
    log_every: int = 10
    device: str = "cpu"
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8


class EvalSection(_Section):
    warp_test: bool = False
    warp: WarpRangesSection = Field(default_factory=WarpRangesSection)
    bootstrap_samples: int = 1000
    sample_grids: int = 4


class RunConfig(_Section):
    data: DataSection = Field(default_factory=DataSection)
    codec: CodecSection = Field(default_factory=CodecSection)
    unet: UNetSection = Field(default_factory=UNetSection)
    lora: LoraSection = Field(default_factory=LoraSection)
    loss: LossSection = Field(default_factory=LossSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


PRESETS: dict[str, dict[str, Any]] = {
    "paper-geometry": {},
    "toy": {
        "data": {"lr_size": 32, "ref_size": 128, "scene_size": 256},
        "train": {
            "iterations": 2000,
            "lr": 5e-4,
            "lora_mode": "full",
            "checkpoint_every": 500,
        },
    },
}


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_config(data: dict[str, Any] | None = None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str) -> RunConfig:
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    return build_config(raw)


def load_config(
    path: str | Path | None = None,
    preset: str | None = "toy",
    overrides: list[str] | None = None,
    *,
    base: dict[str, Any] | None = None,
) -> RunConfig:
    """Layer base, preset, file and overrides; later layers win."""
    merged: dict[str, Any] = copy.deepcopy(base or {})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset: {preset} (choose from {sorted(PRESETS)})")
        merged = _deep_merge(merged, PRESETS[preset])
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping of sections")
        merged = _deep_merge(merged, raw)
    for item in overrides or []:
        merged = _deep_merge(merged, parse_override(item))
    return build_config(merged)


def parse_override(item: str) -> dict[str, Any]:
    """`section.key=value` (value parsed as YAML) -> nested dict."""
    if "=" not in item:
        raise ConfigError(f"Override must look like section.key=value: {item!r}")
    dotted, raw_value = item.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if len(keys) < 2:
        raise ConfigError(f"Override must name a section and a key: {item!r}")
    value: Any = yaml.safe_load(raw_value)
    for key in reversed(keys):
        value = {key: value}
    return value


def save_config(cfg: RunConfig, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(cfg.to_yaml(), encoding="utf-8")


def config_hash(cfg: RunConfig | dict[str, Any]) -> str:
    data = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return f"sha256:{hashlib.sha256(canonical.encode('utf-8')).hexdigest()}"


def short_hash(cfg: RunConfig | dict[str, Any]) -> str:
    return config_hash(cfg).split(":", 1)[1][:16]


def thread_count() -> int:
    """Worker cap from THREEMTI_THREADS, falling back to the CPU count (max 8)."""
    raw = os.environ.get("THREEMTI_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigError(f"THREEMTI_THREADS must be an integer, got {raw!r}") from e
        if value < 1:
            raise ConfigError(f"THREEMTI_THREADS must be >= 1, got {value}")
        return value
    return min(8, os.cpu_count() or 1)
