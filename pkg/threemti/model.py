"""Full super-resolution model: codec + CSM-UNet + prompt, and its checkpoints."""

from __future__ import annotations

import logging
from collections import Counter
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from threemti.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from threemti.codec import (
    CodecConfig,
    LatentCodec,
    SkipBundle,
    codec_from_checkpoint,
    image_to_thermal,
    thermal_to_image,
)
from threemti.config import RunConfig, build_config, short_hash
from threemti.csm_unet import CSMUNet, ModalityStack, PromptEmbedding, UNetConfig
from threemti.errors import BadChannelCount, ConfigMismatch, ShapeMismatch
from threemti.imaging import upsample_thermal
from threemti.lora import lora_spec, restore_sites

logger = logging.getLogger(__name__)

ARCHITECTURE_SECTIONS = ("codec", "unet")

References = torch.Tensor | Sequence[torch.Tensor] | None


def _as_reference_list(refs: References) -> list[torch.Tensor]:
    if refs is None:
        return []
    if isinstance(refs, torch.Tensor):
        if refs.dim() == 5:
            return list(refs.unbind(dim=1))
        return [refs]
    return list(refs)


class ThermalSRModel(nn.Module):
    """LR thermal + optional RGB references -> HR thermal on the reference grid."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.codec = LatentCodec(CodecConfig.from_section(cfg.codec))
        self.unet = CSMUNet(UNetConfig.from_section(cfg.unet), self.codec.latent_channels)
        self.prompt = PromptEmbedding(cfg.unet.prompt_dim, cfg.unet.prompt_tokens)
        self.counters: Counter[str] = Counter()

    @property
    def scale_factor(self) -> int:
        return self.cfg.data.ref_size // self.cfg.data.lr_size

    def forward(
        self,
        lr_thermal: torch.Tensor,
        references: References = None,
        *,
        use_skips: bool = True,
        out_size: tuple[int, int] | None = None,
    ) -> torch.Tensor:
        if lr_thermal.dim() != 4 or lr_thermal.shape[1] != 1:
            raise BadChannelCount(f"LR thermal must be (B, 1, h, w), got {tuple(lr_thermal.shape)}")
        refs = _as_reference_list(references)
        batch = lr_thermal.shape[0]
        for ref in refs:
            if ref.dim() != 4 or ref.shape[1] != 3:
                raise BadChannelCount(f"references must be (B, 3, H, W), got {tuple(ref.shape)}")
            if ref.shape[0] != batch or ref.shape[-2:] != refs[0].shape[-2:]:
                raise ShapeMismatch("references must share batch size and resolution")
        if refs:
            size = tuple(refs[0].shape[-2:])
        elif out_size is not None:
            size = tuple(out_size)
        else:
            h, w = lr_thermal.shape[-2:]
            size = (h * self.scale_factor, w * self.scale_factor)

        thermal_up = upsample_thermal(lr_thermal, size)
        z, skips = self.codec.encode(torch.cat([*refs, thermal_to_image(thermal_up)], dim=0))
        latents = list(z.split(batch, dim=0))
        stack = ModalityStack.from_latents(latents[-1], latents[:-1])
        refined = self.unet(stack, self.prompt)

        thermal_rows = slice(len(refs) * batch, None)
        if use_skips and not self.codec.is_identity:
            out = self.codec.decode(refined, skips.take(thermal_rows), use_skips=True)
            self.counters["skip_decodes"] += 1
        else:
            empty = SkipBundle.empty(batch, refined.device)
            out = self.codec.decode(refined, empty, use_skips=False)
            self.counters["plain_decodes"] += 1
        self.counters[f"stack_m{stack.modalities}"] += 1
        return image_to_thermal(out)

    def reset_counters(self) -> dict[str, int]:
        snapshot = dict(self.counters)
        self.counters.clear()
        return snapshot


# --- checkpoints -------------------------------------------------------------


def architecture(cfg: RunConfig | dict) -> dict:
    data = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    return {k: data.get(k) for k in ARCHITECTURE_SECTIONS}


def save_model(
    model: ThermalSRModel, path: str | Path, *, seed: int, step: int
) -> Path:
    tensors: dict[str, torch.Tensor] = {}
    for name, value in model.codec.state_dict().items():
        tensors[f"codec.{name}"] = value
    for name, value in model.unet.state_dict().items():
        tensors[f"unet.{name}"] = value
    for name, value in model.prompt.state_dict().items():
        tensors[f"prompt.{name}"] = value
    sites = lora_spec(model)
    components = ["codec", "unet", "prompt"] + (["lora"] if sites else [])
    return save_checkpoint(
        path,
        tensors,
        components=components,
        config=model.cfg.to_dict(),
        config_hash=short_hash(model.cfg),
        seed=seed,
        step=step,
        extra={"lora": sites},
    )


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> ThermalSRModel:
    stored = build_config(ckpt.config)
    if cfg is not None and architecture(cfg) != architecture(stored):
        raise ConfigMismatch(
            f"checkpoint architecture {architecture(stored)} "
            f"does not match config {architecture(cfg)}"
        )
    missing = {"codec", "unet", "prompt"} - set(ckpt.components)
    if missing:
        raise ConfigMismatch(f"checkpoint lacks components {sorted(missing)}")
    model = ThermalSRModel(stored)
    restore_sites(model, ckpt.header.get("lora") or {})
    model.codec.load_state_dict(ckpt.component_state("codec"))
    model.unet.load_state_dict(ckpt.component_state("unet"))
    model.prompt.load_state_dict(ckpt.component_state("prompt"))
    model.eval()
    return model


def load_model(path: str | Path, cfg: RunConfig | None = None) -> ThermalSRModel:
    return model_from_checkpoint(load_checkpoint(path), cfg)


def attach_codec(model: ThermalSRModel, path: str | Path) -> None:
    """Load pretrained codec weights into a fresh model."""
    codec = codec_from_checkpoint(load_checkpoint(path), model.codec.cfg)
    model.codec.load_state_dict(codec.state_dict())
    logger.info("Loaded codec weights from %s", path)

