"""Latent codec: a small convolutional autoencoder with four-scale encoder skips.

One shared encoder handles both modalities. Thermal images are replicated to
three channels before encoding and decoded thermal is the channel mean. The
encoder's downsampling blocks produce features at /2, /4, /8 and /16; the
latent sits at /f. The decoder pools its input down to /16 and climbs back up
through four x2 blocks, adding skip i (through its own zero-initialized 1x1
projection) at the block whose input resolution matches it.

`identity` mode has no parameters: encode and decode are the identity, which
lets the UNet tests run without a trained codec.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from threemti.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from threemti.config import RunConfig, config_hash, short_hash
from threemti.dataset import PairDataset, PairSample
from threemti.errors import BadChannelCount, BadShape, ConfigError, ConfigMismatch, ModeError
from threemti.imaging import resize
from threemti.logs import JsonlWriter
from threemti.manifest import Manifest
from threemti.seeding import seed_everything, torch_generator

logger = logging.getLogger(__name__)

SKIP_SCALES = 4
SUPPORTED_FACTORS = (2, 4, 8, 16)
IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class CodecConfig:
    mode: Literal["identity", "conv_ae"] = "conv_ae"
    downsample_factor: int = 4
    latent_channels: int = 4
    base_width: int = 32
    skip_scales: int = SKIP_SCALES

    def __post_init__(self) -> None:
        if self.skip_scales != SKIP_SCALES:
            raise ConfigError(f"skip_scales is fixed at {SKIP_SCALES}")
        if self.mode == "identity":
            # identity passes images through untouched
            object.__setattr__(self, "downsample_factor", 1)
            object.__setattr__(self, "latent_channels", IMAGE_CHANNELS)
        elif self.mode == "conv_ae":
            if self.downsample_factor not in SUPPORTED_FACTORS:
                raise ConfigError(
                    f"downsample_factor must be one of {SUPPORTED_FACTORS}, "
                    f"got {self.downsample_factor}"
                )
            if self.latent_channels < 1 or self.base_width < 1:
                raise ConfigError("latent_channels and base_width must be positive")
        else:
            raise ConfigError(f"unknown codec mode: {self.mode}")

    @classmethod
    def from_section(cls, section: Any) -> "CodecConfig":
        return cls(
            mode=section.mode,
            downsample_factor=section.downsample_factor,
            latent_channels=section.latent_channels,
            base_width=section.base_width,
            skip_scales=section.skip_scales,
        )

    @property
    def latent_level(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def widths(self) -> list[int]:
        w = self.base_width
        return [w, 2 * w, 2 * w, 4 * w]


@dataclass(frozen=True)
class SkipBundle:
    """Encoder features, one per downsampling block, finest first."""

    features: tuple[torch.Tensor, ...]

    def __post_init__(self) -> None:
        feats = tuple(self.features)
        object.__setattr__(self, "features", feats)
        if len(feats) != SKIP_SCALES:
            raise BadShape(f"SkipBundle needs {SKIP_SCALES} features, got {len(feats)}")
        if self.is_empty:
            return
        for prev, nxt in zip(feats, feats[1:]):
            if nxt.shape[-2] * 2 != prev.shape[-2] or nxt.shape[-1] * 2 != prev.shape[-1]:
                raise BadShape(
                    f"skip sizes must halve per scale: {tuple(prev.shape)} -> {tuple(nxt.shape)}"
                )

    @classmethod
    def empty(cls, batch: int, device: torch.device | None = None) -> "SkipBundle":
        return cls(tuple(torch.zeros(batch, 0, 0, 0, device=device) for _ in range(SKIP_SCALES)))

    @property
    def is_empty(self) -> bool:
        return all(f.numel() == 0 for f in self.features)

    def take(self, rows: slice) -> "SkipBundle":
        return SkipBundle(tuple(f[rows] for f in self.features))


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 3, padding=1)
        self.conv2 = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return F.silu(self.conv2(h))


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = cfg.widths
        self.level = cfg.latent_level
        self.conv_in = nn.Conv2d(IMAGE_CHANNELS, widths[0], 3, padding=1)
        cins = [widths[0], *widths[:-1]]
        self.down = nn.ModuleList(DownBlock(ci, co) for ci, co in zip(cins, widths))
        self.latent_proj = nn.Conv2d(widths[self.level - 1], cfg.latent_channels, 1)
        self.deep_proj = nn.ModuleList(
            nn.Conv2d(widths[j], cfg.latent_channels, 1) for j in range(self.level, SKIP_SCALES)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, SkipBundle]:
        h = F.silu(self.conv_in(x))
        feats: list[torch.Tensor] = []
        for block in self.down:
            h = block(h)
            feats.append(h)
        z = self.latent_proj(feats[self.level - 1])
        for proj, feat in zip(self.deep_proj, feats[self.level :]):
            z = z + F.interpolate(proj(feat), size=z.shape[-2:], mode="nearest")
        return z, SkipBundle(tuple(feats))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        widths = cfg.widths
        self.level = cfg.latent_level
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[self.level - 1], 3, padding=1)
        self.pool = nn.ModuleList(
            nn.Conv2d(widths[j - 1], widths[j], 3, stride=2, padding=1)
            for j in range(self.level, SKIP_SCALES)
        )
        # up block i runs /2^(4-i) -> /2^(3-i) and consumes encoder skip 3-i
        cins = widths[::-1]
        couts = [*widths[::-1][1:], widths[0]]
        self.up = nn.ModuleList(UpBlock(ci, co) for ci, co in zip(cins, couts))
        self.skip_convs = nn.ModuleList(nn.Conv2d(c, c, 1) for c in cins)
        for conv in self.skip_convs:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        self.conv_out = nn.Conv2d(widths[0], IMAGE_CHANNELS, 1)

    def forward(self, z: torch.Tensor, skips: SkipBundle, use_skips: bool) -> torch.Tensor:
        if use_skips and skips.is_empty:
            raise BadShape("use_skips requested with an empty SkipBundle")
        latent = F.silu(self.conv_in(z))
        h = latent
        for pool in self.pool:
            h = F.silu(pool(h))
        reinject = SKIP_SCALES - self.level
        for i, (block, proj) in enumerate(zip(self.up, self.skip_convs)):
            if i == reinject and self.pool:
                h = h + latent
            if use_skips:
                skip = skips.features[SKIP_SCALES - 1 - i]
                if skip.shape[0] != h.shape[0] or skip.shape[1:] != h.shape[1:]:
                    raise BadShape(
                        f"skip {SKIP_SCALES - 1 - i} has shape {tuple(skip.shape)}, "
                        f"decoder stage expects {tuple(h.shape)}"
                    )
                h = h + proj(skip)
            h = block(h)
        return self.conv_out(h)


class LatentCodec(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        if self.cfg.mode == "conv_ae":
            self.encoder: Encoder | None = Encoder(self.cfg)
            self.decoder: Decoder | None = Decoder(self.cfg)
        else:
            self.encoder = None
            self.decoder = None

    @property
    def is_identity(self) -> bool:
        return self.cfg.mode == "identity"

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    @property
    def factor(self) -> int:
        return self.cfg.downsample_factor

    def check_input(self, img: torch.Tensor) -> None:
        if img.dim() != 4:
            raise BadShape(f"expected (B, C, H, W), got {tuple(img.shape)}")
        if img.shape[1] not in (1, IMAGE_CHANNELS):
            raise BadChannelCount(
                f"codec expects 1 or {IMAGE_CHANNELS} channels, got {img.shape[1]}"
            )
        if self.is_identity:
            return
        # the four skip scales need /16 even when the latent sits higher
        unit = 2**SKIP_SCALES
        h, w = img.shape[-2:]
        if h % unit or w % unit:
            raise BadShape(f"image size {h}x{w} must be divisible by {unit} (factor {self.factor})")

    def encode(self, img: torch.Tensor) -> tuple[torch.Tensor, SkipBundle]:
        """Single-channel (thermal) input is replicated to three channels first."""
        self.check_input(img)
        if img.shape[1] == 1:
            img = thermal_to_image(img)
        if self.encoder is None:
            return img, SkipBundle.empty(img.shape[0], img.device)
        return self.encoder(img)

    def decode(self, z: torch.Tensor, skips: SkipBundle, use_skips: bool = True) -> torch.Tensor:
        if self.decoder is None:
            return z
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise BadShape(
                f"latent must be (B, {self.latent_channels}, h, w), got {tuple(z.shape)}"
            )
        return self.decoder(z, skips, use_skips)

    def reconstruct(self, img: torch.Tensor, use_skips: bool = False) -> torch.Tensor:
        z, skips = self.encode(img)
        return self.decode(z, skips, use_skips)


def thermal_to_image(thermal: torch.Tensor) -> torch.Tensor:
    if thermal.shape[1] != 1:
        raise BadChannelCount(f"thermal batch must be single-channel, got {thermal.shape[1]}")
    return thermal.expand(-1, IMAGE_CHANNELS, -1, -1).contiguous()


def image_to_thermal(img: torch.Tensor) -> torch.Tensor:
    return img.mean(dim=1, keepdim=True)


def freeze_encoder(codec: LatentCodec) -> None:
    if codec.encoder is not None:
        codec.encoder.requires_grad_(False)


# --- persistence -------------------------------------------------------------


def save_codec(
    codec: LatentCodec, path: str | Path, cfg: RunConfig, *, seed: int, step: int
) -> Path:
    tensors = {f"codec.{k}": v for k, v in codec.state_dict().items()}
    return save_checkpoint(
        path,
        tensors,
        components=["codec"],
        config=cfg.to_dict(),
        config_hash=short_hash(cfg),
        seed=seed,
        step=step,
    )


def codec_from_checkpoint(ckpt: Checkpoint, expected: CodecConfig | None = None) -> LatentCodec:
    if "codec" not in ckpt.components:
        raise ConfigMismatch("checkpoint holds no codec weights")
    stored = CodecConfig(**ckpt.config.get("codec", {}))
    if expected is not None and expected != stored:
        raise ConfigMismatch(f"codec config differs from checkpoint: {expected} != {stored}")
    codec = LatentCodec(stored)
    codec.load_state_dict(ckpt.component_state("codec"))
    return codec


def load_codec(path: str | Path, expected: CodecConfig | None = None) -> LatentCodec:
    return codec_from_checkpoint(load_checkpoint(path), expected)


# --- pretraining -------------------------------------------------------------


def _codec_images(samples: Sequence[PairSample], size: int) -> torch.Tensor:
    images: list[torch.Tensor] = []
    for s in samples:
        for img in (s.ref, s.gt.expand(IMAGE_CHANNELS, -1, -1)):
            images.append(resize(img, size).clamp(0.0, 1.0))
    return torch.stack(images)


def pretrain_codec(
    manifest: Manifest,
    cfg: RunConfig,
    *,
    out_path: str | Path | None = None,
    loss_log: str | Path | None = None,
    steps: int | None = None,
    quiet: bool = False,
) -> tuple[LatentCodec, list[float]]:
    """Train encoder and decoder jointly on pixel L2 reconstruction.

    Skips stay unused so the zero-initialized projections leave pretraining at
    zero. References and (replicated) thermal ground truths are both used.
    """
    codec_cfg = CodecConfig.from_section(cfg.codec)
    if codec_cfg.mode != "conv_ae":
        raise ModeError("pretrain_codec needs codec.mode = conv_ae")
    seed = cfg.train.seed
    seed_everything(seed)
    dataset = PairDataset(manifest, split="train")
    images = _codec_images(dataset.samples, cfg.data.ref_size)

    codec = LatentCodec(codec_cfg).to(cfg.train.device)
    params = [p for n, p in codec.named_parameters() if not n.startswith("decoder.skip_convs")]
    opt = torch.optim.Adam(params, lr=cfg.train.pretrain_lr)
    total = cfg.train.pretrain_steps if steps is None else steps
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1))
    batch = min(cfg.train.pretrain_batch_size, images.shape[0])

    writer = JsonlWriter(loss_log, config_hash=short_hash(cfg), seed=seed) if loss_log else None
    losses: list[float] = []
    logger.info(
        "Pretraining codec on %d images for %d steps (%s)",
        images.shape[0],
        total,
        config_hash(cfg),
    )
    try:
        for step in tqdm(range(total), desc="codec", disable=quiet, leave=False):
            g = torch_generator(seed, "codec-batch", step)
            idx = torch.randperm(images.shape[0], generator=g)[:batch]
            x = images[idx].to(cfg.train.device)
            recon = codec.reconstruct(x, use_skips=False)
            loss = F.mse_loss(recon, x)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            value = float(loss.detach())
            losses.append(value)
            if writer:
                writer.write({"step": step, "l2": value})
            if cfg.train.log_every and step % cfg.train.log_every == 0:
                logger.debug("codec step %d: l2=%.6f", step, value)
    finally:
        if writer:
            writer.close()

    codec.eval()
    if out_path is not None:
        save_codec(codec, out_path, cfg, seed=seed, step=total)
    return codec, losses
