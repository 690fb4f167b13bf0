from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest
import torch

from threemti.config import RunConfig, build_config
from threemti.imaging import (
    DegradeConfig,
    degrade_thermal,
    prepare_ground_truth,
    prepare_reference,
    save_rgb,
    save_thermal,
)
from threemti.manifest import Manifest, PairRecord, build_manifest
from threemti.scenes import generate_toy_scene
from threemti.seeding import derive_seed, numpy_rng

TINY_CONFIG = {
    "data": {"lr_size": 8, "ref_size": 32, "scene_size": 64, "noise_sigma": 0.0},
    "codec": {"mode": "identity"},
    "unet": {
        "levels": 2,
        "widths": [8, 16],
        "attention_levels": [1],
        "heads": 2,
        "prompt_dim": 8,
    },
    "train": {
        "iterations": 3,
        "batch_size": 2,
        "lr": 1e-3,
        "lora_mode": "full",
        "checkpoint_every": 0,
        "log_every": 1,
    },
    "eval": {"bootstrap_samples": 50, "sample_grids": 2},
}


def tiny_config(**sections: dict) -> RunConfig:
    data = {k: dict(v) for k, v in TINY_CONFIG.items()}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return build_config(data)


def moment_features(x: torch.Tensor) -> list[torch.Tensor]:
    """Small stand-in for an external feature network."""
    f = torch.cat([x, x * x], dim=1)
    return [f, torch.nn.functional.avg_pool2d(f, 2)]


def write_dataset(root: Path, cfg: RunConfig, count: int, n_test: int, seed: int = 0) -> Manifest:
    """Prepared LR / reference / GT triples for `count` toy scenes."""
    degrade = DegradeConfig.from_section(cfg.data)
    records = []
    for i in range(count):
        rid = f"toy-{i:05d}"
        rgb, thermal = generate_toy_scene(numpy_rng(seed, rid), cfg.data.scene_size)
        record_seed = derive_seed(seed, rid)
        save_thermal(degrade_thermal(thermal, degrade, record_seed), root / "lr" / f"{rid}.png")
        save_rgb(prepare_reference(rgb, degrade), root / "ref" / f"{rid}.png")
        save_thermal(prepare_ground_truth(thermal, degrade), root / "gt" / f"{rid}.png")
        records.append(
            PairRecord(
                id=rid,
                lr_thermal_path=f"lr/{rid}.png",
                rgb_ref_path=f"ref/{rid}.png",
                gt_thermal_path=f"gt/{rid}.png",
                split="test" if i >= count - n_test else "train",
                seed=record_seed,
            )
        )
    return build_manifest(records, root / "manifest.jsonl")


@pytest.fixture
def cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture
def manifest(tmp_path: Path, cfg: RunConfig) -> Manifest:
    return write_dataset(tmp_path / "data", cfg, count=6, n_test=2)


def rel_err(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    count: int = 50,
    h: float = 1e-4,
    tol: float = 1e-3,
    seed: int = 0,
) -> None:
    """Compare autograd against central differences on sampled coordinates."""
    grads = torch.autograd.grad(fn(), list(tensors))
    rng = np.random.default_rng(seed)
    for _ in range(count):
        which = int(rng.integers(len(tensors)))
        t = tensors[which]
        idx = int(rng.integers(t.numel()))
        flat = t.detach().view(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + h
            plus = float(fn())
            flat[idx] = orig - h
            minus = float(fn())
            flat[idx] = orig
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[which].reshape(-1)[idx])
        assert rel_err(analytic, numeric) < tol, (which, idx, analytic, numeric)
