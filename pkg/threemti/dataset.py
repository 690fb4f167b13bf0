"""In-memory paired dataset over a manifest split."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import torch
from torch.utils.data import Dataset

from threemti.config import thread_count
from threemti.errors import EmptyDataset, ShapeMismatch
from threemti.imaging import load_rgb, load_thermal
from threemti.manifest import Manifest, PairRecord, Split
from threemti.warp import WarpParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairSample:
    id: str
    lr: torch.Tensor  # (1, h, w)
    ref: torch.Tensor  # (3, H, W)
    gt: torch.Tensor  # (1, H, W)
    warp: WarpParams


@dataclass(frozen=True)
class PairBatch:
    ids: list[str]
    lr: torch.Tensor  # (B, 1, h, w)
    ref: torch.Tensor  # (B, 3, H, W)
    gt: torch.Tensor  # (B, 1, H, W)
    warps: list[WarpParams]

    def __len__(self) -> int:
        return len(self.ids)

    def to(self, device: torch.device | str) -> "PairBatch":
        return PairBatch(
            ids=self.ids,
            lr=self.lr.to(device),
            ref=self.ref.to(device),
            gt=self.gt.to(device),
            warps=self.warps,
        )


def load_sample(manifest: Manifest, record: PairRecord) -> PairSample:
    return PairSample(
        id=record.id,
        lr=load_thermal(manifest.resolve(record.lr_thermal_path)),
        ref=load_rgb(manifest.resolve(record.rgb_ref_path)),
        gt=load_thermal(manifest.resolve(record.gt_thermal_path)),
        warp=record.warp,
    )


class PairDataset(Dataset):
    """Every record of one split, decoded once up front.

    Toy datasets are a few hundred small PNGs, so holding them in memory is
    cheaper than decoding per step.
    """

    def __init__(self, manifest: Manifest, split: Split | None = "train"):
        self.manifest = manifest
        self.records = manifest.split(split)
        if not self.records:
            raise EmptyDataset(f"{manifest.path}: no records in split {split!r}")
        workers = min(thread_count(), len(self.records))
        with ThreadPoolExecutor(max_workers=workers) as executor:
            self.samples = list(executor.map(lambda r: load_sample(manifest, r), self.records))
        logger.info(
            "Loaded %d %s pairs from %s with %d workers",
            len(self.samples),
            split or "all",
            manifest.path,
            workers,
        )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> PairSample:
        return self.samples[index]

    def batch(self, indices: Sequence[int]) -> PairBatch:
        return collate_pairs([self.samples[i] for i in indices])

    def iter_batches(self, batch_size: int) -> Iterator[PairBatch]:
        for start in range(0, len(self.samples), batch_size):
            yield collate_pairs(self.samples[start : start + batch_size])


def collate_pairs(samples: Sequence[PairSample]) -> PairBatch:
    if not samples:
        raise EmptyDataset("cannot collate an empty batch")
    for name in ("lr", "ref", "gt"):
        shapes = {tuple(getattr(s, name).shape) for s in samples}
        if len(shapes) > 1:
            raise ShapeMismatch(f"{name} images differ in shape within a batch: {sorted(shapes)}")
    return PairBatch(
        ids=[s.id for s in samples],
        lr=torch.stack([s.lr for s in samples]),
        ref=torch.stack([s.ref for s in samples]),
        gt=torch.stack([s.gt for s in samples]),
        warps=[s.warp for s in samples],
    )
