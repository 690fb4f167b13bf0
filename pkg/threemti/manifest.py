from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal

from threemti.errors import EmptyDataset, ManifestFormatError, ManifestValidationError
from threemti.warp import WarpParams

Split = Literal["train", "test"]
PATH_FIELDS = ("lr_thermal_path", "rgb_ref_path", "gt_thermal_path")
FIELD_ORDER = ("id", *PATH_FIELDS, "warp", "split", "seed")


@dataclass(frozen=True)
class PairRecord:
    """One sample. Paths are stored as written, relative to the manifest file.

    A source (HR) manifest uses the same record shape with the undegraded
    thermal in both `lr_thermal_path` and `gt_thermal_path`.
    """

    id: str
    lr_thermal_path: str
    rgb_ref_path: str
    gt_thermal_path: str
    warp: WarpParams = field(default_factory=WarpParams)
    split: Split = "train"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"record {self.id}: split must be train or test, got {self.split!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "lr_thermal_path": self.lr_thermal_path,
            "rgb_ref_path": self.rgb_ref_path,
            "gt_thermal_path": self.gt_thermal_path,
            "warp": self.warp.to_dict(),
            "split": self.split,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PairRecord":
        unknown = set(data) - set(FIELD_ORDER)
        if unknown:
            raise ValueError(f"record {data.get('id')}: unknown fields {sorted(unknown)}")
        return cls(
            id=str(data["id"]),
            lr_thermal_path=str(data["lr_thermal_path"]),
            rgb_ref_path=str(data["rgb_ref_path"]),
            gt_thermal_path=str(data["gt_thermal_path"]),
            warp=WarpParams.from_dict(data.get("warp") or {}),
            split=data.get("split", "train"),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class Manifest:
    path: Path
    records: list[PairRecord]

    @property
    def root(self) -> Path:
        return self.path.parent

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split(self, name: Split | None) -> list[PairRecord]:
        if name is None:
            return list(self.records)
        return [r for r in self.records if r.split == name]

    def get(self, record_id: str) -> PairRecord | None:
        for r in self.records:
            if r.id == record_id:
                return r
        return None

    def __len__(self) -> int:
        return len(self.records)


def missing_files(records: Iterable[PairRecord], root: Path) -> list[str]:
    bad: list[str] = []
    for rec in records:
        for name in PATH_FIELDS:
            p = Path(getattr(rec, name))
            if not (p if p.is_absolute() else root / p).exists():
                bad.append(rec.id)
                break
    return bad


def validate_manifest(manifest: Manifest) -> None:
    bad = missing_files(manifest.records, manifest.root)
    if bad:
        raise ManifestValidationError(bad)
    counts = Counter(r.id for r in manifest.records)
    dupes = sorted(i for i, n in counts.items() if n > 1)
    if dupes:
        raise ManifestValidationError(dupes, detail="duplicate ids")


def build_manifest(
    records: list[PairRecord], out_path: str | Path, *, validate: bool = True
) -> Manifest:
    """Write records as JSON lines (stable field order) after checking their files."""
    if not records:
        raise EmptyDataset("build_manifest needs at least one record")
    out = Path(out_path)
    manifest = Manifest(path=out, records=list(records))
    if validate:
        validate_manifest(manifest)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), ensure_ascii=False))
            f.write("\n")
    return manifest


def load_manifest(path: str | Path, *, validate: bool = True) -> Manifest:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"No manifest found at {p}")
    records: list[PairRecord] = []
    with p.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(PairRecord.from_dict(json.loads(line)))
            except (KeyError, ValueError) as e:
                raise ManifestFormatError(f"{p}:{lineno}: bad record: {e}") from e
    manifest = Manifest(path=p, records=records)
    if validate:
        validate_manifest(manifest)
    return manifest
