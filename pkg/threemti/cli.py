"""`threemti` command line: data generation, preparation, training and evaluation.

Every command writes into an --out directory and exits 0 on success, 1 on a
runtime error (message on stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from threemti.checkpoint import read_header
from threemti.codec import pretrain_codec
from threemti.config import PRESETS, RunConfig, load_config, short_hash, thread_count
from threemti.errors import ConfigError, ThreemtiError
from threemti.imaging import (
    DegradeConfig,
    degrade_thermal,
    load_rgb,
    load_thermal,
    prepare_ground_truth,
    prepare_reference,
    save_rgb,
    save_thermal,
)
from threemti.logs import setup
from threemti.manifest import Manifest, PairRecord, build_manifest, load_manifest
from threemti.model import load_model
from threemti.scenes import generate_toy_scene
from threemti.seeding import derive_seed, numpy_rng
from threemti.trainer import RunDir, ablate, apply_threads, evaluate, infer, train
from threemti.warp import WarpParams, WarpRanges, apply_warp, sample_warp

logger = logging.getLogger("threemti.cli")

MANIFEST_NAME = "manifest.jsonl"


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from e
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _fraction(value: str) -> float:
    f = float(value)
    if not 0.0 <= f < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {f}")
    return f


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML run config (partial files are fine)")
    p.add_argument(
        "--preset", default=None, choices=sorted(PRESETS), help="Config preset (default: toy)"
    )
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config key; repeatable",
    )
    p.add_argument("--seed", type=int, default=None, help="Overrides train.seed")


def _overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return overrides


def _config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, args.preset or "toy", _overrides(args))


def _checkpoint_config(args: argparse.Namespace) -> RunConfig:
    """The checkpoint's own config with --preset, --config and --set layered on top."""
    base = read_header(args.checkpoint).get("config") or {}
    return load_config(args.config, args.preset, _overrides(args), base=base)


def _provenance(cfg: RunConfig) -> dict[str, Any]:
    return {"config_hash": short_hash(cfg), "seed": cfg.train.seed}


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, default=str))


# --- gen-toy -------------------------------------------------------------------


def _render_toy(
    out: Path, record_id: str, seed: int, size: int, provenance: dict[str, Any]
) -> None:
    rgb, thermal = generate_toy_scene(numpy_rng(seed, record_id), size)
    save_rgb(rgb, out / "rgb" / f"{record_id}.png", provenance)
    save_thermal(thermal, out / "thermal" / f"{record_id}.png", provenance)


def cmd_gen_toy(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = cfg.train.seed
    provenance = _provenance(cfg)
    size = args.size or cfg.data.scene_size
    out = Path(args.out)
    n_test = int(round(args.count * args.test_fraction))
    ids = [f"toy-{i:05d}" for i in range(args.count)]
    with ThreadPoolExecutor(max_workers=thread_count()) as executor:
        list(executor.map(lambda rid: _render_toy(out, rid, seed, size, provenance), ids))
    records = [
        PairRecord(
            id=rid,
            lr_thermal_path=f"thermal/{rid}.png",
            rgb_ref_path=f"rgb/{rid}.png",
            gt_thermal_path=f"thermal/{rid}.png",
            split="test" if i >= args.count - n_test else "train",
            seed=derive_seed(seed, rid),
        )
        for i, rid in enumerate(ids)
    ]
    manifest = build_manifest(records, out / MANIFEST_NAME)
    logger.info("Generated %d toy pairs (%d test) under %s", len(records), n_test, out)
    _emit(
        {
            "manifest": manifest.path,
            "count": len(records),
            "test": n_test,
            "size": size,
            **provenance,
        }
    )
    return 0


# --- prepare -----------------------------------------------------------------------


@dataclass(frozen=True)
class SourceSpec:
    name: str
    path: Path
    count: int | None = None

    @classmethod
    def parse(cls, text: str) -> "SourceSpec":
        """`path`, `name=path` or `name=path:count`."""
        name, sep, rest = text.partition("=")
        if not sep:
            name, rest = "", text
        count: int | None = None
        head, colon, tail = rest.rpartition(":")
        if colon and tail.isdigit():
            rest, count = head, int(tail)
        return cls(name=name, path=Path(rest), count=count)


def select_records(manifest: Manifest, spec: SourceSpec, seed: int) -> list[PairRecord]:
    records = list(manifest.records)
    if spec.count is None:
        return records
    if spec.count > len(records):
        raise ConfigError(
            f"source {spec.name or spec.path} has {len(records)} records, {spec.count} requested"
        )
    rng = numpy_rng(seed, "source", spec.name or str(spec.path))
    picked = sorted(rng.choice(len(records), size=spec.count, replace=False).tolist())
    return [records[i] for i in picked]


def _prepare_one(
    src: Manifest,
    rec: PairRecord,
    new_id: str,
    out: Path,
    cfg: RunConfig,
    test_warp: bool,
) -> PairRecord:
    degrade = DegradeConfig.from_section(cfg.data)
    seed = cfg.train.seed
    hr = load_thermal(src.resolve(rec.gt_thermal_path))
    rgb = load_rgb(src.resolve(rec.rgb_ref_path))
    record_seed = derive_seed(seed, new_id)
    lr = degrade_thermal(hr, degrade, record_seed)
    ref = prepare_reference(rgb, degrade)
    gt = prepare_ground_truth(hr, degrade)
    warp = WarpParams()
    if test_warp and rec.split == "test":
        ranges = WarpRanges.from_section(cfg.eval.warp)
        warp = sample_warp(numpy_rng(seed, "test-warp", new_id), ranges)
        ref = apply_warp(ref, warp)
    provenance = _provenance(cfg)
    save_thermal(lr, out / "lr" / f"{new_id}.png", provenance)
    save_rgb(ref, out / "ref" / f"{new_id}.png", provenance)
    save_thermal(gt, out / "gt" / f"{new_id}.png", provenance)
    return PairRecord(
        id=new_id,
        lr_thermal_path=f"lr/{new_id}.png",
        rgb_ref_path=f"ref/{new_id}.png",
        gt_thermal_path=f"gt/{new_id}.png",
        warp=warp,
        split=rec.split,
        seed=record_seed,
    )


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = Path(args.out)
    specs = [SourceSpec.parse(s) for s in args.src_manifest]
    jobs: list[tuple[Manifest, PairRecord, str]] = []
    for spec in specs:
        src = load_manifest(spec.path)
        for rec in select_records(src, spec, cfg.train.seed):
            new_id = f"{spec.name}-{rec.id}" if spec.name else rec.id
            jobs.append((src, rec, new_id))
    with ThreadPoolExecutor(max_workers=thread_count()) as executor:
        records = list(
            executor.map(
                lambda job: _prepare_one(job[0], job[1], job[2], out, cfg, args.test_warp), jobs
            )
        )
    manifest = build_manifest(records, out / MANIFEST_NAME)
    logger.info("Prepared %d pairs under %s", len(records), out)
    _emit(
        {
            "manifest": manifest.path,
            "count": len(records),
            "lr_size": cfg.data.lr_size,
            "ref_size": cfg.data.ref_size,
            **_provenance(cfg),
        }
    )
    return 0


# --- training commands ---------------------------------------------------------


def cmd_pretrain_codec(args: argparse.Namespace) -> int:
    cfg = _config(args)
    run = RunDir.create(args.out, cfg)
    setup(log_file=run.logs / "run.log")
    apply_threads()
    ckpt = run.checkpoints / "codec.3mti"
    _, losses = pretrain_codec(
        load_manifest(args.manifest),
        cfg,
        out_path=ckpt,
        loss_log=run.logs / "codec_loss.jsonl",
        quiet=args.quiet,
    )
    _emit({"checkpoint": ckpt, "steps": len(losses), "final_l2": losses[-1] if losses else None})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = train(
        cfg, load_manifest(args.manifest), args.out, codec_ckpt=args.codec, quiet=args.quiet
    )
    final = result.losses[-1]["total"] if result.losses else None
    _emit({"checkpoint": result.checkpoint, "steps": len(result.losses), "final_total": final})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _checkpoint_config(args)
    report = evaluate(
        args.checkpoint,
        load_manifest(args.manifest),
        cfg=cfg,
        warp_test=args.warp_test,
        oracle=args.oracle,
        run_dir=args.out,
        split=args.split,
        seed=args.seed,
        quiet=args.quiet,
    )
    _emit({"condition": report.condition, "count": len(report.per_image), **report.aggregates})
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    if args.no_reference and args.reference:
        raise ConfigError("--no-reference conflicts with --reference")
    cfg = _checkpoint_config(args)
    run = RunDir.create(args.out, cfg)
    setup(log_file=run.logs / "run.log")
    model = load_model(args.checkpoint, cfg)
    lr = load_thermal(args.thermal)
    refs = [] if args.no_reference else [load_rgb(p) for p in args.reference]
    pred = infer(model, lr, refs)
    output = Path(args.output) if args.output else run.samples / f"{Path(args.thermal).stem}_sr.png"
    provenance = _provenance(cfg)
    save_thermal(pred, output, provenance)
    logger.info("Wrote %s from %d reference(s)", output, len(refs))
    _emit(
        {
            "output": output,
            "size": list(pred.shape[-2:]),
            "references": len(refs),
            **provenance,
        }
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    table = ablate(
        cfg,
        load_manifest(args.train_manifest),
        load_manifest(args.test_manifest),
        args.out,
        codec_ckpt=args.codec,
        quiet=args.quiet,
    )
    print(table.to_text(), end="")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="threemti", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default=None, help="Overrides THREEMTI_LOG_LEVEL")
    ap.add_argument("--quiet", action="store_true", help="No progress bars")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="Render synthetic RGB/thermal pairs")
    _add_config_args(p)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--size", type=_positive_int, default=None, help="Scene side (data.scene_size)")
    p.add_argument("--test-fraction", type=_fraction, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("prepare", help="Degrade HR pairs into an LR/reference/GT dataset")
    _add_config_args(p)
    p.add_argument(
        "--src-manifest",
        action="append",
        required=True,
        metavar="[NAME=]PATH[:COUNT]",
        help="Source manifest of HR pairs; repeat to mix sources",
    )
    p.add_argument("--test-warp", action="store_true", help="Warp test references and record it")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain-codec", help="Train the latent codec on reconstruction")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_codec)

    p = sub.add_parser("train", help="Train the super-resolution model")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--codec", default=None, help="Codec checkpoint (not needed in identity mode)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Score a checkpoint on a manifest split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument(
        "--warp-test",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Warp references (test seed namespace); defaults to eval.warp_test",
    )
    p.add_argument("--oracle", action="store_true", help="Score GT against itself")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="Super-resolve one thermal image")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--reference", action="append", default=[], help="RGB reference; repeatable")
    p.add_argument("--no-reference", action="store_true", help="Thermal-only (M=1) path")
    p.add_argument("--out", required=True, help="Run directory (config, logs, samples)")
    p.add_argument("--output", default=None, help="Output PNG (default: <out>/samples/)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="Train and compare the four ablation variants")
    _add_config_args(p)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--codec", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    setup(level=args.log_level)
    if args.command == "infer" and not args.no_reference and not args.reference:
        ap.error("infer needs --reference or --no-reference")
    try:
        return args.func(args)
    except (ThreemtiError, OSError) as e:
        print(f"threemti {args.command}: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
