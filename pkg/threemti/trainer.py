"""Training, evaluation, inference and the ablation driver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import torch
from torchvision.transforms.functional import to_pil_image
from torchvision.utils import make_grid
from tqdm import tqdm

from threemti.checkpoint import module_checksum
from threemti.codec import freeze_encoder
from threemti.config import RunConfig, build_config, save_config, short_hash, thread_count
from threemti.dataset import PairBatch, PairDataset
from threemti.errors import ConfigError, DivergedError, TrainingError
from threemti.imaging import png_info, upsample_thermal
from threemti.lora import inject, lora_sites
from threemti.logs import FORMAT_VERSION, JsonlWriter, setup
from threemti.losses import FeatureExtractor, LossConfig, PerceptualDistance, ThermalLoss
from threemti.manifest import Manifest
from threemti.metrics import CSV_HEADER, MetricsReport, paired_bootstrap, psnr, ssim
from threemti.model import ThermalSRModel, attach_codec, load_model, save_model
from threemti.seeding import numpy_rng, seed_everything, torch_generator
from threemti.warp import WarpRanges, sample_warp, warp_batch

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.3mti"


@dataclass(frozen=True)
class RunDir:
    """Output layout shared by every command."""

    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @classmethod
    def create(cls, root: str | Path, cfg: RunConfig | None = None) -> "RunDir":
        run = cls(Path(root))
        for d in (run.checkpoints, run.logs, run.reports, run.samples):
            d.mkdir(parents=True, exist_ok=True)
        if cfg is not None:
            save_config(cfg, run.config)
        return run


def apply_threads() -> int:
    n = thread_count()
    torch.set_num_threads(n)
    return n


# --- trainable parameters ----------------------------------------------------


def configure_trainable(model: ThermalSRModel, cfg: RunConfig) -> list[torch.nn.Parameter]:
    """Freeze the encoder, then open up either everything else or the LoRA set.

    In lora mode the UNet output merge and the prompt stay fully trainable:
    both start at values adapters cannot move on their own.
    """
    model.requires_grad_(False)
    if cfg.train.lora_mode == "full":
        model.unet.requires_grad_(True)
        model.prompt.requires_grad_(True)
        if model.codec.decoder is not None:
            model.codec.decoder.requires_grad_(True)
    else:
        alpha = cfg.lora.alpha
        inject(model.unet, cfg.lora.unet_targets, cfg.lora.unet_rank, alpha)
        if model.codec.decoder is not None:
            inject(model.codec, cfg.lora.decoder_targets, cfg.lora.decoder_rank, alpha)
        model.unet.zero_proj.requires_grad_(True)
        model.prompt.requires_grad_(True)
    freeze_encoder(model.codec)
    params = [p for p in model.parameters() if p.requires_grad]
    logger.info(
        "%s mode: %d trainable tensors, %d parameters",
        cfg.train.lora_mode,
        len(params),
        sum(p.numel() for p in params),
    )
    return params


def frozen_checksums(model: ThermalSRModel) -> dict[str, str]:
    """Checksums of the weights training must leave alone: encoder and LoRA bases."""
    sums = {f"{name}.base": module_checksum(a.base) for name, a in lora_sites(model).items()}
    if model.codec.encoder is not None:
        sums["codec.encoder"] = module_checksum(model.codec.encoder)
    return sums


# --- batching and augmentation ------------------------------------------------


def batch_order(n: int, batch_size: int, seed: int) -> Iterator[list[int]]:
    """Endless stream of batches over seeded per-epoch permutations."""
    epoch = 0
    pending: list[int] = []
    while True:
        while len(pending) < batch_size:
            g = torch_generator(seed, "data-order", epoch)
            pending.extend(torch.randperm(n, generator=g).tolist())
            epoch += 1
        yield pending[:batch_size]
        pending = pending[batch_size:]


def augment_references(
    batch: PairBatch, ranges: WarpRanges, seed: int, step: int
) -> torch.Tensor:
    warps = [sample_warp(numpy_rng(seed, "augment", step, rid), ranges) for rid in batch.ids]
    return warp_batch(batch.ref, warps)


def warp_test_references(batch: PairBatch, ranges: WarpRanges, seed: int) -> torch.Tensor:
    """Warp references for the misaligned test condition.

    Records that carry a stored warp were warped when the dataset was
    prepared; their references pass through unchanged.
    """
    ref = batch.ref.clone()
    todo = [i for i, w in enumerate(batch.warps) if w.is_identity]
    if todo:
        warps = [sample_warp(numpy_rng(seed, "test-warp", batch.ids[i]), ranges) for i in todo]
        ref[todo] = warp_batch(batch.ref[todo], warps)
    return ref


def write_sample_grid(
    path: Path,
    lr: torch.Tensor,
    ref: torch.Tensor,
    pred: torch.Tensor,
    gt: torch.Tensor,
    rows: int,
    provenance: Mapping[str, Any] | None = None,
) -> None:
    """PNG grid, one row per sample: LR input | reference | output | GT."""
    n = min(rows, lr.shape[0])
    size = tuple(gt.shape[-2:])
    cells: list[torch.Tensor] = []
    for i in range(n):
        cells.append(upsample_thermal(lr[i : i + 1], size)[0].expand(3, -1, -1))
        cells.append(ref[i])
        cells.append(pred[i].clamp(0.0, 1.0).expand(3, -1, -1))
        cells.append(gt[i].expand(3, -1, -1))
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = make_grid(torch.stack(cells).detach().cpu().float(), nrow=4, padding=2)
    to_pil_image(grid.clamp(0.0, 1.0)).save(path, format="PNG", pnginfo=png_info(provenance))


# --- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: ThermalSRModel
    checkpoint: Path
    losses: list[dict[str, float]] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)


def _check_finite(step: int, value: float) -> None:
    if not math.isfinite(value):
        raise DivergedError(step, value)


def train(
    cfg: RunConfig,
    manifest: Manifest,
    run_dir: str | Path,
    *,
    codec_ckpt: str | Path | None = None,
    extractor: FeatureExtractor | None = None,
    quiet: bool = False,
) -> TrainResult:
    """One-step training with the L2 + perceptual loss.

    Per step: draw a batch, warp references when augmenting, run the model
    with or without references and skips as configured, step Adam on the
    trainable set. The encoder and LoRA base weights never move.
    """
    run = RunDir.create(run_dir, cfg)
    setup(log_file=run.logs / "run.log")
    apply_threads()
    tc = cfg.train
    seed = tc.seed
    seed_everything(seed)
    device = torch.device(tc.device)

    model = ThermalSRModel(cfg)
    if not model.codec.is_identity:
        if codec_ckpt is None:
            raise ConfigError("conv_ae training needs a pretrained codec checkpoint")
        attach_codec(model, codec_ckpt)
    params = configure_trainable(model, cfg)
    model.to(device).train()
    frozen_sums = frozen_checksums(model)

    dataset = PairDataset(manifest, split="train")
    loss_fn = ThermalLoss(LossConfig.from_section(cfg.loss), extractor).to(device)
    opt = torch.optim.Adam(params, lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.eps)
    ranges = WarpRanges.from_section(cfg.data.warp)
    order = batch_order(len(dataset), min(tc.batch_size, len(dataset)), seed)
    ckpt_path = run.checkpoints / FINAL_CHECKPOINT

    losses: list[dict[str, float]] = []
    provenance = {"config_hash": short_hash(cfg), "seed": seed}
    logger.info("Training %d steps on %d pairs (run %s)", tc.iterations, len(dataset), run.root)
    with JsonlWriter(run.logs / "loss.jsonl", **provenance) as log:
        last: tuple[PairBatch, torch.Tensor, torch.Tensor] | None = None
        for step in tqdm(range(tc.iterations), desc="train", disable=quiet, leave=False):
            batch = dataset.batch(next(order)).to(device)
            refs: list[torch.Tensor] = []
            if tc.use_reference:
                ref = augment_references(batch, ranges, seed, step) if tc.augment else batch.ref
                refs = [ref]
            pred = model(batch.lr, refs, use_skips=tc.use_skip, out_size=tuple(batch.gt.shape[-2:]))
            terms = loss_fn(pred, batch.gt, check_range=False)
            values = terms.as_floats()
            _check_finite(step, values["total"])

            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()

            row = {"step": step, **values}
            log.write(row)
            losses.append(row)
            if tc.log_every and step % tc.log_every == 0:
                logger.info(
                    "step %d: total=%.6f l2=%.6f perceptual=%.6f",
                    step,
                    values["total"],
                    values["l2"],
                    values["perceptual"],
                )
            if tc.checkpoint_every and step and step % tc.checkpoint_every == 0:
                save_model(model, run.checkpoints / f"step_{step:06d}.3mti", seed=seed, step=step)
            last = (batch, refs[0] if refs else batch.ref, pred)

    changed = [k for k, v in frozen_checksums(model).items() if frozen_sums.get(k) != v]
    if changed:
        raise TrainingError(f"frozen weights changed during training: {changed}")

    model.eval()
    save_model(model, ckpt_path, seed=seed, step=tc.iterations)
    counters = model.reset_counters()
    with JsonlWriter(run.logs / "counters.jsonl", **provenance) as log:
        log.write({"phase": "train", **counters})
    if last is not None and cfg.eval.sample_grids:
        batch, ref, pred = last
        write_sample_grid(
            run.samples / "train_last.png",
            batch.lr,
            ref,
            pred,
            batch.gt,
            cfg.eval.sample_grids,
            provenance,
        )
    logger.info("Training finished; checkpoint %s", ckpt_path)
    return TrainResult(model=model, checkpoint=ckpt_path, losses=losses, counters=counters)


# --- evaluation and inference ----------------------------------------------


def _resolve_model(
    ckpt: str | Path | ThermalSRModel, cfg: RunConfig | None
) -> ThermalSRModel:
    if isinstance(ckpt, ThermalSRModel):
        return ckpt
    return load_model(ckpt, cfg)


@torch.no_grad()
def evaluate(
    ckpt: str | Path | ThermalSRModel,
    manifest: Manifest,
    *,
    cfg: RunConfig | None = None,
    warp_test: bool | WarpRanges | None = None,
    oracle: bool = False,
    run_dir: str | Path | None = None,
    split: str | None = "test",
    seed: int | None = None,
    extractor: FeatureExtractor | None = None,
    quiet: bool = False,
) -> MetricsReport:
    """Score every record of a split; optionally warp references first.

    `cfg` supplies the evaluation settings (loss, eval section, seed) and must
    match the checkpoint's architecture; the model keeps its own reference and
    skip switches. `warp_test=None` falls back to `eval.warp_test`.

    `oracle` feeds the ground truth in place of the prediction, which checks
    the metric wiring (PSNR inf, SSIM 1).
    """
    model = _resolve_model(ckpt, cfg)
    mcfg = model.cfg
    ecfg = cfg if cfg is not None else mcfg
    device = next(model.parameters(), torch.zeros(0)).device
    model.eval()
    seed = ecfg.train.seed if seed is None else seed
    if warp_test is None:
        warp_test = ecfg.eval.warp_test
    if isinstance(warp_test, WarpRanges):
        ranges: WarpRanges | None = warp_test
    elif warp_test:
        ranges = WarpRanges.from_section(ecfg.eval.warp)
    else:
        ranges = None

    dataset = PairDataset(manifest, split=split)
    prewarped = sum(not r.warp.is_identity for r in dataset.records)
    if prewarped:
        logger.info("%d references were warped at preparation", prewarped)
    perceptual = PerceptualDistance(LossConfig.from_section(ecfg.loss), extractor).to(device)
    report = MetricsReport(
        config_hash=short_hash(ecfg),
        seed=seed,
        condition="warped" if ranges or prewarped else "aligned",
    )
    provenance = {"config_hash": report.config_hash, "seed": seed}
    first: tuple[PairBatch, torch.Tensor, torch.Tensor] | None = None
    batches = dataset.iter_batches(ecfg.train.batch_size)
    for batch in tqdm(batches, desc="eval", disable=quiet, leave=False):
        batch = batch.to(device)
        ref = warp_test_references(batch, ranges, seed) if ranges else batch.ref
        if oracle:
            pred = batch.gt.clone()
        else:
            refs = [ref] if mcfg.train.use_reference else []
            pred = model(
                batch.lr, refs, use_skips=mcfg.train.use_skip, out_size=tuple(batch.gt.shape[-2:])
            ).clamp(0.0, 1.0)
        for i, rid in enumerate(batch.ids):
            p, g = pred[i : i + 1], batch.gt[i : i + 1]
            report.add(rid, psnr(p, g), ssim(p, g), float(perceptual(p, g)))
        if first is None:
            first = (batch, ref, pred)

    counters = model.reset_counters()
    if run_dir is not None:
        run = RunDir.create(run_dir)
        name = f"metrics_{report.condition}"
        report.save_json(run.reports / f"{name}.json")
        (run.reports / f"{name}.csv").write_text(CSV_HEADER + report.csv_row(), encoding="utf-8")
        with JsonlWriter(run.logs / f"counters_{report.condition}.jsonl", **provenance) as log:
            log.write({"phase": f"eval-{report.condition}", **counters})
        if first is not None and ecfg.eval.sample_grids:
            batch, ref, pred = first
            write_sample_grid(
                run.samples / f"eval_{report.condition}.png",
                batch.lr,
                ref,
                pred,
                batch.gt,
                ecfg.eval.sample_grids,
                provenance,
            )
    agg = report.aggregates
    logger.info(
        "Evaluated %d %s pairs: psnr=%.3f ssim=%.4f perceptual=%.4f",
        len(report.per_image),
        report.condition,
        agg["psnr_db"]["mean"],
        agg["ssim"]["mean"],
        agg["perceptual"]["mean"],
    )
    return report


@torch.no_grad()
def infer(
    ckpt: str | Path | ThermalSRModel,
    lr_thermal: torch.Tensor,
    rgb_refs: torch.Tensor | Sequence[torch.Tensor] | None = None,
    *,
    out_size: tuple[int, int] | None = None,
) -> torch.Tensor:
    """(1, h, w) LR thermal [+ (3, H, W) references] -> (1, H, W) in [0, 1]."""
    model = _resolve_model(ckpt, None)
    model.eval()
    device = next(model.parameters(), torch.zeros(0)).device
    if isinstance(rgb_refs, torch.Tensor):
        rgb_refs = [rgb_refs]
    refs = [r.unsqueeze(0).to(device) for r in (rgb_refs or [])]
    lr = lr_thermal.unsqueeze(0).to(device) if lr_thermal.dim() == 3 else lr_thermal.to(device)
    pred = model(lr, refs, use_skips=model.cfg.train.use_skip, out_size=out_size)
    return pred[0].clamp(0.0, 1.0).cpu()


# --- ablation ------------------------------------------------------------------

VARIANTS: tuple[tuple[str, str, dict[str, Any]], ...] = (
    ("w/o Reference", "no_reference", {"use_reference": False}),
    ("w/o Augmentation", "no_augment", {"augment": False}),
    ("w/o Skip", "no_skip", {"use_skip": False}),
    ("w/ All", "all", {}),
)
BASELINE = "w/ All"
CONDITIONS = ("aligned", "warped")


@dataclass
class AblationTable:
    rows: dict[str, dict[str, MetricsReport]] = field(default_factory=dict)
    comparisons: dict[str, dict[str, dict[str, Any]]] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def mean(self, variant: str, condition: str, key: str) -> float:
        return self.rows[variant][condition].aggregates[key]["mean"]

    def to_csv(self) -> str:
        lines = [
            "variant,condition,psnr_db,ssim,perceptual,config_hash,seed,format_version",
        ]
        for variant, reports in self.rows.items():
            for condition, rep in reports.items():
                agg = rep.aggregates
                lines.append(
                    f"{variant},{condition},{agg['psnr_db']['mean']:.6f},"
                    f"{agg['ssim']['mean']:.6f},{agg['perceptual']['mean']:.6f},"
                    f"{self.config_hash},{self.seed},{FORMAT_VERSION}"
                )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'variant':<18}" + "".join(
            f"{c + ' PSNR':>16}{c + ' SSIM':>16}{c + ' perc.':>16}" for c in CONDITIONS
        )
        lines = [head, "-" * len(head)]
        for variant, reports in self.rows.items():
            cells = "".join(
                f"{reports[c].aggregates['psnr_db']['mean']:>16.3f}"
                f"{reports[c].aggregates['ssim']['mean']:>16.4f}"
                f"{reports[c].aggregates['perceptual']['mean']:>16.4f}"
                for c in CONDITIONS
            )
            lines.append(f"{variant:<18}{cells}")
        lines.append("")
        lines.append(f"paired bootstrap vs {BASELINE} (mean diff, interval, excludes zero):")
        for variant, per_cond in self.comparisons.items():
            for key, res in per_cond.items():
                lines.append(
                    f"  {variant:<18}{key:<24}{res['mean_diff']:+.4f} "
                    f"[{res['low']:+.4f}, {res['high']:+.4f}] {res['excludes_zero']}"
                )
        lines.append(
            f"config_hash={self.config_hash} seed={self.seed} format_version={FORMAT_VERSION}"
        )
        return "\n".join(lines) + "\n"


def variant_config(base: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    data = base.to_dict()
    data["train"].update(overrides)
    return build_config(data)


def ablate(
    base_cfg: RunConfig,
    train_manifest: Manifest,
    test_manifest: Manifest,
    run_dir: str | Path,
    *,
    codec_ckpt: str | Path | None = None,
    extractor: FeatureExtractor | None = None,
    quiet: bool = False,
) -> AblationTable:
    """Train and score the four variants under shared seeds.

    Each variant is evaluated on the aligned and on the warped test set; every
    ablated variant is compared to "w/ All" with a paired bootstrap.
    """
    run = RunDir.create(run_dir, base_cfg)
    table = AblationTable(config_hash=short_hash(base_cfg), seed=base_cfg.train.seed)
    for label, slug, overrides in VARIANTS:
        cfg = variant_config(base_cfg, overrides)
        logger.info("Ablation variant %s", label)
        vdir = run.root / "variants" / slug
        result = train(
            cfg, train_manifest, vdir, codec_ckpt=codec_ckpt, extractor=extractor, quiet=quiet
        )
        table.rows[label] = {
            condition: evaluate(
                result.model,
                test_manifest,
                warp_test=condition == "warped",
                run_dir=vdir,
                extractor=extractor,
                quiet=quiet,
            )
            for condition in CONDITIONS
        }

    samples = base_cfg.eval.bootstrap_samples
    for label, _, _ in VARIANTS:
        if label == BASELINE:
            continue
        per_cond: dict[str, dict[str, Any]] = {}
        for condition in CONDITIONS:
            base_rep = table.rows[BASELINE][condition]
            other = table.rows[label][condition]
            for key in ("psnr_db", "perceptual"):
                res = paired_bootstrap(
                    base_rep.column(key),
                    other.column(key),
                    samples=samples,
                    seed=base_cfg.train.seed,
                )
                per_cond[f"{condition}/{key}"] = {
                    "mean_diff": res.mean_diff,
                    "low": res.low,
                    "high": res.high,
                    "excludes_zero": res.excludes_zero,
                }
        table.comparisons[label] = per_cond

    (run.reports / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    (run.reports / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
    logger.info("Ablation table written to %s", run.reports)
    return table
