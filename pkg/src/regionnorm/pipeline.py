"""Experiment orchestration: training, evaluation, and analysis runs.

Every run is a pure function of (config, seed): batch composition, mask
draws and weight initialization all derive from seeded generators keyed by
purpose and iteration, so identical configs reproduce identical artifacts
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import queue
import threading
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, validate_run_paths
from .data import ingest_dataset
from .errors import ConfigError, NumericError
from .inpaintnet import (
    Discriminator,
    Generator,
    LossBundle,
    build_architecture,
    composite,
    generator_from_checkpoint,
    save_checkpoint,
    train_step,
)
from .masks import MaskSpec, RegionMask, irregular_stroke_mask, load_mask, regular_square_mask, resize_mask, save_grayscale
from .metrics import evaluate_pair, mean_psnr
from .norm import RNL
from .optim import Adam
from .tensor import Tensor, no_grad, set_default_dtype

logger = logging.getLogger(__name__)

# purpose tags for seed derivation
_SEED_BATCH = 17
_SEED_TRAIN_MASK = 19
_SEED_EVAL_MASK = 23


def seeded_rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# Masks for the two protocols.


def _interval_for(cfg: ExperimentConfig, index: int) -> tuple:
    return cfg.mask_intervals[index % len(cfg.mask_intervals)]


def make_train_mask(cfg: ExperimentConfig, iteration: int, slot: int) -> np.ndarray:
    size = cfg.image_size
    if cfg.mask_mode == "regular":
        return regular_square_mask(size, size).bits
    if cfg.mask_mode == "irregular":
        rng = seeded_rng(cfg.seed, _SEED_TRAIN_MASK, iteration, slot)
        interval = _interval_for(cfg, int(rng.integers(0, len(cfg.mask_intervals))))
        spec = MaskSpec(kind="irregular", coverage_interval=interval, seed=cfg.seed)
        return irregular_stroke_mask(size, size, spec, rng).bits
    masks = _external_masks(cfg)
    return masks[(iteration * cfg.batch_size + slot) % len(masks)].bits


_external_cache: dict = {}


def _external_masks(cfg: ExperimentConfig) -> list:
    key = (cfg.mask_dir, cfg.image_size)
    if key not in _external_cache:
        root = Path(cfg.mask_dir)
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
        if not paths:
            raise ConfigError(f"no PNG masks in {root}")
        _external_cache[key] = [
            resize_mask(load_mask(p), cfg.image_size, cfg.image_size) for p in paths
        ]
    return _external_cache[key]


def make_eval_mask(cfg: ExperimentConfig, index: int) -> RegionMask:
    size = cfg.image_size
    if cfg.mask_mode == "regular":
        return regular_square_mask(size, size)
    if cfg.mask_mode == "irregular":
        rng = seeded_rng(cfg.seed, _SEED_EVAL_MASK, index)
        spec = MaskSpec(kind="irregular", coverage_interval=_interval_for(cfg, index), seed=cfg.seed)
        return irregular_stroke_mask(size, size, spec, rng)
    masks = _external_masks(cfg)
    return masks[index % len(masks)]


# ---------------------------------------------------------------------------
# Batch assembly with optional prefetch on a worker thread.


def _batches(cfg: ExperimentConfig, train_images: np.ndarray):
    count = len(train_images)
    for iteration in range(cfg.iterations):
        rng = seeded_rng(cfg.seed, _SEED_BATCH, iteration)
        idx = rng.integers(0, count, size=cfg.batch_size)
        images = Tensor(train_images[idx])
        masks = np.stack([make_train_mask(cfg, iteration, k) for k in range(cfg.batch_size)])
        yield iteration, images, masks[:, None, :, :]


def _prefetched(iterator, enabled: bool, capacity: int = 4):
    """Run ``iterator`` on a worker thread feeding a bounded, ordered queue.

    Order is preserved, so prefetching cannot perturb determinism; the
    items are fully constructed tensors ready for the training thread.
    """
    if not enabled:
        yield from iterator
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in iterator:
                if not put(item):
                    return
            put(done)
        except BaseException as exc:  # hand the failure to the consumer
            put(exc)

    thread = threading.Thread(target=worker, daemon=True, name="batch-prefetch")
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        thread.join()


# ---------------------------------------------------------------------------
# Evaluation.

_METRICS_HEADER = ("image", "mask_ratio", "psnr", "ssim", "l1")


def _to_255(chw: np.ndarray) -> np.ndarray:
    return np.transpose(chw, (1, 2, 0)).astype(np.float64) * 255.0


def _rnl_coverage(gen: Generator) -> float:
    fractions = [
        float(m.last_mask.mean())
        for _, m in gen.modules()
        if isinstance(m, RNL) and m.last_mask is not None
    ]
    return float(np.mean(fractions)) if fractions else float("nan")


def evaluate_generator(gen: Generator, eval_items: list, cfg: ExperimentConfig) -> dict:
    """Inpaint each held-out image under its deterministic mask and score it.

    Returns rows plus aggregate means (PSNR-capped rows excluded from the
    PSNR mean, count reported).
    """
    gen.eval()
    rows = []
    coverages = []
    with no_grad():
        for index, item in enumerate(eval_items):
            mask = make_eval_mask(cfg, index)
            m = mask.bits[None, None].astype(item.image.dtype)
            image = Tensor(item.image[None])
            completed = gen(image * m, m)
            comp = composite(completed, image, m)
            report = evaluate_pair(_to_255(comp.data[0]), _to_255(item.image))
            coverages.append(_rnl_coverage(gen))
            rows.append(
                {
                    "image": item.path.name,
                    "mask_ratio": mask.coverage_ratio,
                    "psnr": report.psnr_db,
                    "ssim": report.ssim,
                    "l1": report.l1_percent,
                }
            )
    gen.train()
    psnr_mean, excluded = mean_psnr([r["psnr"] for r in rows])
    return {
        "rows": rows,
        "mean_psnr": psnr_mean,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "mean_l1": float(np.mean([r["l1"] for r in rows])),
        "excluded_capped": excluded,
        "rnl_mask_coverage": float(np.nanmean(coverages)) if coverages else float("nan"),
    }


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_METRICS_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r["image"],
                    f"{r['mask_ratio']:.6f}",
                    f"{r['psnr']:.4f}",
                    f"{r['ssim']:.6f}",
                    f"{r['l1']:.6f}",
                ]
            )


def _split_items(items: list, eval_count: int) -> tuple:
    if len(items) > eval_count:
        return items[:-eval_count], items[-eval_count:]
    return items, items[: min(eval_count, len(items))]


def eval_set_hash(eval_items: list, cfg: ExperimentConfig) -> str:
    """Digest of the exact image/mask pairs an evaluation will use."""
    h = hashlib.sha256()
    for index, item in enumerate(eval_items):
        h.update(item.path.name.encode())
        h.update(item.image.tobytes())
        h.update(make_eval_mask(cfg, index).bits.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training.


def _dump_diagnostics(gen: Generator, item, cfg: ExperimentConfig, out_dir: Path) -> None:
    """PNG dumps of RN-L responses/masks and the hole-mask pyramid."""
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = make_eval_mask(cfg, 0)
    m = mask.bits[None, None].astype(item.image.dtype)
    with no_grad():
        gen.eval()
        gen(Tensor(item.image[None]) * m, m)
        gen.train()
    for factor in (1, 2, 4):
        save_grayscale(mask.bits[::factor, ::factor], out_dir / f"input_mask_f{factor}.png")
    for name, diag in gen.rnl_diagnostics().items():
        save_grayscale(diag["response"][0, 0], out_dir / f"{name}.response.png")
        save_grayscale(diag["mask"][0, 0], out_dir / f"{name}.mask.png")


def build_generator(cfg: ExperimentConfig) -> Generator:
    config = build_architecture(
        cfg.architecture,
        base_channels=cfg.base_channels,
        image_size=cfg.image_size,
        resblock_count=cfg.resblock_count,
        rnl_threshold=cfg.rnl_threshold,
        rnl_soft_train=cfg.rnl_soft_train,
    )
    return Generator(config, seed=cfg.seed)


def run_training(cfg: ExperimentConfig) -> dict:
    """Full training run; writes checkpoint, metrics, curve and dumps."""
    set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)
    validate_run_paths(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    items = ingest_dataset(cfg.dataset_dir, cfg.image_size)
    train_items, eval_items = _split_items(items, cfg.eval_count)
    train_images = np.stack([it.image for it in train_items])

    gen = build_generator(cfg)
    losses = LossBundle(l1_weight=cfg.l1_weight, adv_weight=cfg.adv_weight, adv_kind=cfg.adv_kind)
    opt_g = Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    disc = opt_d = None
    if cfg.adv_weight > 0:
        disc = Discriminator(seed=cfg.seed + 1)
        opt_d = Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))

    probe = eval_items[0]
    probe_mask = make_eval_mask(cfg, 0)
    curve_rows = []
    logger.info("training %s for %d iterations", cfg.architecture, cfg.iterations)
    for iteration, images, masks in _prefetched(_batches(cfg, train_images), cfg.prefetch):
        try:
            logs = train_step(gen, disc, images, masks, losses, opt_g, opt_d)
            if iteration % cfg.log_every == 0 or iteration == cfg.iterations - 1:
                probe_psnr = _probe_psnr(gen, probe, probe_mask)
                curve_rows.append((iteration, logs["loss_g"], logs["loss_d"], logs["l1"], probe_psnr))
                logger.info(
                    "iter %d loss_g %.5f l1 %.5f probe_psnr %.2f",
                    iteration,
                    logs["loss_g"],
                    logs["l1"],
                    probe_psnr,
                )
        except NumericError as exc:
            raise NumericError(f"iteration {iteration}: {exc}") from exc

    with open(out_dir / "training_curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("iteration", "loss_g", "loss_d", "l1", "probe_psnr"))
        for row in curve_rows:
            writer.writerow(
                [row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}", f"{row[4]:.4f}"]
            )

    summary = evaluate_generator(gen, eval_items, cfg)
    write_metrics_csv(out_dir / "metrics.csv", summary["rows"])
    save_checkpoint(
        out_dir / "model.ckpt",
        gen,
        disc,
        extra={"architecture": cfg.architecture, "seed": cfg.seed, "iterations": cfg.iterations},
    )
    _dump_diagnostics(gen, eval_items[0], cfg, out_dir / "dumps")
    (out_dir / "config_echo.txt").write_text(cfg.to_text())
    summary.pop("rows")
    summary["checkpoint"] = str(out_dir / "model.ckpt")
    summary["eval_set_hash"] = eval_set_hash(eval_items, cfg)
    logger.info("done: mean PSNR %.3f dB over %d eval images", summary["mean_psnr"], len(eval_items))
    return summary


def _probe_psnr(gen: Generator, item, mask: RegionMask) -> float:
    m = mask.bits[None, None].astype(item.image.dtype)
    with no_grad():
        gen.eval()
        completed = gen(Tensor(item.image[None]) * m, m)
        comp = composite(completed, Tensor(item.image[None]), m)
        gen.train()
    return evaluate_pair(_to_255(comp.data[0]), _to_255(item.image)).psnr_db


# ---------------------------------------------------------------------------
# Checkpoint evaluation (plain and threshold sweep).


def evaluate_checkpoint(
    checkpoint,
    dataset_dir,
    output_dir,
    mask_mode: str = "irregular",
    mask_intervals=None,
    mask_dir: str = "",
    count: int = 100,
    seed: int = 0,
    thresholds=None,
    dump_dir=None,
) -> dict:
    """Score a stored generator on a dataset; never mutates the checkpoint.

    With ``thresholds`` given, the evaluation is repeated once per region
    threshold and a sweep CSV is emitted alongside the per-image metrics of
    the last threshold.
    """
    gen, header = generator_from_checkpoint(checkpoint)
    cfg = ExperimentConfig(
        dataset_dir=str(dataset_dir),
        output_dir=str(output_dir),
        mask_mode=mask_mode,
        mask_intervals=mask_intervals or [(0.0, 0.6)],
        mask_dir=mask_dir,
        image_size=gen.config.image_size,
        base_channels=gen.config.base_channels,
        resblock_count=gen.config.resblock_count,
        architecture=header.get("extra", {}).get("architecture", "arch5"),
        eval_count=count,
        seed=seed,
    )
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = ingest_dataset(dataset_dir, cfg.image_size)[:count]

    if thresholds is None:
        summary = evaluate_generator(gen, items, cfg)
        write_metrics_csv(out_dir / "metrics.csv", summary["rows"])
        if dump_dir is not None:
            _dump_diagnostics(gen, items[0], cfg, Path(dump_dir))
        summary.pop("rows")
        return summary

    sweep_rows = []
    last = None
    for t in thresholds:
        gen.set_rnl_threshold(float(t))
        summary = evaluate_generator(gen, items, cfg)
        sweep_rows.append(
            (
                float(t),
                summary["mean_psnr"],
                summary["mean_ssim"],
                summary["mean_l1"],
                summary["rnl_mask_coverage"],
            )
        )
        last = summary
    with open(out_dir / "threshold_sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("threshold", "psnr", "ssim", "l1", "rnl_mask_coverage"))
        for row in sweep_rows:
            writer.writerow(
                [
                    f"{row[0]:.2f}",
                    f"{row[1]:.4f}",
                    f"{row[2]:.6f}",
                    f"{row[3]:.6f}",
                    f"{row[4]:.6f}",
                ]
            )
    write_metrics_csv(out_dir / "metrics.csv", last["rows"])
    last.pop("rows")
    last["sweep"] = sweep_rows
    return last


# ---------------------------------------------------------------------------
# Shift analysis over a dataset (motivation experiment).


def run_shift_analysis(dataset_dir, intervals, output_csv, size: int = 64, fill_value: float = 255.0, seed: int = 0) -> list:
    """Mean/variance shift of every image's luma under each hole interval."""
    from .metrics import to_luma
    from .norm import shift_report

    items = ingest_dataset(dataset_dir, size)
    rows = []
    for index, item in enumerate(items):
        luma = to_luma(np.transpose(item.image, (1, 2, 0)).astype(np.float64) * 255.0)
        for lo, hi in intervals:
            if hi <= 0.0 + 1e-12 or (lo, hi) == (0.0, 0.0):
                mask = RegionMask.from_bits(np.ones((size, size), dtype=np.uint8))
            else:
                rng = seeded_rng(seed, 29, index, int(lo * 1000), int(hi * 1000))
                mask = irregular_stroke_mask(
                    size, size, MaskSpec(kind="irregular", coverage_interval=(lo, hi), seed=seed), rng
                )
            report = shift_report(luma, mask, fill_value=fill_value)
            rows.append((item.path.name, lo, hi, mask.coverage_ratio, report))
    path = Path(output_csv)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            (
                "image",
                "interval_lo",
                "interval_hi",
                "mask_ratio",
                "mu1",
                "sigma1",
                "mu_3u",
                "sigma_3u",
                "mu2_analytic",
                "sigma2_analytic",
                "mu2_empirical",
                "sigma2_empirical",
                "mean_shift",
                "degenerate",
            )
        )
        for name, lo, hi, ratio, r in rows:
            writer.writerow(
                [
                    name,
                    f"{lo:g}",
                    f"{hi:g}",
                    f"{ratio:.6f}",
                    f"{r.mu1:.6f}",
                    f"{r.sigma1:.6f}",
                    f"{r.mu_3u:.6f}",
                    f"{r.sigma_3u:.6f}",
                    f"{r.mu2_analytic:.6f}",
                    f"{r.sigma2_analytic:.6f}",
                    f"{r.mu2_empirical:.6f}",
                    f"{r.sigma2_empirical:.6f}",
                    f"{r.mean_shift:.6f}",
                    int(r.degenerate),
                ]
            )
    return rows


# ---------------------------------------------------------------------------
# Table-style architecture comparison.

TABLE4_ARCHS = ("baseline", "arch1", "arch2", "arch3", "arch4", "arch5", "arch6")


def run_table4(cfg: ExperimentConfig) -> list:
    """Train every plugging-location row under one seed and shared eval."""
    validate_run_paths(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    shared_hash = None
    for arch in TABLE4_ARCHS:
        sub = replace(cfg, architecture=arch, output_dir=str(out_dir / arch))
        summary = run_training(sub)
        if shared_hash is None:
            shared_hash = summary["eval_set_hash"]
        elif shared_hash != summary["eval_set_hash"]:
            raise ConfigError("table4 rows evaluated on differing image/mask sets")
        rows.append((arch, summary["mean_psnr"], summary["mean_ssim"], summary["mean_l1"]))
        logger.info("table4 %s: psnr %.3f", arch, summary["mean_psnr"])
    with open(out_dir / "table4.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("architecture", "psnr", "ssim", "l1"))
        for arch, p, s, l in rows:
            writer.writerow([arch, f"{p:.4f}", f"{s:.6f}", f"{l:.6f}"])
    (out_dir / "table4_meta.json").write_text(
        json.dumps({"eval_set_hash": shared_hash, "seed": cfg.seed, "iterations": cfg.iterations}, indent=2)
        + "\n"
    )
    logger.info("table4 eval set hash: %s", shared_hash)
    return rows


# ---------------------------------------------------------------------------
# Single-image inference.


def infer_single(checkpoint, image_path, mask_path, output_path, dump_dir=None) -> dict:
    """Inpaint one image under one mask; writes the composited result."""
    from .data import load_image01, save_image01

    gen, _ = generator_from_checkpoint(checkpoint)
    size = gen.config.image_size
    image = load_image01(image_path, size=size)
    mask = resize_mask(load_mask(mask_path), size, size)
    m = mask.bits[None, None].astype(image.dtype)
    with no_grad():
        gen.eval()
        completed = gen(Tensor(image[None]) * m, m)
        comp = composite(completed, Tensor(image[None]), m)
    save_image01(comp.data[0], output_path)
    if dump_dir is not None:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        for factor in (1, 2, 4):
            save_grayscale(mask.bits[::factor, ::factor], dump / f"input_mask_f{factor}.png")
        for name, diag in gen.rnl_diagnostics().items():
            save_grayscale(diag["response"][0, 0], dump / f"{name}.response.png")
            save_grayscale(diag["mask"][0, 0], dump / f"{name}.mask.png")
    return {"output": str(output_path), "mask_ratio": mask.coverage_ratio}
