"""Command-line interface for the experiment harness.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
divergence.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from .config import ExperimentConfig, load_config
from .errors import ConfigError, GenerationError, NumericError, RegionNormError, ShapeError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="key=value config file")
@click.option("--paper-scale", is_flag=True, help="Use the full-scale network (256px, 64 channels, 8 blocks).")
def train(config_path, paper_scale):
    """Train a generator and write checkpoint/metrics/curve artifacts."""
    from .pipeline import run_training

    cfg = load_config(config_path)
    if paper_scale:
        cfg = replace(cfg, image_size=256, base_channels=64, resblock_count=8)
    summary = run_training(cfg)
    click.echo(
        f"trained {cfg.architecture}: mean PSNR {summary['mean_psnr']:.3f} dB "
        f"(capped rows excluded: {summary['excluded_capped']}), "
        f"SSIM {summary['mean_ssim']:.4f}, l1 {summary['mean_l1']:.3f}%"
    )
    click.echo(f"checkpoint: {summary['checkpoint']}")
    click.echo(f"eval set hash: {summary['eval_set_hash']}")


def _parse_interval_option(text: str) -> list:
    from .config import _parse_intervals

    return _parse_intervals(text)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--output", "output_dir", required=True, type=click.Path())
@click.option("--mask-mode", default="irregular", type=click.Choice(["regular", "irregular", "external_dir"]))
@click.option("--mask-interval", "intervals", default="0.0-0.6", help="lo-hi[,lo-hi...]")
@click.option("--mask-dir", default="")
@click.option("--count", default=100, type=int, help="Number of images to evaluate.")
@click.option("--seed", default=0, type=int)
@click.option("--thresholds", default=None, help="Comma-separated region thresholds to sweep.")
@click.option("--dump-dir", default=None, type=click.Path())
def eval_cmd(checkpoint, dataset_dir, output_dir, mask_mode, intervals, mask_dir, count, seed, thresholds, dump_dir):
    """Evaluate a checkpoint; emits metrics.csv (and a threshold sweep)."""
    from .pipeline import evaluate_checkpoint

    sweep = None
    if thresholds:
        try:
            sweep = [float(t) for t in thresholds.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad threshold list {thresholds!r}: {exc}") from exc
    summary = evaluate_checkpoint(
        checkpoint,
        dataset_dir,
        output_dir,
        mask_mode=mask_mode,
        mask_intervals=_parse_interval_option(intervals),
        mask_dir=mask_dir,
        count=count,
        seed=seed,
        thresholds=sweep,
        dump_dir=dump_dir,
    )
    click.echo(
        f"eval: mean PSNR {summary['mean_psnr']:.3f} dB (capped rows excluded: "
        f"{summary['excluded_capped']}), SSIM {summary['mean_ssim']:.4f}, l1 {summary['mean_l1']:.3f}%"
    )
    if sweep:
        click.echo(f"threshold sweep written with {len(summary['sweep'])} rows")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--dump-dir", default=None, type=click.Path())
def infer(checkpoint, image_path, mask_path, output_path, dump_dir):
    """Inpaint a single image under a PNG mask."""
    from .pipeline import infer_single

    result = infer_single(checkpoint, image_path, mask_path, output_path, dump_dir=dump_dir)
    click.echo(f"wrote {result['output']} (mask ratio {result['mask_ratio']:.4f})")


def _parse_shift_intervals(text: str) -> list:
    intervals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split("-")
        if len(pieces) != 2:
            raise ConfigError(f"bad interval {part!r}; expected lo-hi")
        lo, hi = float(pieces[0]), float(pieces[1])
        if lo == hi == 0.0:  # zero-area masks are allowed here
            intervals.append((0.0, 0.0))
            continue
        if not (0.0 <= lo < hi <= 0.6):
            raise ConfigError(f"interval {part!r} must satisfy 0 <= lo < hi <= 0.6")
        intervals.append((lo, hi))
    if not intervals:
        raise ConfigError("empty interval list")
    return intervals


@cli.command("shift-analyze")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--intervals", default="0.1-0.2,0.2-0.3,0.3-0.4,0.4-0.5,0.5-0.6")
@click.option("--output", "output_csv", required=True, type=click.Path())
@click.option("--size", default=64, type=int)
@click.option("--fill", default=255.0, type=float, help="Constant assigned to hole pixels.")
@click.option("--seed", default=0, type=int)
def shift_analyze(dataset_dir, intervals, output_csv, size, fill, seed):
    """Mean/variance shift analysis of full-spatial statistics under holes."""
    from .pipeline import run_shift_analysis

    rows = run_shift_analysis(
        dataset_dir, _parse_shift_intervals(intervals), output_csv, size=size, fill_value=fill, seed=seed
    )
    click.echo(f"wrote {len(rows)} shift rows to {output_csv}")


@cli.command("mask-gen")
@click.option("--kind", default="irregular", type=click.Choice(["regular", "irregular"]))
@click.option("--count", default=10, type=int)
@click.option("--interval", default="0.1-0.4")
@click.option("--size", default=64, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--output", "output_dir", required=True, type=click.Path())
def mask_gen(kind, count, interval, size, seed, output_dir):
    """Generate hole masks as PNG files."""
    from .masks import MaskSpec, irregular_stroke_mask, regular_square_mask, save_mask
    from .pipeline import seeded_rng

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = _parse_interval_option(interval)[0]
    ratios = []
    for i in range(count):
        if kind == "regular":
            mask = regular_square_mask(size, size)
        else:
            spec = MaskSpec(kind="irregular", coverage_interval=(lo, hi), seed=seed)
            mask = irregular_stroke_mask(size, size, spec, seeded_rng(seed, 31, i))
        save_mask(mask, out / f"mask_{i:05d}.png")
        ratios.append(mask.coverage_ratio)
    click.echo(f"wrote {count} masks, mean coverage {sum(ratios) / len(ratios):.4f}")


@cli.command("synth-data")
@click.option("--spec", "spec_text", default=None, help="count=N,size=N[,generator=...][,seed=N]")
@click.option("--count", default=100, type=int)
@click.option("--size", default=64, type=int)
@click.option("--generator", default="mixed", type=click.Choice(["mixed", "gradient-fields", "gaussian-blobs", "stripe-textures"]))
@click.option("--seed", default=0, type=int)
@click.option("--output", "output_dir", required=True, type=click.Path())
def synth_data(spec_text, count, size, generator, seed, output_dir):
    """Generate a deterministic synthetic image dataset."""
    from .data import SyntheticDatasetSpec, generate_synthetic_dataset

    values = {"count": count, "size": size, "generator": generator, "seed": seed}
    if spec_text:
        for part in spec_text.split(","):
            key, _, raw = part.strip().partition("=")
            if key not in values or not raw:
                raise ConfigError(f"bad spec entry {part!r}")
            values[key] = raw if key == "generator" else int(raw)
    spec = SyntheticDatasetSpec(**values)
    paths = generate_synthetic_dataset(spec, output_dir)
    click.echo(f"wrote {len(paths)} images to {output_dir}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def table4(config_path):
    """Train and score every plugging-location architecture row."""
    from .pipeline import run_table4

    cfg = load_config(config_path)
    rows = run_table4(cfg)
    for arch, p, s, l in rows:
        click.echo(f"{arch}: psnr {p:.3f} ssim {s:.4f} l1 {l:.3f}")


def main(argv=None) -> int:
    import numpy as np

    try:
        # non-finite values surface as NumericError, so numpy's own
        # overflow warnings are redundant noise on the way there
        with np.errstate(over="ignore", invalid="ignore"):
            cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.Abort:
        return EXIT_CONFIG
    except (ConfigError, ShapeError, GenerationError, ValueError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except NumericError as exc:
        click.echo(f"numeric divergence: {exc}", err=True)
        return EXIT_NUMERIC
    except (FileNotFoundError, NotADirectoryError, PermissionError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return EXIT_IO
    except RegionNormError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
