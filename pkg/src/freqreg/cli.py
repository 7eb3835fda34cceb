"""Command-line interface: train, evaluate, matrix, figure, dataset inspect."""

from __future__ import annotations

from pathlib import Path

import click

from freqreg.config import PRESETS, load_config
from freqreg.data import VolumePairDataset, find_volume_pairs, split_patients
from freqreg.trainer import (
    evaluate as evaluate_checkpoint,
    load_checkpoint,
    run_experiment_matrix,
    train as run_training,
)


@click.group()
def main():
    """Frequency-regularized, registration-corrected image translation."""


_preset_option = click.option(
    "--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Scale preset override."
)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None, help="Master seed override.")
@_preset_option
@click.option("--mode", default=None, help="Training mode token, e.g. gan+n+r+f_low.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Run directory.")
def train(config_path, seed, preset, mode, out_dir):
    """Train one experiment and report the best validation PSNR."""
    config = load_config(config_path, preset=preset, seed=seed, mode=mode)
    if out_dir is None:
        out_dir = Path("runs") / f"{config.mode.token().replace('+', '_')}_seed{config.seed}"
    click.echo(f"mode {config.mode.label()} | seed {config.seed} | out {out_dir}")
    result = run_training(config, out_dir=out_dir)
    for entry in result.log:
        if entry["type"] == "val":
            click.echo(f"iter {entry['iteration']:>7}  val PSNR {entry['psnr']:.2f} dB")
    click.echo(f"best val PSNR: {result.best_val_psnr:.2f} dB")
    click.echo(f"final checkpoint: {result.final_checkpoint}")
    click.echo(f"best checkpoint:  {result.best_checkpoint}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Report file (JSONL).")
def evaluate(checkpoint_path, split, out_path):
    """Evaluate a checkpoint on a dataset split with PSNR/SSIM/MS-SSIM."""
    report = evaluate_checkpoint(checkpoint_path, split=split)
    if out_path is None:
        out_path = Path(checkpoint_path).with_name(f"metrics_{split}.jsonl")
    report.save(out_path)
    click.echo(report.format_table())
    click.echo(f"report written to {out_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--modes", required=True, help="Comma-separated mode tokens, e.g. gan+n,gan+n+r.")
@click.option("--seed", type=int, default=None)
@_preset_option
@click.option("--jobs", type=int, default=1, help="Parallel worker processes.")
@click.option("--out", "out_dir", type=click.Path(), default="runs/matrix")
def matrix(config_path, modes, seed, preset, jobs, out_dir):
    """Train and evaluate a list of modes under identical seed and data."""
    config = load_config(config_path, preset=preset, seed=seed)
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    result = run_experiment_matrix(config, mode_list, out_dir=out_dir, jobs=jobs)
    click.echo(result.format_grid())
    for cell in result.cells:
        if cell.status != "ok":
            click.echo(f"FAILED {cell.mode}: {cell.error}")
    click.echo(f"matrix written to {out_dir}")


@main.command()
@click.option("--checkpoint", "checkpoint_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--pairs", "n_pairs", type=int, default=3, help="Number of sample rows.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
def figure(checkpoint_paths, out_path, n_pairs, split):
    """Render input/ground-truth/prediction/residual grids for checkpoints."""
    from freqreg.trainer import build_datasets
    from freqreg.viz import emit_residual_figure

    first = load_checkpoint(checkpoint_paths[0])
    datasets = build_datasets(first.config)
    dataset = datasets[split]
    pairs = [dataset[i] for i in range(min(n_pairs, len(dataset)))]
    layout = emit_residual_figure(list(checkpoint_paths), pairs, out_path)
    click.echo(
        f"wrote {layout.path} ({layout.rows} rows x {layout.cols} cols, "
        f"{layout.width_px}x{layout.height_px} px)"
    )


@main.group()
def dataset():
    """Dataset utilities."""


@dataset.command()
@click.option("--root", type=click.Path(exists=True), required=True)
@click.option("--source", default="t1", help="Source modality tag in filenames.")
@click.option("--target", default="t2", help="Target modality tag in filenames.")
@click.option("--seed", type=int, default=0)
@click.option("--counts", default=None, help="Exact split sizes, e.g. 1000,51,200.")
@click.option("--fractions", default="0.8,0.04,0.16")
@click.option("--blank-threshold", type=float, default=0.0)
def inspect(root, source, target, seed, counts, fractions, blank_threshold):
    """Report volume and slice counts per train/val/test split."""
    pairs = find_volume_pairs(root, source, target)
    if not pairs:
        raise click.ClickException(f"no {source}/{target} volume pairs found under {root}")
    split_counts = tuple(int(v) for v in counts.split(",")) if counts else None
    frac = tuple(float(v) for v in fractions.split(","))
    splits = split_patients(
        [p.patient for p in pairs], seed=seed, counts=split_counts, fractions=frac
    )
    by_patient = {p.patient: p for p in pairs}
    click.echo(f"{len(pairs)} volume pairs under {root}")
    total = 0
    for name in ("train", "val", "test"):
        members = splits[name]
        ds = VolumePairDataset([by_patient[pid] for pid in members], blank_threshold)
        click.echo(f"{name:>5}: {len(members):>5} volumes, {len(ds):>7} slice pairs")
        total += len(ds)
    click.echo(f"total: {total} slice pairs")


if __name__ == "__main__":
    main()
