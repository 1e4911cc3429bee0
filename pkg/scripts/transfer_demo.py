"""Synthetic pretraining followed by masked fine-tuning, end to end.

Pretrains on the training plants of a synthetic dataset (tag S), trains a
baseline on one held-out plant standing in for a real scan (tag I), fine-tunes
the S checkpoint on that same plant (tag S+I), and scores all three on a
second held-out plant.  Writes the matrix directory and prints the
comparison table with its Gain rows.

    python3 scripts/transfer_demo.py --out runs/transfer --epochs 5
"""
from __future__ import annotations

from pathlib import Path

import click

from rosepoint.harness import ExperimentSpec, run_matrix
from rosepoint.networks import default_spec

from desk_trend import prepare


@click.command()
@click.option("--out", default="runs/transfer", type=click.Path(file_okay=False))
@click.option("--arch", default="PointNetPP", show_default=True)
@click.option("--plants", default=12, show_default=True)
@click.option("--density", default=8.0, show_default=True, help="points per square cm")
@click.option("--epochs", default=5, show_default=True)
@click.option("--seed", default=2024, show_default=True, help="dataset seed")
def main(out, arch, plants, density, epochs, seed):
    out = Path(out)
    manifest = prepare(out, plants, density, seed)
    train_paths, held = manifest.paths("train"), manifest.paths("validation")
    if len(held) < 2:
        raise click.UsageError("need at least two validation plants; raise --plants")
    real, test = str(held[0]), str(held[1])
    exps = [ExperimentSpec("S", [str(p) for p in train_paths], epochs=epochs),
            ExperimentSpec("I", [real], epochs=epochs),
            ExperimentSpec("S+I", [real], epochs=epochs, pretrain_checkpoint="{out}/S/{arch}.rpt")]
    table = run_matrix([default_spec(arch, "desk")], exps, out / "matrix", [test], base="I", transfer="S+I")
    for row in table:
        click.echo(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


if __name__ == "__main__":
    main()
