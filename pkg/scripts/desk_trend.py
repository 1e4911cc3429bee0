"""Desk-scale synthetic trend: PointNet++ versus PointNet on generated rosebushes.

Generates (or reuses) a small synthetic dataset, trains both architectures at
the desk preset for several seeds and compares validation accuracy on the
held-out plants.  Prints one line per run and a JSON summary.

    python3 scripts/desk_trend.py --out runs/trend --epochs 12
"""
from __future__ import annotations

import json
import logging
import statistics
import time
from pathlib import Path

import click

from rosepoint.harness import ExperimentSpec, evaluate, load_blocks, train
from rosepoint.networks import default_spec
from rosepoint.preprocess import BlockSpec
from rosepoint.synthgen import Manifest, PlantParams, generate_dataset


def prepare(out: Path, n_plants: int, density: float, seed: int) -> Manifest:
    manifest_path = out / "data" / "manifest.csv"
    if manifest_path.exists():
        m = Manifest.read(manifest_path)
        if len(m.files) == n_plants:
            return m
    return generate_dataset(n_plants, PlantParams(), seed, out / "data", density=density)


def run_trend(out, n_plants=12, density=8.0, epochs=12, seeds=(0, 1, 2), data_seed=2024,
              architectures=("PointNet", "PointNetPP"), echo=print) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = prepare(out, n_plants, density, data_seed)
    train_paths, val_paths = manifest.paths("train"), manifest.paths("validation")
    bspec = BlockSpec(n_points=512)
    blocks = load_blocks(train_paths, bspec, seed=data_seed)
    echo(f"{len(train_paths)} training plants -> {len(blocks)} blocks; {len(val_paths)} validation plants")
    results: dict = {a: [] for a in architectures}
    for seed in seeds:
        for arch in architectures:
            t0 = time.perf_counter()
            model = default_spec(arch, "desk")
            exp = ExperimentSpec("S", epochs=epochs, seed=seed)
            ck, rec = train(exp, model, blocks=blocks)
            ev = evaluate(ck, val_paths, bspec)
            results[arch].append(ev.macro.acc)
            echo(f"seed {seed} {arch:<11} val acc {ev.macro.acc:.4f} miou {ev.macro.miou:.4f} "
                 f"train acc {rec.train_acc[-1]:.4f} ({time.perf_counter() - t0:.0f} s)")
    summary = {a: {"accs": v, "median": statistics.median(v)} for a, v in results.items()}
    (out / "trend.json").write_text(json.dumps(summary, indent=1))
    return summary


@click.command()
@click.option("--out", default="runs/trend", type=click.Path(file_okay=False))
@click.option("--plants", default=12, show_default=True)
@click.option("--density", default=8.0, show_default=True, help="points per square cm")
@click.option("--epochs", default=12, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
def main(out, plants, density, epochs, seeds):
    logging.basicConfig(level=logging.WARNING)
    summary = run_trend(out, plants, density, epochs, tuple(int(s) for s in seeds.split(",")))
    pn, pp = summary["PointNet"]["median"], summary["PointNetPP"]["median"]
    click.echo(json.dumps(summary, indent=1))
    ok = pp >= 0.85 and pp - pn >= 0.05
    click.echo(f"median acc PointNet {pn:.4f} PointNet++ {pp:.4f} gap {100 * (pp - pn):.2f} pp -> "
               f"{'PASS' if ok else 'FAIL'}")


if __name__ == "__main__":
    main()
