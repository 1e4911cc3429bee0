"""Command line entry point.

Every option can also be set through the environment as
``ROSEPOINT_<COMMAND>_<OPTION>``, e.g. ``ROSEPOINT_TRAIN_EPOCHS=10``.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import click
import tomli

from .core import load_cloud
from .harness import (PRESET_EPOCHS, ExperimentSpec, RunRecord, Tag, TrainConfig, bar_chart, evaluate,
                      load_config, read_table, run_matrix, segment as segment_cloud, train as train_model)
from .networks import ALL_ARCHITECTURES, Checkpoint, ModelSpec, default_spec
from .preprocess import BlockSpec, blocks_for_offset, write_archive
from .synthgen import PlantParams, generate_dataset

ARCH_NAMES = [a.value for a in ALL_ARCHITECTURES]


@click.group(context_settings={"auto_envvar_prefix": "ROSEPOINT", "show_default": True})
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Synthetic rosebush generation and point-based organ segmentation."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(message)s")


@main.command()
@click.option("--n-plants", default=48)
@click.option("--seed", default=0)
@click.option("--density", default=120.0, help="points per square cm of surface")
@click.option("--params", "params_file", type=click.Path(exists=True, dir_okay=False),
              help="TOML file with a [plant] table overriding generator parameters")
@click.argument("out_dir", type=click.Path(file_okay=False))
def generate(n_plants, seed, density, params_file, out_dir):
    """Generate labelled synthetic plant clouds and a manifest."""
    params = PlantParams()
    if params_file:
        with open(params_file, "rb") as fh:
            over = tomli.load(fh).get("plant", {})
        params = replace(params, **{k: tuple(v) if isinstance(v, list) else v for k, v in over.items()})
    m = generate_dataset(n_plants, params, seed, out_dir, density=density)
    click.echo(f"wrote {len(m.files)} plants to {out_dir} "
               f"({len(m.paths('train'))} train, {len(m.paths('validation'))} validation)")


@main.command()
@click.option("--in", "cloud", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--edge", default=10.0)
@click.option("--n", "n_points", default=4096)
@click.option("--offsets", default="0,5", help="comma-separated offsets in cm")
@click.option("--seed", default=0)
@click.option("--keep-remainder", is_flag=True, help="keep undersized final chunks (inference coverage)")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="archive path; with several offsets each gets an _off<cm> suffix")
def preprocess(cloud, edge, n_points, offsets, seed, keep_remainder, out):
    """Cut a cloud into fixed-size blocks; one archive per offset."""
    offs = [float(o) for o in offsets.split(",") if o.strip()]
    if not offs:
        raise click.UsageError("at least one offset is needed")
    pc = load_cloud(cloud)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for off in offs:
        spec = BlockSpec(edge=edge, offset=off, n_points=n_points)
        blocks = blocks_for_offset(pc, spec, seed, keep_remainder)
        dest = out if len(offs) == 1 else out.with_name(f"{out.stem}_off{off:g}{out.suffix}")
        write_archive(dest, blocks, spec)
        click.echo(f"{dest}: {len(blocks)} blocks")


def _model_spec(model_file, arch, scale, n_points) -> ModelSpec:
    if model_file:
        return ModelSpec.load(model_file)
    return default_spec(arch, scale, n_points)


def _config(optimizer: dict, arch) -> TrainConfig:
    cfg = TrainConfig()
    return cfg.override(arch, **optimizer) if optimizer else cfg


def _run_training(exp, model, optimizer, out, block_n):
    bspec = BlockSpec(n_points=model.n_points) if block_n is None else BlockSpec(n_points=block_n)
    ck, rec = train_model(exp, model, _config(optimizer, model.architecture), block_spec=bspec)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ck.save(out)
    out.with_suffix(".json").write_text(rec.to_json())
    last = f"loss {rec.train_loss[-1]:.4f} acc {rec.train_acc[-1]:.4f}" if rec.train_loss else "no epochs"
    click.echo(f"{model.architecture.value} {exp.tag.value}: {last}; checkpoint {out}")


def _training_options(f):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="TOML with [experiment], [model], [optimizer] sections"),
        click.option("--arch", type=click.Choice(ARCH_NAMES), default="PointNetPP"),
        click.option("--scale", type=click.Choice(["full", "desk", "toy"]), default="desk"),
        click.option("--n-points", type=int, default=None),
        click.option("--model-file", type=click.Path(exists=True, dir_okay=False), help="ModelSpec TOML"),
        click.option("--epochs", type=int, default=None, help="overrides the config (default: 250 full, 50 desk/toy)"),
        click.option("--seed", type=int, default=None),
        click.option("--out", required=True, type=click.Path(dir_okay=False), help="checkpoint path"),
        click.argument("clouds", nargs=-1, type=click.Path(exists=True, dir_okay=False)),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _experiment(config_file, tag, clouds, epochs, seed, scale, **extra):
    exp_cfg, model_cfg, optimizer = (None, None, {})
    if config_file:
        exp_cfg, model_cfg, optimizer = load_config(config_file)
    base = exp_cfg.to_dict() if exp_cfg else {"tag": tag}
    if clouds:
        base["train_clouds"] = list(clouds)
    if epochs is not None:
        base["epochs"] = epochs
    base.setdefault("epochs", PRESET_EPOCHS.get(scale, 250))
    if seed is not None:
        base["seed"] = seed
    base.update({k: v for k, v in extra.items() if v is not None})
    if not base.get("train_clouds"):
        raise click.UsageError("no training clouds given")
    return ExperimentSpec(**base), model_cfg, optimizer


@main.command()
@_training_options
@click.option("--tag", type=click.Choice([t.value for t in Tag if not t.transfer]), default="S")
def train(config_file, arch, scale, n_points, model_file, epochs, seed, out, clouds, tag):
    """Train a model from scratch."""
    exp, model_cfg, optimizer = _experiment(config_file, tag, clouds, epochs, seed, scale)
    model = model_cfg or _model_spec(model_file, arch, scale, n_points)
    _run_training(exp, model, optimizer, out, None)


@main.command()
@_training_options
@click.option("--tag", type=click.Choice([t.value for t in Tag if t.transfer]), default="S+I")
@click.option("--pretrained", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", multiple=True, help="parameter-name patterns to update (default: head + last two layers)")
@click.option("--full", is_flag=True, help="update every parameter (empty mask)")
def finetune(config_file, arch, scale, n_points, model_file, epochs, seed, out, clouds, tag, pretrained, mask, full):
    """Fine-tune a pretrained checkpoint with a layer mask."""
    finetune_mask = [] if full else (list(mask) if mask else None)
    pre_scale = Checkpoint.load(pretrained).spec.scale
    exp, model_cfg, optimizer = _experiment(config_file, tag, clouds, epochs, seed, pre_scale,
                                            pretrain_checkpoint=pretrained, finetune_mask=finetune_mask)
    model = model_cfg or Checkpoint.load(pretrained).spec
    _run_training(exp, model, optimizer, out, None)


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV for the macro summary")
@click.argument("clouds", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def eval_cmd(model_path, seed, out, clouds):
    """Evaluate a checkpoint on labelled clouds (blocks at offsets 0 and 5, max-merged)."""
    ck = Checkpoint.load(model_path)
    ev = evaluate(ck, clouds, seed=seed)
    for name, rep in ev.per_cloud.items():
        click.echo(f"{name}: acc {rep.acc:.4f} miou {rep.miou:.4f}")
    click.echo(f"macro: acc {ev.macro.acc:.4f} miou {ev.macro.miou:.4f}")
    click.echo(ev.macro.to_csv(out), nl=False)


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0)
@click.argument("cloud", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
def segment(model_path, seed, cloud, out):
    """Label every point of a cloud; labelled input also yields <out>.metrics.csv."""
    rep = segment_cloud(Checkpoint.load(model_path), cloud, out, seed=seed)
    click.echo(f"wrote {out}" + (f"; acc {rep.acc:.4f} miou {rep.miou:.4f}" if rep else ""))


@main.command()
@click.option("--config", "config_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="TOML with [matrix] and [[experiments]] tables")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def matrix(config_file, out_dir):
    """Run every (architecture, experiment) cell and write the comparison table."""
    with open(config_file, "rb") as fh:
        d = tomli.load(fh)
    mx = d["matrix"]
    scale = mx.get("scale", "desk")
    models = [default_spec(a, scale) for a in mx["architectures"]]
    exps = [ExperimentSpec(**{"epochs": PRESET_EPOCHS.get(scale, 250), **e}) for e in d["experiments"]]
    optimizer = d.get("optimizer", {})
    config = TrainConfig()
    for m in models:
        if optimizer:
            config = config.override(m.architecture, **optimizer)
    table = run_matrix(models, exps, out_dir, mx["test_clouds"], config,
                       base=mx.get("base", "III"), transfer=mx.get("transfer", "S+III"))
    for row in table:
        click.echo(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


@main.command()
@click.option("--svg", type=click.Path(dir_okay=False), help="bar chart output")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def report(svg, inputs):
    """Summarise run records (JSON) or print a comparison CSV; optionally draw per-class IoU bars."""
    from .core import macro_average
    bars = {}
    for path in inputs:
        p = Path(path)
        if p.suffix == ".csv":
            for row in read_table(p):
                click.echo(",".join("" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
            continue
        rec = RunRecord.from_json(p.read_text())
        if rec.reports:
            m = macro_average(list(rec.reports.values()))
            bars[f"{rec.architecture} {rec.tag}"] = m
            click.echo(f"{rec.architecture} {rec.tag} seed {rec.seed}: acc {m.acc:.4f} miou {m.miou:.4f} "
                       f"({len(rec.reports)} clouds, {rec.wall_clock:.0f} s)")
        else:
            tail = f"final train acc {rec.train_acc[-1]:.4f}" if rec.train_acc else rec.status
            click.echo(f"{rec.architecture} {rec.tag} seed {rec.seed}: {tail}")
    if svg:
        if not bars:
            raise click.UsageError("no evaluated run records to plot")
        bar_chart(bars, svg)
        click.echo(f"wrote {svg}")


if __name__ == "__main__":
    main()
