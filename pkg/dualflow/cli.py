import functools
import logging
import math
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from dualflow.atomic import atomic_write
from dualflow.config import DualflowConfig, dump_config, load_config
from dualflow.errors import DualflowError
from dualflow.logger import setup_logging

logger = logging.getLogger(__name__)

CHANNELS = {"first": "first_order", "dual": "dual"}
GENSTIM_KINDS = ("gabor", "plaid", "A", "B", "C", "D", "E", "modulation", "drift-balanced", "square", "benchmark")


def reports_errors(fn):
    """Turn library errors into one ``error[code]: message`` line and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DualflowError as exc:
            click.echo(f"error[{exc.code}]: {' '.join(str(exc).split())}", err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(f"error[io]: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _config(
    path: str | None,
    seed: int | None = None,
    iters: int | None = None,
    channel: str | None = None,
) -> DualflowConfig:
    config = load_config(path)
    update = {}
    if seed is not None:
        update["seed"] = seed
    if iters is not None:
        update["iterations"] = iters
    if channel is not None:
        update["channel"] = CHANNELS[channel]
    if update:
        config = config.model_copy(update=dict(train=config.train.model_copy(update=update)))
    return config


def _load_model(checkpoint: str):
    from dualflow.model import DualflowModel
    from dualflow.tensor_core import default_dtype

    with default_dtype(np.float64):
        model, meta = DualflowModel.load(checkpoint)
    return model, meta


@click.group()
@click.version_option(package_name="dualflow")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def main(verbose: bool) -> None:
    """dualflow: a two-stage motion model with in-silico physiology."""
    setup_logging(verbose=verbose)


@main.command()
@click.argument("kind", type=click.Choice(GENSTIM_KINDS))
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--index", type=int, default=0, show_default=True, help="Sample index within a dataset")
@click.option("--f-s", "f_s", type=float, default=0.08, show_default=True, help="Grating cycles/pixel")
@click.option("--theta", type=float, default=0.0, show_default=True, help="Direction in degrees")
@click.option("--speed", type=float, default=1.0, show_default=True, help="Pixels/frame")
@click.option("--modulation", type=str, default="drift_balanced", show_default=True)
@click.option("--scenes", type=int, default=None, help="Scenes per modulation for 'benchmark'")
@reports_errors
def genstim(
    kind: str,
    out: str,
    config_path: str | None,
    seed: int,
    index: int,
    f_s: float,
    theta: float,
    speed: float,
    modulation: str,
    scenes: int | None,
) -> None:
    """Generate a stimulus sequence into the directory OUT.

    \b
    Examples:
        dualflow genstim gabor out/g --f-s 0.1 --theta 45 --speed 1.5
        dualflow genstim C out/c --seed 3 --index 7
        dualflow genstim benchmark out/bench --scenes 4
    """
    from dualflow import stimuli
    from dualflow.fileio import write_sequence
    from dualflow.textures import procedural_texture

    config = load_config(config_path)
    stim = config.stimulus
    direction = math.radians(theta)
    size = (stim.size, stim.size)

    if kind == "benchmark":
        bench = stimuli.modulation_benchmark(scenes or stim.benchmark_scenes, seed, stim, config.carrier)
        for mod, sequences in bench.items():
            for i, seq in enumerate(sequences):
                write_sequence(seq, Path(out) / mod / f"scene_{i:03d}")
        click.echo(f"Wrote {sum(len(s) for s in bench.values())} sequences to {out}")
        return

    if kind == "gabor":
        seq = stimuli.drifting_gabor(f_s, direction, speed, stim.size, stim.frames)
    elif kind == "plaid":
        seq = stimuli.plaid(f_s, direction, speed, stim.size, stim.frames)
    elif kind == "A":
        seq = stimuli.textured_scene(seed, index, stim)
    elif kind in ("B", "C"):
        seq = stimuli.toy_sample(kind, seed, index, stim)
    elif kind in ("D", "E"):
        seq = stimuli.proxy_sample(seed, index, "diffuse" if kind == "D" else "nondiffuse", stim)
    elif kind == "drift-balanced":
        velocity = (speed * math.cos(direction), speed * math.sin(direction))
        seq = stimuli.drift_balanced_gabor(velocity, stim.size, stim.frames, seed=seed)
    elif kind == "square":
        seq = stimuli.translating_square_scene(stim.size, speed, direction, stim.frames, seed=seed)
    else:
        image = 0.2 + 0.6 * procedural_texture(size, np.random.default_rng([seed, index, 0]))
        carrier = stimuli.fitted_carrier([seed, index, 1], size, stim.region_radius, config.carrier, stim.benchmark_frames)
        seq = stimuli.apply_modulation(image, carrier, modulation, [seed, index, 2], stim.region_radius)
    write_sequence(seq, out)
    click.echo(f"Wrote {seq.n_frames} frames to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Overrides [train] seed")
@click.option("--iters", type=int, default=None, help="Stage II iterations")
@click.option("--channel", type=click.Choice(tuple(CHANNELS)), default=None)
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None, help="Overrides [train] output_dir")
@click.option("--dump-config", "dump_only", is_flag=True, help="Print the effective configuration and exit")
@reports_errors
def train(
    config_path: str | None,
    seed: int | None,
    iters: int | None,
    channel: str | None,
    output_dir: str | None,
    dump_only: bool,
) -> None:
    """Train a model through the configured curriculum."""
    from dualflow.display import render_curriculum
    from dualflow.registry import register_run
    from dualflow.trainer import train as run_training

    config = _config(config_path, seed, iters, channel)
    if dump_only:
        click.echo(dump_config(config), nl=False)
        return

    console = Console(stderr=True)
    render_curriculum(config.train, console)
    with Progress(
        TextColumn("[bold blue]training"), BarColumn(), TextColumn("{task.completed}/{task.total}"),
        TextColumn("loss {task.fields[loss]:.5f}"), TimeElapsedColumn(), console=console, transient=True,
    ) as progress:
        task = progress.add_task("train", total=config.train.total_steps, loss=float("nan"))
        result = run_training(
            config, output_dir, progress=lambda done, total, loss: progress.update(task, completed=done, loss=loss)
        )

    register_run(
        config.train.run_name, "train", dump_config(config), result.checkpoint, result.metrics_path, result.final_epe
    )
    click.echo(f"Checkpoint: {result.checkpoint}")
    click.echo(f"Metrics:    {result.metrics_path}")
    if result.final_epe is not None:
        click.echo(f"Held-out EPE: {result.final_epe:.4f}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("frames", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--iters", type=int, default=None, help="Defaults to the checkpoint's iteration count")
@click.option("--all-points", is_flag=True, help="Also write the Stage I and intermediate decodes")
@reports_errors
def infer(checkpoint: str, frames: str, out_dir: str, iters: int | None, all_points: bool) -> None:
    """Estimate flow for a frame directory; writes .flo and colour-wheel PNGs."""
    from dualflow.fileio import load_sequence, write_flo, write_flow_png
    from dualflow.tensor_core import default_dtype, no_grad

    model, meta = _load_model(checkpoint)
    iterations = meta.get("iterations", 4) if iters is None else iters
    seq = load_sequence(frames)
    with default_dtype(np.float64), no_grad():
        out = model.forward(seq, iterations)
    names = ["stage1", *(f"stage2.iter{i}" for i in range(1, iterations + 1))]
    chosen = list(zip(names, out.flows)) if all_points else [("flow", out.final_flow)]
    for name, flow in chosen:
        write_flo(flow, Path(out_dir) / f"{name}.flo")
        write_flow_png(flow, Path(out_dir) / f"{name}.png")
    click.echo(f"Wrote {len(chosen)} flow field(s) to {out_dir}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("frames", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Mask PGM")
@click.option("--iters", type=int, default=None)
@click.option("--refine", is_flag=True, help="3x3 majority filter")
@click.option("--recursive", is_flag=True, help="Re-cut the larger region once")
@reports_errors
def segment(checkpoint: str, frames: str, out_path: str, iters: int | None, refine: bool, recursive: bool) -> None:
    """Training-free spectral segmentation of the final motion graph."""
    from dualflow.display import render_segmentation
    from dualflow.fileio import load_sequence, write_mask_pgm
    from dualflow.segmentation import segment as spectral_segment
    from dualflow.tensor_core import default_dtype, no_grad

    model, meta = _load_model(checkpoint)
    seq = load_sequence(frames)
    with default_dtype(np.float64), no_grad():
        out = model.forward(seq, meta.get("iterations", 4) if iters is None else iters)
    mask = spectral_segment(out.adjacency, out.grid, refine=refine, recursive=recursive)
    write_mask_pgm(mask.upsampled(seq.size), out_path)
    render_segmentation(mask, Console(stderr=True))
    if recursive and mask.regions is not None:
        np.save(Path(out_path).with_suffix(".regions.npy"), mask.regions)
    click.echo(f"Wrote {out_path}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", "stages", multiple=True, default=("stage1",), show_default=True,
              help="stage1, stage1_raw or stage2.iter<i>; repeatable")
@click.option("--units", type=str, default=None, help="Unit range like 0-31 (default: all)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@reports_errors
def analyze(checkpoint: str, stages: tuple[str, ...], units: str | None, config_path: str | None, out_dir: str) -> None:
    """Pattern/component classification and selectivity of model units (CSV per stage)."""
    from dualflow.display import render_population
    from dualflow.neurophys import analyze_population, parse_stage, write_population_csv
    from dualflow.tensor_core import default_dtype

    config = load_config(config_path)
    model, _ = _load_model(checkpoint)
    chosen = _parse_units(units)
    console = Console()
    for stage in stages:
        parse_stage(stage)
        with default_dtype(np.float64):
            records = analyze_population(model, stage, config.analysis, chosen)
        path = write_population_csv(records, Path(out_dir) / f"{stage}.csv")
        render_population(records, console)
        click.echo(f"Wrote {path}")


def _parse_units(text: str | None) -> list[int] | None:
    if text is None:
        return None
    units: list[int] = []
    for part in text.split(","):
        lo, _, hi = part.strip().partition("-")
        try:
            units.extend(range(int(lo), int(hi or lo) + 1))
        except ValueError as exc:
            raise click.BadParameter(f"cannot parse unit range {part!r}", param_hint="--units") from exc
    return units


@main.command(name="eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("frames", type=click.Path(exists=True, file_okay=False))
@click.option("--response", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reference (e.g. human) flow .flo; defaults to the ground truth")
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Ground-truth object mask for segmentation IoU")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="CSV")
@reports_errors
def evaluate(
    checkpoint: str, frames: str, response: str | None, mask_path: str | None, config_path: str | None, out_path: str
) -> None:
    """Compare every decode point with a reference flow; ground truth is read from FRAMES/flow.flo."""
    from dualflow.display import render_comparison
    from dualflow.fileio import load_labeled_sequence, read_flo
    from dualflow.metrics import adaptive_iou, compare_flows
    from dualflow.segmentation import segment as spectral_segment
    from dualflow.tensor_core import default_dtype, no_grad
    from dualflow.textures import load_background

    speed_eps = load_config(config_path).analysis.speed_mask
    model, meta = _load_model(checkpoint)
    iterations = meta.get("iterations", 4)
    seq, gt = load_labeled_sequence(frames)
    reference = read_flo(response) if response else gt
    with default_dtype(np.float64), no_grad():
        out = model.forward(seq, iterations)
    names = ["stage1", *(f"stage2.iter{i}" for i in range(1, iterations + 1))]
    rows = [(name, compare_flows(flow, reference, gt, speed_eps)) for name, flow in zip(names, out.flows)]
    frame = pd.DataFrame([{"decode_point": name, **cmp.row()} for name, cmp in rows])
    if mask_path:
        truth = load_background(mask_path) > 0.5
        mask = spectral_segment(out.adjacency, out.grid)
        result = adaptive_iou(mask.upsampled(seq.size), truth)
        frame["iou"] = result.value
        click.echo(f"IoU {result.value:.3f}{' (complement)' if result.flipped else ''}")
    with atomic_write(out_path, "w") as fh:
        frame.to_csv(fh, index=False)
    render_comparison(rows)
    click.echo(f"Wrote {out_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", "seeds", type=int, multiple=True, default=(0,), show_default=True, help="Repeatable")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None, help="Keep checkpoints here")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None, help="CSV of all entries")
@click.option("--durable", is_flag=True, help="Run as a resumable DBOS workflow")
@click.option("--dump-config", "dump_only", is_flag=True, help="Print the effective configuration and exit")
@reports_errors
def ablate(
    config_path: str | None,
    seeds: tuple[int, ...],
    output_dir: str | None,
    report_path: str | None,
    durable: bool,
    dump_only: bool,
) -> None:
    """Train {first_order, dual} x {diffuse, nondiffuse} and score the second-order benchmark."""
    from dualflow.display import render_ablation, render_ablation_summary
    from dualflow.registry import register_run
    from dualflow.trainer import ablation_suite, summarize_reports

    config = load_config(config_path)
    if dump_only:
        click.echo(dump_config(config), nl=False)
        return

    if durable:
        from dualflow.dbos_config import configure_dbos, launch_dbos

        configure_dbos()
        from dualflow.workflows import run_durable_ablation

        launch_dbos()
        reports = [run_durable_ablation(config, seed, output_dir) for seed in seeds]
    else:
        reports = [ablation_suite(seed, config, output_dir) for seed in seeds]

    for report in reports:
        render_ablation(report)
    if len(reports) > 1:
        render_ablation_summary(summarize_reports(reports))
    if report_path:
        with atomic_write(report_path, "w") as fh:
            pd.concat([r.frame().assign(seed=r.seed) for r in reports]).to_csv(fh, index=False)
    register_run(
        f"{config.train.run_name}-ablation", "ablate", dump_config(config), output_dir, report_path
    )


@main.command()
@click.argument("name", required=False)
@reports_errors
def runs(name: str | None) -> None:
    """List registered runs, or show one in detail."""
    from dualflow.display import render_run_detail, render_runs
    from dualflow.registry import get_run, list_runs

    if not name:
        render_runs(list_runs())
        return
    run = get_run(name)
    if run is None:
        click.echo(f"error[unknown-run]: no run named '{name}'", err=True)
        sys.exit(1)
    render_run_detail(run)


if __name__ == "__main__":
    main()
