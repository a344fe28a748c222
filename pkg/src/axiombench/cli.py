"""Command-line interface: run batteries, sweep layers, render heatmaps."""

import os

# One BLAS thread per process: the arrays are tiny, worker processes are
# the parallelism unit, and unpinned thread pools destroy determinism of
# timing (never of results) while oversubscribing small machines.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import dataclasses
import sys

import click

from . import attributions, harness, micronet, scenarios


def _load_config(config_path, out_dir, seed):
    config = harness.load_config(config_path) if config_path \
        else harness.default_config()
    if seed is not None:
        config = dataclasses.replace(config, master_seed=int(seed))
    if out_dir is not None:
        config = dataclasses.replace(config, out_dir=str(out_dir))
    return config.validate()


@click.group()
def cli():
    """Generate controlled-feature scenarios and score attribution methods."""


@cli.command("run")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON run config; omit for the stock battery.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=None, help="Output directory (overrides the config).")
@click.option("--seed", type=int, default=None,
              help="Master seed (overrides the config).")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes; results are identical at any value.")
def run_cmd(config_path, out_dir, seed, jobs):
    """Run the full scenario battery and write report + samples."""
    config = _load_config(config_path, out_dir, seed)
    report = harness.run(config, jobs=max(1, jobs))
    _finish(report)


@cli.command("sweep")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--method", type=click.Choice(["gradcam"]), default="gradcam",
              show_default=True, help="Only gradcam has a layer knob.")
@click.option("--layers", required=True,
              help="Comma-separated conv layer names, e.g. conv1,conv2.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
def sweep_cmd(config_path, method, layers, out_dir, seed, jobs):
    """Score the battery with one gradcam per layer."""
    del method  # click already constrained it
    config = _load_config(config_path, out_dir, seed)
    names = [part.strip() for part in layers.split(",") if part.strip()]
    report = harness.layer_sweep(config, names, jobs=max(1, jobs))
    _finish(report)


@cli.command("render")
@click.option("--scenario", "manifest",
              type=click.Path(exists=True, dir_okay=False), required=True,
              help="A scenario manifest written by `run`.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              required=True)
@click.option("--model", "model_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Model container; default: model.axbm beside the run.")
def render_cmd(manifest, out_dir, model_path):
    """Re-render one persisted scenario's heatmaps for every method."""
    if model_path is None:
        model_path = os.path.join(os.path.dirname(os.path.abspath(manifest)),
                                  os.pardir, os.pardir, "model.axbm")
        if not os.path.exists(model_path):
            raise harness.ConfigError(
                "no model.axbm beside the run; pass --model explicitly")
    model = micronet.load_model(model_path)
    inst = scenarios.load_instance(manifest, model=model)
    sid = os.path.splitext(os.path.basename(manifest))[0]
    _, maps = harness.score_instance(
        model, inst, sid, 0, tuple(attributions.default_method_suite()),
        "positive", keep_maps=True)
    harness.render_heatmaps(inst, maps, out_dir)
    click.echo(f"rendered {len(maps) + 1} graymaps to {out_dir}")


def _finish(report):
    counts = report.report["counts"]
    total, failed = counts["total_jobs"], counts["failed_jobs"]
    click.echo(f"{total - failed}/{total} jobs ok; "
               f"report: {os.path.join(report.out_dir, 'report.json')} "
               f"({report.wall_clock:.1f}s)")
    if total and failed * 2 > total:
        sys.exit(2)


def main(argv=None):
    """Entry point with the documented exit codes (0 ok, 1 config, 2 failures)."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except harness.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    return 0


if __name__ == "__main__":
    main()
