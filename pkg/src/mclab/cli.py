import logging
import os
import sys
from pathlib import Path

import pretty_errors
import rich_click as click
from rich.table import Table

import mclab
from mclab import fedtrain, report, synthcenter
from mclab.checkpoint import read_checkpoint
from mclab.collections import dflat, rconf
from mclab.config import SPLITS, load_experiment
from mclab.filesystem import path
from mclab.tinynet import NetworkDescriptor

log = logging.getLogger(__name__)
tee = mclab.tee(log)

os.environ["PYTHONBREAKPOINT"] = "pudb.set_trace"

pretty_errors.configure(
    filename_display=pretty_errors.FILENAME_EXTENDED,
    lines_after=2,
    line_number_first=True,
)

LOGFILE = "mclab.log"
MODEL = "model.mckp"


class Group(click.RichGroup):
    """Maps mclab errors to their exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)

        except mclab.Error as exc:
            if mclab.debug:
                raise

            log.error(f"{type(exc).__name__}: {exc}")
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _resolve(ctx: click.Context, name: str | Path) -> Path:
    p = Path(name)
    return p if p.is_absolute() else ctx.obj["workdir"] / p


def _threads(ctx: click.Context, default: int) -> int:
    threads = ctx.obj["threads"]
    return default if threads is None else threads


def _logging(directory: Path):
    mclab.init_logging(path(directory, create=True) / LOGFILE)


# ---


@click.group(cls=Group)
@click.option(
    "-d",
    "--debug",
    is_flag=True,
    default=False,
    help="activate debug mode (drop into pudb on error)",
)
@click.option(
    "-q",
    "--quiet",
    is_flag=True,
    default=False,
    help="suppress console output",
)
@click.option(
    "-w",
    "--workdir",
    type=click.Path(file_okay=False),
    default=".",
    help="relative paths are resolved against this directory",
)
@click.option(
    "-t",
    "--threads",
    type=int,
    default=None,
    help="worker processes (default: all cores for synth/eval, 1 for train)",
)
@click.pass_context
def main(ctx: click.Context, debug: bool, quiet: bool, workdir: str, threads: int | None):
    """Multicenter lesion segmentation laboratory."""
    mclab.debug = debug
    mclab.console.quiet = quiet

    ctx.obj = {"workdir": Path(workdir).resolve(), "threads": threads}
    mclab.console.log(f"executing from: {ctx.obj['workdir']}")


@main.command("synth")
@click.argument("profile")
@click.argument("out_dir")
@click.pass_context
def main_synth(ctx: click.Context, profile: str, out_dir: str):
    """Generate a synthetic center from a profile."""
    out = _resolve(ctx, out_dir)
    profile_obj = synthcenter.load_profile(_resolve(ctx, profile))

    _logging(out)
    tee(f"generating center '{profile_obj.name}' into {out}")

    dataset = synthcenter.generate_center(profile_obj, threads=_threads(ctx, os.cpu_count() or 1))
    manifest = synthcenter.write_center(dataset, out)

    table = Table(title=f"{profile_obj.name} statistics")
    for header in ("split", "volumes", "lesions", "per volume", "mean cm³", "median cm³", "≤0.1 cm³"):
        table.add_column(header, justify="right")

    fmt = report.fmt
    for split, stats in synthcenter.center_statistics(dataset).items():
        table.add_row(
            split,
            str(stats.n_volumes),
            str(stats.n_lesions),
            f"{stats.lesions_per_volume:.2f}",
            fmt(stats.mean_size_cm3),
            fmt(stats.median_size_cm3),
            fmt(stats.frac_small),
        )

    mclab.console.print(table)
    tee(f"wrote {manifest}")


@main.command("train")
@click.argument("config")
@click.option("--dry-run", is_flag=True, default=False, help="validate and print the plan")
@click.pass_context
def main_train(ctx: click.Context, config: str, dry_run: bool):
    """Run the experiment described by a configuration file."""
    exp = load_experiment(_resolve(ctx, config))
    centers = fedtrain.check_experiment(exp)

    plan = Table(title=f"experiment '{exp.name}'")
    plan.add_column("strategy")
    plan.add_column("centers")
    plan.add_column("seeds", justify="right")
    plan.add_column("output")

    for strategy in exp.strategies:
        plan.add_row(
            strategy,
            " -> ".join(name for name, _ in centers),
            ", ".join(map(str, exp.seeds)),
            str(exp.output_dir / strategy),
        )

    if dry_run:
        settings = Table(title="resolved configuration")
        settings.add_column("key")
        settings.add_column("value")
        for key, value in dflat(exp.to_dict()).items():
            settings.add_row(key, str(value))

        mclab.console.print(settings)
        mclab.console.print(plan)
        mclab.console.print("dry run, nothing written")
        return

    _logging(exp.output_dir)
    mclab.console.print(plan)

    manifest = fedtrain.experiment_manifest(exp, centers)
    report.write_json(manifest, exp.output_dir / report.EXPERIMENT_FILE)

    result = fedtrain.repeat_experiment(exp, threads=_threads(ctx, 1))

    for run in result.runs:
        report.write_metrics(run.report, run.directory)
        if run.pretrained is not None:
            report.write_metrics(run.pretrained, run.directory / "pretrained")

        mclab.console.print(report.metrics_table(run.report))

    report.write_json(report.train_log(result), exp.output_dir / "train-log.json")

    comparison = report.compare([exp.output_dir])
    report.write_comparison(comparison, exp.output_dir)
    for table in report.comparison_tables(comparison):
        mclab.console.print(table)

    tee(f"experiment '{exp.name}' finished")


@main.command("eval")
@click.argument("paths", nargs=-1, required=True)
@click.option("--no-brain-mask", is_flag=True, default=False, help="do not filter predictions")
@click.option("--oracle", is_flag=True, default=False, help="predict the labels (all paths are manifests)")
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--tolerance", type=float, default=1.0, show_default=True, help="surface dice tolerance (mm)")
@click.option("--network", default=None, help="expected architecture (json or yaml)")
@click.option("--out", default=None, help="output directory")
@click.pass_context
def main_eval(
    ctx: click.Context,
    paths: tuple[str, ...],
    no_brain_mask: bool,
    oracle: bool,
    split: str,
    tolerance: float,
    network: str | None,
    out: str | None,
):
    """
    Evaluate a checkpoint (or run directory) on centers.

    PATHS is TARGET MANIFEST... or, with --oracle, MANIFEST...

    """
    resolved = [_resolve(ctx, p) for p in paths]

    if oracle:
        ckpt, manifests, name = None, resolved, "oracle"
        default_out = ctx.obj["workdir"] / "oracle"

    else:
        if len(resolved) < 2:
            raise click.UsageError("expected a checkpoint and at least one manifest")

        target, manifests = resolved[0], resolved[1:]
        run_dir = target if target.is_dir() else target.parent
        ckpt_file = target / MODEL if target.is_dir() else target

        ckpt = read_checkpoint(ckpt_file)
        name, default_out = ckpt_file.stem, run_dir

    descriptor = None
    if network is not None:
        descriptor = NetworkDescriptor.from_dict(rconf(_resolve(ctx, network)))

    out_dir = _resolve(ctx, out) if out else default_out
    _logging(out_dir)

    centers = [synthcenter.load_center(m) for m in manifests]
    metrics = fedtrain.evaluate_checkpoint(
        ckpt,
        centers,
        split=split,
        tolerance_mm=tolerance,
        with_brain_mask=not no_brain_mask,
        brackets=not no_brain_mask,
        descriptor=descriptor,
        threads=_threads(ctx, os.cpu_count() or 1),
        model=name,
    )

    report.write_metrics(metrics, out_dir)
    mclab.console.print(report.metrics_table(metrics))
    tee(f"wrote metrics to {out_dir}")


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--out", default=None, help="output directory")
@click.pass_context
def main_report(ctx: click.Context, run_dirs: tuple[str, ...], out: str | None):
    """Compare repeated runs with unpaired t-tests."""
    comparison = report.compare([_resolve(ctx, d) for d in run_dirs])

    out_dir = _resolve(ctx, out) if out else ctx.obj["workdir"]
    _logging(out_dir)

    report.write_comparison(comparison, out_dir)
    for table in report.comparison_tables(comparison):
        mclab.console.print(table)

    tee(f"wrote report to {out_dir}")


def entry():
    try:
        main()  # pyright: ignore

    except Exception as exc:
        if not mclab.debug:
            raise

        import pudb

        log.error("debug: catched exception, starting debugger")
        log.error(str(exc))

        _, _, tb = sys.exc_info()
        pudb.post_mortem(tb)

        raise exc
