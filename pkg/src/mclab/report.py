# -*- coding: utf-8 -*-

"""
Result files and tables.

An evaluated model directory holds metrics.json and table.txt. Several
such directories (repeats of possibly different strategies) are
compared by :func:`compare` into per-metric means and pairwise
p-values, written as report.json and report.md.

"""

import io
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from rich import box
from rich.console import Console
from rich.table import Table

import mclab
from mclab.checkpoint import read_checkpoint
from mclab.collections import buckets
from mclab.fedtrain import COMBINED, ExperimentResult, MetricsReport, significance
from mclab.filesystem import atomic_write, path
from mclab.lesioneval import MetricsRow

log = logging.getLogger(__name__)


class ReportSchemaError(mclab.Error):
    exit_code = 6


SCHEMA = "mclab.metrics/1"

METRICS_FILE = "metrics.json"
TABLE_FILE = "table.txt"
EXPERIMENT_FILE = "experiment.json"

# table header and MetricsRow attribute
COLUMNS = (
    ("Sensitivity", "sensitivity"),
    ("Precision", "precision"),
    ("FPR", "fpr"),
    ("F1", "f1"),
    ("F2", "f2"),
    ("sDice", "sdice"),
    ("HD95", "hd95_mm"),
)


def fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def _render(table: Table, width: int = 160) -> str:
    buf = io.StringIO()
    console = Console(file=buf, width=width, color_system=None, force_terminal=False)
    console.print(table)
    return buf.getvalue()


def _json(target: Path, dic: dict[str, Any]):
    with atomic_write(target, mode="w") as fd:
        json.dump(dic, fd, indent=2)
        fd.write("\n")


def _text(target: Path, text: str):
    with atomic_write(target, mode="w") as fd:
        fd.write(text)


# --- single models


def metrics_table(report: MetricsReport, style: box.Box = box.ASCII) -> Table:
    """
    Result table of one model.

    If rows with and without brain-mask filtering exist, the filtered
    value is shown with the unfiltered one in brackets.

    """
    table = Table(title=f"{report.model} ({report.split})", box=style)
    table.add_column("Center")
    for header, _ in COLUMNS:
        table.add_column(header, justify="right")

    def cells(get) -> list[str]:
        masked, unmasked = get(True), get(False)
        res = []
        for _, attr in COLUMNS:
            if masked and unmasked:
                res.append(f"{fmt(getattr(masked, attr))} ({fmt(getattr(unmasked, attr))})")
            else:
                res.append(fmt(getattr(masked or unmasked, attr)))
        return res

    def getter(center: str):
        def get(with_brain_mask: bool) -> MetricsRow | None:
            try:
                return report.row(center, with_brain_mask)
            except KeyError:
                return None

        return get

    for center in report.centers + [COMBINED]:
        table.add_row(center, *cells(getter(center)))

    return table


def render_metrics(report: MetricsReport) -> str:
    return _render(metrics_table(report))


def metrics_to_dict(report: MetricsReport) -> dict[str, Any]:
    return {"schema": SCHEMA} | report.to_dict()


def _row(dic: dict[str, Any]) -> MetricsRow:
    fields = {k: v for k, v in dic.items() if k != "center"}
    return MetricsRow(**fields)


def metrics_from_dict(dic: dict[str, Any], source: str = "<dict>") -> MetricsReport:
    """
    Parse a metrics document.

    Raises
    ------
    ReportSchemaError
        For documents of another schema or with missing fields

    """
    if dic.get("schema") != SCHEMA:
        raise ReportSchemaError(f"{source}: expected schema {SCHEMA}, got {dic.get('schema')}")

    try:
        return MetricsReport(
            model=dic["model"],
            strategy=dic["strategy"],
            seed=dic["seed"],
            split=dic["split"],
            tolerance_mm=float(dic["tolerance_mm"]),
            rows=tuple((row["center"], _row(row)) for row in dic["rows"]),
            combined=tuple(_row(row) for row in dic["combined"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportSchemaError(f"{source}: malformed metrics: {exc}") from exc


def write_metrics(report: MetricsReport, directory: str | Path) -> Path:
    """Write metrics.json and table.txt, returns the json file."""
    directory = path(directory, create=True)

    target = directory / METRICS_FILE
    _json(target, metrics_to_dict(report))
    _text(directory / TABLE_FILE, render_metrics(report))

    log.info(f"report: wrote metrics of '{report.model}' to {directory}")
    return target


def read_metrics(run_dir: str | Path) -> MetricsReport:
    """
    Read the metrics of a run directory.

    Raises
    ------
    ReportSchemaError
        If the directory has no (valid) metrics file

    """
    source = Path(run_dir) / METRICS_FILE
    if not source.is_file():
        raise ReportSchemaError(f"{run_dir}: no {METRICS_FILE} found")

    try:
        dic = json.loads(source.read_text())
    except json.JSONDecodeError as exc:
        raise ReportSchemaError(f"{run_dir}: malformed {METRICS_FILE}: {exc}") from exc

    return metrics_from_dict(dic, source=str(run_dir))


def train_log(result: ExperimentResult) -> dict[str, Any]:
    """Validation trajectories and forgetting of all runs."""
    return {
        "runs": [
            {
                "strategy": run.strategy,
                "repeat": run.repeat,
                "seed": run.seed,
                "checkpoint": run.checkpoint.name,
                "trajectory": [
                    vars(point) for point in read_checkpoint(run.checkpoint).trajectory
                ],
                "forgetting": run.forgetting,
            }
            for run in result.runs
        ],
        "forgetting": result.forgetting(),
    }


def write_json(dic: dict[str, Any], target: str | Path) -> Path:
    _json(Path(target), dic)
    return Path(target)


# --- comparisons


def expand_runs(run_dirs: Iterable[str | Path]) -> list[Path]:
    """
    Resolve run directories.

    Experiment output directories (containing experiment.json) expand
    to their <strategy>/repeat-<k> directories.

    """
    res = []
    for run_dir in map(Path, run_dirs):
        if (run_dir / EXPERIMENT_FILE).is_file() and not (run_dir / METRICS_FILE).exists():
            res.extend(sorted(p.parent for p in run_dir.glob(f"*/repeat-*/{METRICS_FILE}")))
        else:
            res.append(run_dir)

    return res


@dataclass(frozen=True)
class Comparison:
    """
    Strategies compared over repeated runs.

    means maps strategy to metric to the mean over repeats of the
    combined row; p_values maps metric to (strategy, strategy) pairs.

    """

    split: str
    tolerance_mm: float
    centers: tuple[str, ...]
    n_repeats: dict[str, int]
    means: dict[str, dict[str, float | None]]
    p_values: dict[str, dict[tuple[str, str], float | None]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "tolerance_mm": self.tolerance_mm,
            "centers": list(self.centers),
            "n_repeats": self.n_repeats,
            "means": self.means,
            "p_values": {
                metric: [{"a": a, "b": b, "p": p} for (a, b), p in pairs.items()]
                for metric, pairs in self.p_values.items()
            },
        }


def _check_compatible(reports: Sequence[tuple[Path, MetricsReport]]):
    first_dir, first = reports[0]
    for run_dir, report in reports[1:]:
        for attr in ("split", "tolerance_mm", "centers"):
            if getattr(report, attr) != getattr(first, attr):
                raise ReportSchemaError(
                    f"{run_dir}: '{attr}' differs from {first_dir}"
                    f" ({getattr(report, attr)} vs {getattr(first, attr)})"
                )

        try:
            report.row(COMBINED, True)
        except KeyError:
            raise ReportSchemaError(f"{run_dir}: no brain-masked rows")


def compare(run_dirs: Sequence[str | Path]) -> Comparison:
    """
    Compare repeated runs of one or more strategies.

    Raises
    ------
    ReportSchemaError
        For fewer than two runs, missing metrics or runs that were
        evaluated differently

    """
    dirs = expand_runs(run_dirs)
    if len(dirs) < 2:
        raise ReportSchemaError(f"report: need at least two runs, got {len(dirs)}")

    loaded = [(d, read_metrics(d)) for d in dirs]
    _check_compatible(loaded)

    by_strategy = buckets(loaded, key=lambda _, item: (item[1].strategy, item[1]))

    means: dict[str, dict[str, float | None]] = {}
    for strategy, reports in sorted(by_strategy.items()):
        means[strategy] = {}
        for _, attr in COLUMNS:
            values = [getattr(r.row(COMBINED), attr) for r in reports]
            means[strategy][attr] = (
                None if None in values else float(np.mean(values))
            )

    first = loaded[0][1]
    log.info(f"report: compared {len(loaded)} runs of {sorted(by_strategy)}")

    return Comparison(
        split=first.split,
        tolerance_mm=first.tolerance_mm,
        centers=tuple(first.centers),
        n_repeats={s: len(r) for s, r in sorted(by_strategy.items())},
        means=means,
        p_values=significance(by_strategy, metrics=[attr for _, attr in COLUMNS]),
    )


def comparison_tables(comparison: Comparison, style: box.Box = box.ASCII) -> list[Table]:
    means = Table(title=f"means over repeats ({comparison.split})", box=style)
    means.add_column("Strategy")
    means.add_column("n", justify="right")
    for header, _ in COLUMNS:
        means.add_column(header, justify="right")

    for strategy, values in comparison.means.items():
        means.add_row(
            strategy,
            str(comparison.n_repeats[strategy]),
            *(fmt(values[attr]) for _, attr in COLUMNS),
        )

    tables = [means]
    strategies = list(comparison.means)

    for header, attr in COLUMNS:
        pairs = comparison.p_values[attr]
        table = Table(title=f"p-values {header}", box=style)
        table.add_column("")
        for strategy in strategies:
            table.add_column(strategy, justify="right")

        for a in strategies:
            row = []
            for b in strategies:
                p = pairs.get((a, b), pairs.get((b, a)))
                row.append(fmt(p))
            table.add_row(a, *row)

        tables.append(table)

    return tables


def render_comparison(comparison: Comparison, style: box.Box = box.ASCII) -> str:
    return "\n".join(_render(t) for t in comparison_tables(comparison, style))


def write_comparison(comparison: Comparison, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.json and report.md."""
    out_dir = path(out_dir, create=True)

    json_target = out_dir / "report.json"
    _json(json_target, comparison.to_dict())

    md_target = out_dir / "report.md"
    _text(md_target, render_comparison(comparison, style=box.MARKDOWN))

    log.info(f"report: wrote comparison to {out_dir}")
    return json_target, md_target
