#!/usr/bin/env python
# -*- coding: utf-8 -*-


"""
Check the direction of forgetting on a bundled scenario.

Generates the centers of a preset (if they do not exist yet), runs
the preset's strategies for three seeds at a reduced budget and
prints, per seed:

  - combined test F1 of lwf, tl and single-center training
  - source center F1 drop of lwf and tl relative to the pretrained model
  - precision of the single-center model on the source center
    with and without brain-mask filtering

Expected directions: lwf beats tl and single in combined F1, tl
forgets more than lwf and brain-mask filtering never lowers
precision. Magnitudes depend on the profiles and the budget.

 ⯈ ./forgetting_benchmark.py bilateral-boundary --epochs 10
writing data to /path/to/mclab/data/benchmark

Requires an installed mclab. A logfile is written to the output directory.
"""


from pathlib import Path

import rich_click as click
from rich.table import Table

import mclab
from mclab import fedtrain, synthcenter
from mclab.config import load_experiment
from mclab.report import fmt

PRESETS = mclab.ENV.DIR.CONF / "presets"
PROFILES = mclab.ENV.DIR.CONF / "profiles"


def _centers(names: list[str], out: Path, threads: int) -> list[str]:
    manifests = []
    for fname in sorted(PROFILES.glob("*.json")):
        profile = synthcenter.load_profile(fname)
        if profile.name not in names:
            continue

        manifest = out / "centers" / profile.name / "manifest.json"
        if not manifest.exists():
            mclab.console.print(f"generating center '{profile.name}'")
            dataset = synthcenter.generate_center(profile, threads=threads)
            synthcenter.write_center(dataset, manifest.parent)

        manifests.append((names.index(profile.name), str(manifest)))

    return [m for _, m in sorted(manifests)]


@click.command()
@click.argument("preset", type=click.Choice([p.stem for p in sorted(PRESETS.glob("*.json"))]))
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=mclab.ENV.DIR.DATA / "benchmark")
def main(preset: str, epochs: int, out: Path, threads: int):
    """Check the direction of forgetting on a bundled scenario."""
    out = out.resolve()
    print(f"writing data to {out}")

    mclab.console.quiet = False
    mclab.init_logging(out / "benchmark.log")

    fname = PRESETS / f"{preset}.json"
    names = [Path(m).parent.name for m in load_experiment(fname).centers]

    exp = load_experiment(
        fname,
        centers=_centers(names, out, threads),
        strategies=["single", "tl", "lwf"],
        evaluate_pretrained=True,
        output_dir=str(out / "runs" / preset),
        train={"epochs": epochs},
    )

    result = fedtrain.repeat_experiment(exp, n_repeats=3, threads=threads)
    source = names[0]

    table = Table(title=f"{preset}: direction of forgetting")
    for header in ("seed", "f1 lwf", "f1 tl", "f1 single", "drop lwf", "drop tl", "prec", "prec unmasked"):
        table.add_column(header, justify="right")

    for seed in exp.seeds[:3]:
        runs = {r.strategy: r for r in result.runs if r.seed == seed}
        single = runs["single"].report

        table.add_row(
            str(seed),
            *(fmt(runs[s].report.row(fedtrain.COMBINED).f1) for s in ("lwf", "tl", "single")),
            fmt(runs["lwf"].forgetting),
            fmt(runs["tl"].forgetting),
            fmt(single.row(source).precision),
            fmt(single.row(source, with_brain_mask=False).precision),
        )

    mclab.console.print(table)


if __name__ == "__main__":
    main()  # pyright: ignore
