# -*- coding: utf-8 -*-

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from mclab import report
from mclab.checkpoint import Checkpoint, ValidationPoint, write_checkpoint
from mclab.fedtrain import ExperimentResult, MetricsReport, RunResult
from mclab.lesioneval import MetricsRow
from mclab.tinynet import TinyNet

from .conftest import TINY


def row(f1: float, masked: bool = True, sdice: float | None = None) -> MetricsRow:
    return MetricsRow(
        sensitivity=f1,
        precision=f1,
        fpr=0.5,
        f1=f1,
        f2=f1,
        sdice=sdice,
        hd95_mm=2.0,
        dice=0.6,
        n_volumes=2,
        n_ref_lesions=3,
        with_brain_mask=masked,
    )


def metrics(strategy: str, f1: float, seed: int = 0, **kwargs) -> MetricsReport:
    defaults = dict(
        model=f"{strategy}/repeat-{seed}",
        strategy=strategy,
        seed=seed,
        split="test",
        tolerance_mm=1.0,
        rows=(("a", row(f1)), ("b", row(f1))),
        combined=(row(f1),),
    )
    return MetricsReport(**(defaults | kwargs))


def write_runs(root: Path, values: dict[str, list[float]]) -> list[Path]:
    dirs = []
    for strategy, f1s in values.items():
        for k, f1 in enumerate(f1s):
            directory = root / strategy / f"repeat-{k}"
            report.write_metrics(metrics(strategy, f1, seed=k), directory)
            dirs.append(directory)

    return dirs


class TestMetrics:
    def test_fmt(self):
        assert report.fmt(None) == "n/a"
        assert report.fmt(0.12345) == "0.123"

    def test_roundtrip(self):
        original = metrics("tl", 0.8)

        with tempfile.TemporaryDirectory() as tmpdir:
            target = report.write_metrics(original, Path(tmpdir) / "run")
            assert target.name == report.METRICS_FILE
            assert (target.parent / report.TABLE_FILE).exists()

            loaded = report.read_metrics(target.parent)

        assert loaded.to_dict() == original.to_dict()
        assert json.loads(json.dumps(report.metrics_to_dict(loaded)))["schema"] == report.SCHEMA

    def test_table(self):
        text = report.render_metrics(metrics("tl", 0.8))

        assert "F1" in text and "HD95" in text
        assert "combined" in text
        assert "0.800" in text
        assert "n/a" in text

    def test_brackets(self):
        both = metrics(
            "tl",
            0.8,
            rows=(("a", row(0.8)), ("a", row(0.7, masked=False))),
            combined=(row(0.8), row(0.7, masked=False)),
        )
        assert "0.800 (0.700)" in report.render_metrics(both)

    def test_schema(self):
        dic = report.metrics_to_dict(metrics("tl", 0.8))

        with pytest.raises(report.ReportSchemaError, match="schema"):
            report.metrics_from_dict(dic | {"schema": "other/1"})

        del dic["combined"]
        with pytest.raises(report.ReportSchemaError, match="malformed") as info:
            report.metrics_from_dict(dic)

        assert info.value.exit_code == 6

    def test_missing(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(report.ReportSchemaError, match="no metrics"):
                report.read_metrics(tmpdir)

            (Path(tmpdir) / report.METRICS_FILE).write_text("{")
            with pytest.raises(report.ReportSchemaError, match="malformed"):
                report.read_metrics(tmpdir)


class TestTrainLog:
    def test_runs(self):
        ckpt = Checkpoint(
            params=TinyNet(TINY).init(np.random.default_rng(0)),
            descriptor=TINY,
            trajectory=(ValidationPoint(center="a", epoch=1, dice=0.3),),
        )

        with tempfile.TemporaryDirectory() as tmpdir:
            target = write_checkpoint(ckpt, Path(tmpdir) / "model.mckp")
            run = RunResult(
                strategy="single",
                repeat=0,
                seed=0,
                directory=Path(tmpdir),
                checkpoint=target,
                report=metrics("single", 0.5),
            )

            dic = report.train_log(ExperimentResult(runs=(run,), significance={}))

        assert dic["forgetting"] == {}
        assert dic["runs"][0]["checkpoint"] == "model.mckp"
        assert dic["runs"][0]["trajectory"] == [{"center": "a", "epoch": 1, "dice": 0.3}]
        assert dic["runs"][0]["forgetting"] is None


class TestCompare:
    def test_compare(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            dirs = write_runs(Path(tmpdir), {"tl": [0.5, 0.52], "lwf": [0.8, 0.82]})
            comparison = report.compare(dirs)

        assert comparison.n_repeats == {"lwf": 2, "tl": 2}
        assert comparison.centers == ("a", "b")
        assert comparison.means["tl"]["f1"] == pytest.approx(0.51)
        assert comparison.means["lwf"]["f1"] == pytest.approx(0.81)
        assert comparison.means["lwf"]["sdice"] is None

        p = comparison.p_values["f1"][("lwf", "tl")]
        assert 0 < p < 0.05
        assert comparison.p_values["sdice"][("lwf", "tl")] is None

    def test_expand(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            root = Path(tmpdir)
            dirs = write_runs(root, {"tl": [0.5, 0.6], "lwf": [0.8]})
            (root / report.EXPERIMENT_FILE).write_text("{}")

            assert report.expand_runs([root]) == sorted(dirs)
            assert report.compare([root]).n_repeats == {"lwf": 1, "tl": 2}

    def test_write(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            dirs = write_runs(Path(tmpdir), {"tl": [0.5, 0.52], "lwf": [0.8, 0.82]})
            comparison = report.compare(dirs)

            json_file, md_file = report.write_comparison(comparison, Path(tmpdir) / "out")

            dic = json.loads(json_file.read_text())
            md = md_file.read_text()

        assert dic["split"] == "test"
        assert {"a": "lwf", "b": "tl"} in [
            {"a": e["a"], "b": e["b"]} for e in dic["p_values"]["f1"]
        ]
        assert "| lwf" in md
        assert "p-values F1" in md

    def test_too_few(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            dirs = write_runs(Path(tmpdir), {"tl": [0.5]})
            with pytest.raises(report.ReportSchemaError, match="two runs"):
                report.compare(dirs)

    def test_incompatible(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            root = Path(tmpdir)
            report.write_metrics(metrics("tl", 0.5), root / "x")
            report.write_metrics(metrics("tl", 0.6, split="val"), root / "y")

            with pytest.raises(report.ReportSchemaError, match="split"):
                report.compare([root / "x", root / "y"])

    def test_unmasked_only(self):
        unmasked = dict(
            rows=(("a", row(0.5, masked=False)), ("b", row(0.5, masked=False))),
            combined=(row(0.5, masked=False),),
        )

        with tempfile.TemporaryDirectory() as tmpdir:
            root = Path(tmpdir)
            report.write_metrics(metrics("tl", 0.5), root / "x")
            report.write_metrics(metrics("tl", 0.5, **unmasked), root / "y")

            with pytest.raises(report.ReportSchemaError, match="brain-masked"):
                report.compare([root / "x", root / "y"])

    def test_missing_run(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            root = Path(tmpdir)
            report.write_metrics(metrics("tl", 0.5), root / "x")

            with pytest.raises(report.ReportSchemaError):
                report.compare([root / "x", root / "nothing"])
