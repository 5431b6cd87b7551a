# -*- coding: utf-8 -*-

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from mclab import fedtrain, report
from mclab.checkpoint import ArchitectureMismatch, encode_checkpoint, read_checkpoint
from mclab.collections import ConfigError
from mclab.config import EvalConfig, ExperimentConfig
from mclab.fedtrain import COMBINED, PrivacyAudit, Site
from mclab.filesystem import FileError, file_digest
from mclab.synthcenter import CenterDataset
from mclab.tinynet import NetworkDescriptor, predict_probabilities

from .conftest import TINY, tiny_config


@pytest.fixture(scope="module")
def pretrained(interior):
    return fedtrain.train_center(None, interior, tiny_config(), descriptor=TINY)


def experiment(manifests, output_dir, **kwargs) -> ExperimentConfig:
    defaults = dict(
        name="tiny",
        centers=tuple(manifests),
        strategies=("single", "tl", "lwf"),
        output_dir=Path(output_dir),
        train=tiny_config(),
        network=TINY,
        evaluation=EvalConfig(brackets=False),
        repeats=2,
    )
    return ExperimentConfig(**(defaults | kwargs))


class TestSeeds:
    def test_sampling(self):
        a = fedtrain.sampling_rng(0, "interior", 1).random()
        assert a == fedtrain.sampling_rng(0, "interior", 1).random()
        assert a != fedtrain.sampling_rng(0, "interior", 2).random()
        assert a != fedtrain.sampling_rng(0, "boundary", 1).random()
        assert a != fedtrain.sampling_rng(1, "interior", 1).random()

    def test_init(self):
        net = fedtrain.TinyNet(TINY)
        a = fedtrain.init_params(net, 3)
        assert a.distance(fedtrain.init_params(net, 3)) == 0
        assert a.distance(fedtrain.init_params(net, 4)) > 0


class TestTrainCenter:
    def test_single(self, pretrained):
        ckpt = pretrained
        assert ckpt.descriptor == TINY
        assert ckpt.centers == ["interior"]
        assert {e.strategy for e in ckpt.provenance} == {"single"}
        assert 1 <= len(ckpt.provenance) <= 2

        # one validation per epoch, the selected epoch has the best dice
        assert [p.epoch for p in ckpt.trajectory] == [1, 2]
        best = max(p.dice for p in ckpt.trajectory)
        assert ckpt.best_val_dice == best
        assert ckpt.trajectory[len(ckpt.provenance) - 1].dice == best

    def test_float32(self, pretrained):
        assert pretrained.params.distance(pretrained.params.rounded()) == 0

    def test_deterministic(self, interior, pretrained):
        again = fedtrain.train_center(None, interior, tiny_config(), descriptor=TINY)
        assert encode_checkpoint(again) == encode_checkpoint(pretrained)

    def test_seed(self, interior, pretrained):
        other = fedtrain.train_center(None, interior, tiny_config(seed=1), descriptor=TINY)
        assert other.params.distance(pretrained.params) > 0

    def test_continues(self, boundary, pretrained):
        ckpt = fedtrain.train_center(pretrained, boundary, tiny_config(strategy="tl"))

        assert ckpt.descriptor == TINY
        assert ckpt.centers == ["interior", "boundary"]
        assert ckpt.provenance[: len(pretrained.provenance)] == pretrained.provenance
        assert ckpt.provenance[-1].strategy == "tl"
        assert len(ckpt.trajectory) == 4

    def test_tl_is_lwf_without_distillation(self, boundary, pretrained):
        tl = fedtrain.train_center(pretrained, boundary, tiny_config(strategy="tl"))
        lwf = fedtrain.train_center(
            pretrained,
            boundary,
            tiny_config(strategy="lwf", lambda_lwf=0.0),
            teacher=pretrained,
        )
        assert encode_checkpoint(tl) == encode_checkpoint(lwf)

    def test_lwf_differs(self, boundary, pretrained):
        tl = fedtrain.train_center(pretrained, boundary, tiny_config(strategy="tl"))
        lwf = fedtrain.train_center(
            pretrained,
            boundary,
            tiny_config(strategy="lwf", lambda_lwf=1.0),
            teacher=pretrained,
        )

        assert lwf.provenance[-1].strategy == "lwf"
        assert lwf.params.distance(tl.params) > 0

    def test_missing_teacher(self, boundary, pretrained):
        with pytest.raises(fedtrain.MissingTeacher) as info:
            fedtrain.train_center(pretrained, boundary, tiny_config(strategy="lwf"))

        assert info.value.exit_code == 2

    def test_empty(self, interior):
        with pytest.raises(fedtrain.EmptyTrainSplit) as info:
            fedtrain.train_center(None, interior.subset(0), tiny_config(), descriptor=TINY)

        assert info.value.exit_code == 4

    def test_architecture(self, boundary, pretrained):
        with pytest.raises(ArchitectureMismatch):
            fedtrain.train_center(
                pretrained,
                boundary,
                tiny_config(strategy="tl", infer_tile=None),
                descriptor=NetworkDescriptor(),
            )

    def test_infer_tile(self, interior):
        with pytest.raises(ConfigError, match="infer_tile"):
            fedtrain.train_center(None, interior, tiny_config(infer_tile=25), descriptor=TINY)

    def test_no_validation(self, interior):
        center = CenterDataset(profile=interior.profile, train=interior.train)
        ckpt = fedtrain.train_center(None, center, tiny_config(), descriptor=TINY)

        assert len(ckpt.provenance) == 2
        assert ckpt.trajectory == ()
        assert ckpt.best_val_dice == 0.0

    def test_mixed(self, interior, boundary):
        ckpt = fedtrain.train_mixed([interior, boundary], tiny_config(), descriptor=TINY)

        assert ckpt.centers == ["interior+boundary"]
        assert {e.strategy for e in ckpt.provenance} == {"mixed"}


class TestSweeps:
    def test_lambda(self, boundary, pretrained):
        res = fedtrain.lambda_sweep(
            pretrained, boundary, tiny_config(epochs=1), pretrained, [0.0, 10.0]
        )

        assert [lam for lam, _ in res] == [0.0, 10.0]
        assert all(norm > 0 for _, norm in res)

    def test_data_amount(self, interior):
        res = fedtrain.data_amount_sweep(interior, tiny_config(epochs=1), [1, 3, 10], TINY)

        assert [n for n, _ in res] == [1, 3, 3]
        assert all(0 <= dice <= 1 for _, dice in res)


class TestAudit:
    def test_clean(self):
        audit = PrivacyAudit()
        audit.record(0, "a", "x")
        audit.record(1, "b", "y")
        audit.record(2, "a", "x")

        assert audit.violations() == []
        assert audit.sources("a") == {"x"}

    def test_shared_source(self):
        audit = PrivacyAudit()
        audit.record(0, "a", "x")
        audit.record(1, "b", "x")
        assert len(audit.violations()) == 1

    def test_shared_hop(self):
        audit = PrivacyAudit()
        audit.record(0, "a", "x")
        audit.record(0, "b", "y")
        assert [e.site for e in audit.violations()] == ["b"]


class TestProtocol:
    def test_swt(self, interior, boundary):
        with tempfile.TemporaryDirectory() as tmpdir:
            run = fedtrain.run_protocol(
                [interior, boundary], tiny_config(strategy="tl"), tmpdir, descriptor=TINY
            )

            assert [p.name for p in run.hops] == ["hop-00-interior.mckp", "hop-01-boundary.mckp"]
            assert all(p.exists() for p in run.hops)

            first = read_checkpoint(run.hops[0])

        assert run.checkpoint.centers == ["interior", "boundary"]
        assert first.centers == ["interior"]
        assert first.provenance[-1].strategy == "single"
        assert run.checkpoint.provenance[-1].strategy == "tl"

        assert run.audit.violations() == []
        assert [e.site for e in run.audit.entries] == ["interior", "boundary"]
        assert run.audit.sources("boundary") == {"memory:boundary"}

    def test_cwt(self, interior, boundary):
        cfg = tiny_config(strategy="tl", topology="cwt", cycles=2, epochs=1)
        run = fedtrain.run_protocol([interior, boundary], cfg, descriptor=TINY)

        assert len(run.hops) == 4
        assert run.checkpoint.centers == ["interior", "boundary", "interior", "boundary"]
        assert [e.hop for e in run.audit.entries] == [0, 1, 2, 3]
        assert run.audit.violations() == []

    def test_tl_is_lwf_without_distillation(self, interior, boundary):
        tl = fedtrain.run_protocol(
            [interior, boundary], tiny_config(strategy="tl"), descriptor=TINY
        )
        lwf = fedtrain.run_protocol(
            [interior, boundary],
            tiny_config(strategy="lwf", lambda_lwf=0.0),
            descriptor=TINY,
        )
        assert encode_checkpoint(tl.checkpoint) == encode_checkpoint(lwf.checkpoint)

    def test_manifests(self, manifests):
        sites = [Site(manifest=m) for m in manifests]
        assert [s.name for s in sites] == ["interior", "boundary"]

        run = fedtrain.run_protocol(
            sites, tiny_config(strategy="lwf", epochs=1), descriptor=TINY
        )
        assert run.audit.sources("interior") == {str(manifests[0])}
        assert run.checkpoint.provenance[-1].strategy == "lwf"

    def test_initial(self, boundary, pretrained):
        with tempfile.TemporaryDirectory() as tmpdir:
            initial = Path(tmpdir) / "teacher.mckp"
            fedtrain.write_checkpoint(pretrained, initial)

            run = fedtrain.run_protocol(
                [boundary], tiny_config(strategy="lwf", epochs=1), tmpdir, initial=initial
            )

        assert len(run.hops) == 1
        assert run.checkpoint.centers == ["interior", "boundary"]
        assert run.checkpoint.provenance[-1].strategy == "lwf"

    def test_too_few(self, interior):
        with pytest.raises(fedtrain.TooFewCenters) as info:
            fedtrain.run_protocol([interior], tiny_config(strategy="tl"))

        assert info.value.exit_code == 2

    def test_strategy(self, interior, boundary):
        with pytest.raises(ConfigError, match="single"):
            fedtrain.run_protocol([interior, boundary], tiny_config(strategy="single"))


class TestEvaluate:
    def test_oracle(self, interior, boundary):
        report = fedtrain.evaluate_checkpoint(None, [interior, boundary], brackets=True)

        assert report.strategy == "oracle"
        assert report.seed is None
        assert report.centers == ["interior", "boundary"]
        assert len(report.rows) == 4

        for masked in (True, False):
            row = report.row(COMBINED, masked)
            assert row.sensitivity == row.precision == row.f1 == 1.0
            assert row.fpr == 0.0
            assert row.dice == pytest.approx(1.0)
            assert row.n_volumes == 4

    def test_model(self, interior, pretrained):
        report = fedtrain.evaluate_checkpoint(
            pretrained, [interior], descriptor=TINY, tile=24, model="m"
        )

        assert report.model == "m"
        assert report.strategy == "single"
        assert report.seed == 0
        assert len(report.rows) == 1 and len(report.combined) == 1

        row = report.row("interior")
        assert row.with_brain_mask
        assert 0 <= row.sensitivity <= 1
        assert row.n_volumes == 2

        with pytest.raises(KeyError):
            report.row("interior", with_brain_mask=False)

    def test_threads(self, interior, pretrained):
        a = fedtrain.evaluate_checkpoint(pretrained, [interior], tile=24, threads=1)
        b = fedtrain.evaluate_checkpoint(pretrained, [interior], tile=24, threads=2)
        assert a.to_dict() == b.to_dict()

    def test_architecture(self, interior, pretrained):
        with pytest.raises(ArchitectureMismatch) as info:
            fedtrain.evaluate_checkpoint(pretrained, [interior], descriptor=NetworkDescriptor())

        assert info.value.exit_code == 5

    def test_json(self, interior):
        report = fedtrain.evaluate_checkpoint(None, [interior], split="val")
        dic = json.loads(json.dumps(report.to_dict()))

        assert dic["split"] == "val"
        assert dic["rows"][0]["center"] == "interior"


class TestSignificance:
    def test_pairs(self, interior):
        report = fedtrain.evaluate_checkpoint(None, [interior])
        table = fedtrain.significance({"a": [report, report], "b": [report, report]})

        assert set(table["f1"]) == {("a", "a"), ("a", "b"), ("b", "b")}
        # identical constants are indistinguishable
        assert table["f1"][("a", "b")] == 1.0

    def test_single_repeat(self, interior):
        report = fedtrain.evaluate_checkpoint(None, [interior])
        table = fedtrain.significance({"a": [report], "b": [report]}, metrics=["f1"])
        assert table == {"f1": {("a", "a"): None, ("a", "b"): None, ("b", "b"): None}}


class TestExperiment:
    def test_check(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            centers = fedtrain.check_experiment(experiment(manifests, tmpdir))

        assert [name for name, _ in centers] == ["interior", "boundary"]
        assert centers[0][1] == manifests[0]

    def test_check_single(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(fedtrain.MissingTeacher):
                fedtrain.check_experiment(experiment(manifests[:1], tmpdir))

            with pytest.raises(fedtrain.TooFewCenters):
                exp = experiment(manifests[:1], tmpdir, strategies=("single", "tl"))
                fedtrain.check_experiment(exp)

            exp = experiment(manifests[:1], tmpdir, strategies=("single",))
            assert len(fedtrain.check_experiment(exp)) == 1

    def test_check_duplicates(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(ConfigError, match="unique"):
                fedtrain.check_experiment(experiment(manifests[:1] * 2, tmpdir))

    def test_check_single_center(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(ConfigError, match="single_center"):
                exp = experiment(manifests, tmpdir, single_center="nowhere")
                fedtrain.check_experiment(exp)

    def test_check_missing(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment([Path(tmpdir) / "none" / "manifest.json"], tmpdir)
            with pytest.raises(FileError):
                fedtrain.check_experiment(exp)

            exp = experiment(manifests, tmpdir, teacher_path=Path(tmpdir) / "none.mckp")
            with pytest.raises(FileError):
                fedtrain.check_experiment(exp)

    def test_check_repeats(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment(manifests, tmpdir, repeats=1)

            with pytest.raises(ConfigError, match="repeats") as info:
                fedtrain.check_experiment(exp)
            assert info.value.exit_code == 2

            with pytest.raises(ConfigError, match="repeats"):
                fedtrain.repeat_experiment(exp)

            with pytest.raises(ConfigError, match="repeats"):
                fedtrain.repeat_experiment(experiment(manifests, tmpdir), n_repeats=1)

            # nothing was trained
            assert not list(Path(tmpdir).iterdir())

    def test_check_teacher_architecture(self, manifests, pretrained):
        with tempfile.TemporaryDirectory() as tmpdir:
            teacher = fedtrain.write_checkpoint(pretrained, Path(tmpdir) / "t.mckp")
            exp = experiment(
                manifests,
                tmpdir,
                teacher_path=teacher,
                network=NetworkDescriptor(),
                train=tiny_config(infer_tile=None),
            )

            with pytest.raises(ArchitectureMismatch):
                fedtrain.check_experiment(exp)

    def test_manifest(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment(manifests, tmpdir, repeats=2)
            dic = fedtrain.experiment_manifest(exp, fedtrain.check_experiment(exp))

        assert dic["seeds"] == [0, 1]
        assert [c["name"] for c in dic["centers"]] == ["interior", "boundary"]
        assert all(len(c["sha256"]) == 64 for c in dic["centers"])
        assert dic["teacher_sha256"] is None
        json.dumps(dic)

    def test_run_strategy(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            run = fedtrain.run_strategy(experiment(manifests, tmpdir), "lwf", 1)

            assert run.directory == Path(tmpdir) / "lwf" / "repeat-1"
            assert run.checkpoint.exists()
            assert (run.directory / "hop-00-interior.mckp").exists()

        assert run.seed == 1
        assert run.report.strategy == "lwf"
        assert run.pretrained is not None
        assert run.pretrained.strategy == "single"

        forgetting = run.forgetting
        assert forgetting is not None and -1 <= forgetting <= 1

    def test_run_single(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            run = fedtrain.run_strategy(experiment(manifests, tmpdir), "single", 0)
            ckpt = read_checkpoint(run.checkpoint)

        # the single strategy trains the last center by default
        assert ckpt.centers == ["boundary"]
        assert run.pretrained is None and run.forgetting is None

    def test_repeat(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment(manifests, tmpdir, strategies=("single", "mixed"), repeats=2)
            res = fedtrain.repeat_experiment(exp)

        assert [(r.strategy, r.repeat) for r in res.runs] == [
            ("single", 0),
            ("mixed", 0),
            ("single", 1),
            ("mixed", 1),
        ]
        assert {s: len(r) for s, r in res.reports().items()} == {"single": 2, "mixed": 2}
        assert set(res.significance["f1"]) == {
            ("mixed", "mixed"),
            ("mixed", "single"),
            ("single", "single"),
        }
        assert res.forgetting() == {}

    @pytest.mark.slow
    def test_repeat_threads(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment(manifests, Path(tmpdir) / "serial", strategies=("single", "tl"))
            serial = fedtrain.repeat_experiment(exp)

            exp = experiment(manifests, Path(tmpdir) / "parallel", strategies=("single", "tl"))
            parallel = fedtrain.repeat_experiment(exp, threads=2)

        for a, b in zip(serial.runs, parallel.runs):
            assert a.strategy == b.strategy
            assert a.report.to_dict() == b.report.to_dict()

        assert np.isfinite(list(serial.forgetting()["tl"])).all()

    @pytest.mark.slow
    def test_rerun_identical(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            first = fedtrain.run_strategy(experiment(manifests, Path(tmpdir) / "a"), "lwf", 0)
            again = fedtrain.run_strategy(experiment(manifests, Path(tmpdir) / "b"), "lwf", 0)

            assert first.checkpoint.read_bytes() == again.checkpoint.read_bytes()

            a = report.write_metrics(first.report, first.directory)
            b = report.write_metrics(again.report, again.directory)
            assert a.read_bytes() == b.read_bytes()


def source_drift(ckpt, source, center) -> float:
    # mean absolute change of the foreground probabilities on the source test cases
    net = fedtrain.TinyNet(TINY)
    return float(
        np.mean(
            [
                np.abs(
                    predict_probabilities(net, ckpt.params, case.image.data, tile=24)
                    - predict_probabilities(net, source.params, case.image.data, tile=24)
                ).mean()
                for case in center.test
            ]
        )
    )


@pytest.mark.slow
class TestForgetting:
    # a single validation at the last epoch selects the final parameters
    budget = dict(lr=0.01, epochs=3, batches_per_epoch=4, validate_every=3)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_lwf_forgets_less(self, interior, boundary, seed):
        source = fedtrain.train_center(
            None, interior, tiny_config(seed=seed, **self.budget), descriptor=TINY
        )

        tl = fedtrain.train_center(
            source, boundary, tiny_config(seed=seed, strategy="tl", **self.budget), hop=1
        )
        lwf = fedtrain.train_center(
            source,
            boundary,
            tiny_config(seed=seed, strategy="lwf", lambda_lwf=5.0, **self.budget),
            teacher=source,
            hop=1,
        )

        assert lwf.params.distance(source.params) < tl.params.distance(source.params)
        assert source_drift(lwf, source, interior) < source_drift(tl, source, interior)

    def test_brain_mask_precision(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            exp = experiment(manifests, tmpdir, evaluation=EvalConfig(brackets=True))
            run = fedtrain.run_strategy(exp, "lwf", 0)

        rows = [(c, run.report.row(c), run.report.row(c, False)) for c in run.report.centers]
        rows.append((COMBINED, run.report.row(COMBINED), run.report.row(COMBINED, False)))

        for center, masked, unmasked in rows:
            # reference lesions lie inside the brain
            assert masked.sensitivity == unmasked.sensitivity, center

        _, masked, unmasked = rows[-1]
        assert masked.precision >= unmasked.precision

    def test_checkpoint_digests(self, manifests):
        with tempfile.TemporaryDirectory() as tmpdir:
            digests = []
            for name in ("a", "b"):
                exp = experiment(manifests, Path(tmpdir) / name)
                run = fedtrain.run_strategy(exp, "lwf", 0)
                digests.append(
                    {p.name: file_digest(p) for p in sorted(run.directory.glob("*.mckp"))}
                )

        assert len(digests[0]) >= 2
        assert digests[0] == digests[1]
