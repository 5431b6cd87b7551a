# -*- coding: utf-8 -*-

import json
import tempfile
from pathlib import Path

import pytest
import yaml

import mclab
from mclab.collections import ConfigError
from mclab.config import EvalConfig, ExperimentConfig, TrainConfig, load_experiment
from mclab.tinynet import NetworkDescriptor

from .conftest import TINY

PRESETS = Path(__file__).parents[2] / "conf" / "presets"


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.passes == 1
        assert cfg.replace(topology="cwt", cycles=3).passes == 3

    @pytest.mark.parametrize(
        "field, value",
        [
            ("epochs", 0),
            ("lr", 0.0),
            ("lambda_lwf", -0.1),
            ("p_tumor", 1.5),
            ("alpha_ss", -1.0),
            ("strategy", "ewc"),
            ("topology", "ring"),
            ("threshold", 1.0),
            ("seed", -1),
        ],
    )
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError, match=f"'{field}'"):
            TrainConfig(**{field: value})

    def test_from_dict(self):
        cfg = TrainConfig.from_dict({"lr": 1, "epochs": 3, "infer_tile": None})
        assert cfg.lr == 1.0 and isinstance(cfg.lr, float)
        assert cfg.epochs == 3
        assert cfg.infer_tile is None
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_types(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig.from_dict({"epochs": "3"})

        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig.from_dict({"epochs": True})

        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"epoch": 3})


class TestEvalConfig:
    def test_defaults(self):
        assert EvalConfig.from_dict({}) == EvalConfig()

    def test_invalid(self):
        with pytest.raises(ConfigError, match="split"):
            EvalConfig(split="dev")

        with pytest.raises(ConfigError, match="tolerance_mm"):
            EvalConfig.from_dict({"tolerance_mm": -1})


class TestExperimentConfig:
    def test_resolve(self):
        root = Path("/data/exp")
        cfg = ExperimentConfig.from_dict(
            {
                "name": "x",
                "centers": ["a/manifest.json", "/abs/manifest.json"],
                "teacher_path": "teacher.ckpt",
                "network": TINY.to_dict(),
            },
            root=root,
        )

        assert cfg.centers == (root / "a/manifest.json", Path("/abs/manifest.json"))
        assert cfg.teacher_path == root / "teacher.ckpt"
        assert cfg.output_dir == root / "runs"
        assert cfg.network == TINY

    def test_seeds(self):
        cfg = ExperimentConfig(
            name="x", centers=("a",), repeats=3, train=TrainConfig(seed=5)
        )
        assert cfg.seeds == [5, 6, 7]
        assert cfg.with_seed(9).train.seed == 9

    def test_roundtrip(self):
        cfg = ExperimentConfig(
            name="x", centers=("/a", "/b"), network=TINY, output_dir=Path("/out")
        )
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            ({"centers": ()}, "centers"),
            ({"strategies": ("tl", "ewc")}, "strategies"),
            ({"strategies": ()}, "strategies"),
            ({"strategies": ("tl", "tl")}, "strategies"),
            ({"repeats": 0}, "repeats"),
        ],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ConfigError, match=field):
            ExperimentConfig(**({"name": "x", "centers": ("a",)} | kwargs))

    def test_missing_name(self):
        with pytest.raises(ConfigError, match="name"):
            ExperimentConfig.from_dict({"centers": ["a"]})

    def test_centers_paths(self):
        with pytest.raises(ConfigError, match="centers"):
            ExperimentConfig.from_dict({"name": "x", "centers": [1, 2]})

    def test_nested_error(self):
        with pytest.raises(ConfigError, match="network"):
            ExperimentConfig.from_dict(
                {"name": "x", "centers": ["a"], "network": {"input_size": 20}}
            )


class TestLoadExperiment:
    def test_yaml(self, monkeypatch):
        monkeypatch.delenv(mclab.ENV_SEED, raising=False)

        with tempfile.TemporaryDirectory() as tmpdir:
            fname = Path(tmpdir) / "exp.yaml"
            fname.write_text(yaml.dump({"name": "x", "centers": ["c/manifest.json"]}))

            cfg = load_experiment(fname, repeats=2)

        assert cfg.centers == (Path(tmpdir) / "c/manifest.json",)
        assert cfg.repeats == 2
        assert cfg.train.seed == 0

    def test_seed_override(self, monkeypatch):
        monkeypatch.setenv(mclab.ENV_SEED, "17")

        with tempfile.TemporaryDirectory() as tmpdir:
            fname = Path(tmpdir) / "exp.json"
            fname.write_text(json.dumps({"name": "x", "centers": ["a"], "train": {"seed": 3}}))

            assert load_experiment(fname).train.seed == 17

    def test_seed_invalid(self, monkeypatch):
        monkeypatch.setenv(mclab.ENV_SEED, "seventeen")

        with tempfile.TemporaryDirectory() as tmpdir:
            fname = Path(tmpdir) / "exp.json"
            fname.write_text(json.dumps({"name": "x", "centers": ["a"]}))

            with pytest.raises(ConfigError, match=mclab.ENV_SEED) as info:
                load_experiment(fname)

        assert info.value.exit_code == 2

    @pytest.mark.parametrize("raw", ["seventeen", "-1", "1.5"])
    def test_seed_override_error(self, monkeypatch, raw):
        monkeypatch.setenv(mclab.ENV_SEED, raw)

        with pytest.raises(ConfigError) as info:
            mclab.seed_override()

        assert info.value.exit_code == 2

    def test_presets(self, monkeypatch):
        monkeypatch.delenv(mclab.ENV_SEED, raising=False)

        presets = sorted(PRESETS.glob("*.json"))
        assert presets

        for fname in presets:
            cfg = load_experiment(fname)
            assert len(cfg.centers) >= 2
            assert cfg.network == NetworkDescriptor()
