# -*- coding: utf-8 -*-

"""
Training and experiment configuration.

Both configurations are frozen dataclasses built from (merged) json
or yaml documents via from_dict. Unknown or mistyped fields are
rejected with a ConfigError naming the field.

"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import mclab
from mclab.collections import ConfigError, rconf, take
from mclab.tinynet import NetworkDescriptor

log = logging.getLogger(__name__)


STRATEGIES = ("single", "mixed", "tl", "lwf")
TOPOLOGIES = ("swt", "cwt")

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters of one training run.

    The defaults are desk-scale: 40 epochs per center with 50 batches
    of 16 segments each. Validation runs every validate_every epochs
    and after the last epoch.

    Parameters
    ----------
    epochs : int
        Epochs per center (per hop for protocols)
    batches_per_epoch : int
        Optimizer steps per epoch
    batch_size : int
        Segments per batch
    validate_every : int
        Validation interval in epochs
    lr : float
        Adam learning rate
    weight_decay : float
        Decoupled weight decay
    lambda_lwf : float
        Weight of the distillation term
    alpha_ss : float
        Sensitivity weight of the sensitivity-specificity loss
    p_tumor : float
        Probability of a lesion-centered segment
    kd_temperature : float
        Softening temperature of the distillation term
    seed : int
        Root seed for initialization and sampling
    strategy : str
        One of single, mixed, tl, lwf
    topology : str
        swt (one pass) or cwt (cycles passes)
    cycles : int
        Passes over all centers for cwt
    threshold : float
        Probability threshold for binary predictions
    infer_tile : int | None
        Input tile edge for whole-volume inference

    """

    epochs: int = 40
    batches_per_epoch: int = 50
    batch_size: int = 16
    validate_every: int = 2

    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_lwf: float = 0.1
    alpha_ss: float = 0.5
    p_tumor: float = 0.5
    kd_temperature: float = 2.0

    seed: int = 0
    strategy: str = "single"
    topology: str = "swt"
    cycles: int = 4

    threshold: float = 0.5
    infer_tile: int | None = 37

    def __post_init__(self):
        def check(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(f"train: field '{name}' {msg}")

        for name in ("epochs", "batches_per_epoch", "batch_size", "validate_every"):
            check(getattr(self, name) >= 1, name, "must be at least 1")

        check(self.lr > 0, "lr", "must be positive")
        check(self.weight_decay >= 0, "weight_decay", "must not be negative")
        check(self.lambda_lwf >= 0, "lambda_lwf", "must not be negative")
        check(0 <= self.alpha_ss <= 1, "alpha_ss", "must lie in [0, 1]")
        check(0 <= self.p_tumor <= 1, "p_tumor", "must lie in [0, 1]")
        check(self.kd_temperature > 0, "kd_temperature", "must be positive")
        check(0 <= self.seed < 2**64, "seed", "must be an unsigned 64 bit integer")
        check(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        check(self.topology in TOPOLOGIES, "topology", f"must be one of {TOPOLOGIES}")
        check(self.cycles >= 1, "cycles", "must be at least 1")
        check(0 < self.threshold < 1, "threshold", "must lie in (0, 1)")

    @property
    def passes(self) -> int:
        """Passes over the centers of a protocol."""
        return self.cycles if self.topology == "cwt" else 1

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, dic: dict[str, Any]) -> "TrainConfig":
        fields = {
            "epochs": int,
            "batches_per_epoch": int,
            "batch_size": int,
            "validate_every": int,
            "lr": float,
            "weight_decay": float,
            "lambda_lwf": float,
            "alpha_ss": float,
            "p_tumor": float,
            "kd_temperature": float,
            "seed": int,
            "strategy": str,
            "topology": str,
            "cycles": int,
            "threshold": float,
            "infer_tile": (int, type(None)),
        }

        return cls(**take(dic, fields, "train", defaults=cls().to_dict()))


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    tolerance_mm: float = 1.0
    with_brain_mask: bool = True
    brackets: bool = True

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"evaluation: field 'split' must be one of {SPLITS}")
        if self.tolerance_mm < 0:
            raise ConfigError("evaluation: field 'tolerance_mm' must not be negative")

    @classmethod
    def from_dict(cls, dic: dict[str, Any]) -> "EvalConfig":
        fields = {
            "split": str,
            "tolerance_mm": float,
            "with_brain_mask": bool,
            "brackets": bool,
        }
        defaults = dataclasses.asdict(cls())
        return cls(**take(dic, fields, "evaluation", defaults=defaults))


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A complete experiment.

    Center manifests and paths are resolved relative to the directory
    of the configuration file (or the working directory for configs
    built in memory).

    Parameters
    ----------
    name : str
        Experiment name
    centers : tuple[Path, ...]
        Center manifests in protocol order
    strategies : tuple[str, ...]
        Strategies to compare
    single_center : str | None
        Center trained by the single strategy, defaults to the last
    teacher_path : Path | None
        Pretrained checkpoint to start transfer protocols from
    repeats : int
        Each strategy is run with seeds seed, seed + 1, ...
    evaluate_pretrained : bool
        Also evaluate the first hop model to measure forgetting
    output_dir : Path
        Where runs are written

    """

    name: str
    centers: tuple[Path, ...]
    strategies: tuple[str, ...] = ("single", "tl", "lwf")
    single_center: str | None = None
    teacher_path: Path | None = None
    repeats: int = 1
    evaluate_pretrained: bool = True
    output_dir: Path = Path("runs")

    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkDescriptor = field(default_factory=NetworkDescriptor)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(Path(p) for p in self.centers))
        object.__setattr__(self, "strategies", tuple(self.strategies))

        if not self.centers:
            raise ConfigError(f"{self.name}: field 'centers' must not be empty")

        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown or not self.strategies:
            raise ConfigError(
                f"{self.name}: field 'strategies' must be a nonempty subset of {STRATEGIES}"
            )

        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError(f"{self.name}: field 'strategies' contains duplicates")

        if self.repeats < 1:
            raise ConfigError(f"{self.name}: field 'repeats' must be at least 1")

    @property
    def seeds(self) -> list[int]:
        return [self.train.seed + k for k in range(self.repeats)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=self.train.replace(seed=seed))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "centers": [str(p) for p in self.centers],
            "strategies": list(self.strategies),
            "single_center": self.single_center,
            "teacher_path": str(self.teacher_path) if self.teacher_path else None,
            "repeats": self.repeats,
            "evaluate_pretrained": self.evaluate_pretrained,
            "output_dir": str(self.output_dir),
            "train": self.train.to_dict(),
            "network": self.network.to_dict(),
            "evaluation": dataclasses.asdict(self.evaluation),
        }

    @classmethod
    def from_dict(
        cls,
        dic: dict[str, Any],
        root: Path | None = None,
    ) -> "ExperimentConfig":
        """
        Build from a parsed document.

        Parameters
        ----------
        dic : dict[str, Any]
            Parsed configuration
        root : Path | None
            Relative paths are resolved against it

        """
        fields = {
            "name": str,
            "centers": list,
            "strategies": list,
            "single_center": (str, type(None)),
            "teacher_path": (str, type(None)),
            "repeats": int,
            "evaluate_pretrained": bool,
            "output_dir": str,
            "train": dict,
            "network": dict,
            "evaluation": dict,
        }

        defaults = {
            "strategies": list(cls.strategies),
            "single_center": None,
            "teacher_path": None,
            "repeats": 1,
            "evaluate_pretrained": True,
            "output_dir": "runs",
            "train": {},
            "network": {},
            "evaluation": {},
        }

        kwargs = take(dic, fields, "experiment", defaults=defaults)
        root = root or Path.cwd()

        def resolve(p: str) -> Path:
            return Path(p) if Path(p).is_absolute() else root / p

        if not all(isinstance(p, str) for p in kwargs["centers"]):
            raise ConfigError("experiment: field 'centers' must contain paths")

        kwargs["centers"] = tuple(resolve(p) for p in kwargs["centers"])
        kwargs["output_dir"] = resolve(kwargs["output_dir"])
        if kwargs["teacher_path"] is not None:
            kwargs["teacher_path"] = resolve(kwargs["teacher_path"])

        kwargs["train"] = TrainConfig.from_dict(kwargs["train"])
        kwargs["network"] = NetworkDescriptor.from_dict(kwargs["network"])
        kwargs["evaluation"] = EvalConfig.from_dict(kwargs["evaluation"])

        return cls(**kwargs)


def load_experiment(
    *files: str | Path,
    root: Path | None = None,
    **overwrites,
) -> ExperimentConfig:
    """
    Read an experiment from json or yaml files.

    Relative paths are resolved against root, or the directory of the
    last file. MCLAB_SEED replaces the configured seed.

    """
    dic = rconf(*files, **overwrites)
    if root is None and files:
        root = Path(files[-1]).parent

    seed = mclab.seed_override()

    if seed is not None and isinstance(dic.get("train", {}), dict):
        log.info(f"config: seed overridden by {mclab.ENV_SEED}={seed}")
        dic["train"] = dic.get("train", {}) | {"seed": seed}

    return ExperimentConfig.from_dict(dic, root=root)
