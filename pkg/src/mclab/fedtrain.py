# -*- coding: utf-8 -*-

"""
Training strategies across centers.

Supported are single-center training, mixed (pooled) training, naive
transfer learning and learning without forgetting (LWF), the latter
two along single (SWT) or cyclic (CWT) weight transfer protocols.

Centers never exchange data: a protocol passes checkpoint files from
one :class:`Site` to the next and every dataset access is recorded in
a :class:`PrivacyAudit`.

"""

import logging
import tempfile
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

import mclab
from mclab import lesioneval
from mclab.checkpoint import (
    Checkpoint,
    ProvenanceEntry,
    ValidationPoint,
    read_checkpoint,
    write_checkpoint,
)
from mclab.collections import ConfigError, buckets
from mclab.config import ExperimentConfig, TrainConfig
from mclab.filesystem import file_digest, path
from mclab.lesioneval import CaseEvaluation, MetricsRow
from mclab.parallel import pmap
from mclab.sampler import SegmentSampler
from mclab.synthcenter import CenterDataset, load_center, read_manifest
from mclab.tinynet import (
    NetworkDescriptor,
    OptimizerState,
    ParamSet,
    TinyNet,
    adam_step,
    lwf_loss,
    sliding_window_infer,
)
from mclab.volgrid import CaseRecord

log = logging.getLogger(__name__)


class TrainingError(mclab.Error):
    exit_code = 4


class EmptyTrainSplit(TrainingError):
    pass


class MissingTeacher(ConfigError):
    pass


class TooFewCenters(ConfigError):
    pass


COMBINED = "combined"

# used to derive the initialization seed
_INIT_TAG = zlib.crc32(b"init")


def _tag(name: str) -> int:
    return zlib.crc32(name.encode())


def sampling_rng(seed: int, run: str, hop: int = 0) -> np.random.Generator:
    """Generator for segment sampling of one hop of a run."""
    return np.random.default_rng(np.random.SeedSequence([seed, _tag(run), hop]))


def init_params(net: TinyNet, seed: int) -> ParamSet:
    return net.init(np.random.default_rng(np.random.SeedSequence([seed, _INIT_TAG])))


def _check_tile(cfg: TrainConfig, descriptor: NetworkDescriptor):
    if cfg.infer_tile is not None and not descriptor.valid_size(cfg.infer_tile):
        raise ConfigError(
            f"train: field 'infer_tile' {cfg.infer_tile} is invalid for the network"
        )


# --- validation


def validation_dice(
    net: TinyNet,
    params: ParamSet,
    cases: Sequence[CaseRecord],
    cfg: TrainConfig,
) -> float:
    """Mean volumetric Dice over whole-volume predictions."""
    scores = []
    for case in cases:
        mask, _ = sliding_window_infer(
            net, params, case, threshold=cfg.threshold, tile=cfg.infer_tile
        )
        scores.append(lesioneval.volumetric_dice(mask, case.label))

    return float(np.mean(scores))


# --- single runs


def _strategy(cfg: TrainConfig, teacher: Checkpoint | None) -> str:
    # lwf without distillation is naive transfer learning
    if cfg.strategy == "lwf" and teacher is not None and cfg.lambda_lwf == 0:
        return "tl"
    return cfg.strategy


def _train(
    pool: list[tuple[int, CaseRecord]],
    val: Sequence[CaseRecord],
    run: str,
    cfg: TrainConfig,
    descriptor: NetworkDescriptor,
    init: Checkpoint | None,
    teacher: Checkpoint | None,
    hop: int,
) -> Checkpoint:
    net = TinyNet(descriptor)
    _check_tile(cfg, descriptor)

    if not pool:
        raise EmptyTrainSplit(f"fedtrain: '{run}' has no training cases")

    if init is not None:
        init.check(descriptor)
        params = init.params.copy()
    else:
        params = init_params(net, cfg.seed)

    teacher_params = None
    if teacher is not None:
        teacher.check(descriptor)
        teacher_params = teacher.params.frozen()

    strategy = _strategy(cfg, teacher)
    sampler = SegmentSampler(pool, descriptor.input_size, descriptor.output_size)
    state = OptimizerState.fresh(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = sampling_rng(cfg.seed, run, hop)

    log.info(
        f"fedtrain: training '{run}' ({strategy}, hop {hop}, seed {cfg.seed})"
        f" for {cfg.epochs} epochs on {len(pool)} cases"
    )

    best: tuple[int, ParamSet] | None = None
    best_dice = -1.0
    trajectory: list[ValidationPoint] = []

    if not val:
        log.warning(f"fedtrain: '{run}' has no validation cases, keeping the last epoch")

    epochs = tqdm(
        range(1, cfg.epochs + 1),
        desc=f"{run} ({strategy})",
        unit="epoch",
        disable=mclab.console.quiet,
        leave=False,
    )

    for epoch in epochs:
        losses = []
        for _ in range(cfg.batches_per_epoch):
            batch = sampler.sample(cfg.batch_size, cfg.p_tumor, rng)

            params.zero_grad()
            loss = lwf_loss(
                net,
                params,
                teacher_params,
                batch.patches,
                batch.targets,
                lam=cfg.lambda_lwf,
                alpha=cfg.alpha_ss,
                temperature=cfg.kd_temperature,
            )

            if not np.isfinite(loss.item()):
                raise TrainingError(f"fedtrain: '{run}' diverged in epoch {epoch}")

            loss.backward()
            adam_step(params, params.grads(), state)
            losses.append(loss.item())

        log.debug(f"fedtrain: '{run}' epoch {epoch} mean loss {np.mean(losses):.5f}")

        last = epoch == cfg.epochs
        if not val:
            if last:
                best = epoch, params.rounded()
            continue

        if epoch % cfg.validate_every and not last:
            continue

        dice = validation_dice(net, params, val, cfg)
        trajectory.append(ValidationPoint(center=run, epoch=epoch, dice=dice))
        log.info(f"fedtrain: '{run}' epoch {epoch} validation dice {dice:.4f}")

        # ties keep the earlier epoch
        if dice > best_dice:
            best, best_dice = (epoch, params.rounded()), dice

    assert best is not None
    best_epoch, best_params = best

    provenance = tuple(
        ProvenanceEntry(center=run, strategy=strategy, seed=cfg.seed, epoch=epoch)
        for epoch in range(1, best_epoch + 1)
    )

    log.info(
        f"fedtrain: '{run}' selected epoch {best_epoch}"
        f" with validation dice {max(best_dice, 0.0):.4f}"
    )

    return Checkpoint(
        params=best_params,
        descriptor=descriptor,
        provenance=(init.provenance if init else ()) + provenance,
        best_val_dice=max(best_dice, 0.0),
        trajectory=(init.trajectory if init else ()) + tuple(trajectory),
    )


def train_center(
    init: Checkpoint | None,
    center: CenterDataset,
    cfg: TrainConfig,
    teacher: Checkpoint | None = None,
    descriptor: NetworkDescriptor | None = None,
    hop: int = 0,
) -> Checkpoint:
    """
    Train on the training split of one center.

    Parameters
    ----------
    init : Checkpoint | None
        Starting point, a fresh network if None
    center : CenterDataset
        The local data
    cfg : TrainConfig
        Hyperparameters, cfg.strategy selects the loss
    teacher : Checkpoint | None
        Frozen model to distill from, required for lwf
    descriptor : NetworkDescriptor | None
        Architecture, defaults to the one of init
    hop : int
        Position within a protocol, part of the sampling seed

    Returns
    -------
    Checkpoint
        The snapshot with the best validation Dice

    Raises
    ------
    MissingTeacher
        For lwf without teacher
    EmptyTrainSplit
        If the center has no training cases
    ArchitectureMismatch
        If init or teacher belong to another network

    """
    if cfg.strategy == "lwf" and teacher is None:
        raise MissingTeacher("fedtrain: strategy 'lwf' requires a teacher checkpoint")

    if cfg.strategy != "lwf" and teacher is not None:
        log.info(f"fedtrain: strategy '{cfg.strategy}' ignores the teacher")
        teacher = None

    if descriptor is None:
        descriptor = init.descriptor if init else NetworkDescriptor()

    pool = [(0, case) for case in center.train]
    return _train(pool, center.val, center.name, cfg, descriptor, init, teacher, hop)


def mixed_name(centers: Sequence[CenterDataset]) -> str:
    return "+".join(center.name for center in centers)


def train_mixed(
    centers: Sequence[CenterDataset],
    cfg: TrainConfig,
    descriptor: NetworkDescriptor | None = None,
) -> Checkpoint:
    """
    Train one model on the pooled data of several centers.

    Segments draw their source case uniformly from the union of all
    training splits; validation uses the union of the validation
    splits. The training budget equals the one of a single run.

    Raises
    ------
    EmptyTrainSplit
        If no center has training cases

    """
    if len(centers) < 2:
        log.warning("fedtrain: mixed training with a single center")

    pool = [(i, case) for i, center in enumerate(centers) for case in center.train]
    val = [case for center in centers for case in center.val]

    cfg = cfg.replace(strategy="mixed")
    descriptor = descriptor or NetworkDescriptor()

    return _train(pool, val, mixed_name(centers), cfg, descriptor, None, None, 0)


# --- protocols


@dataclass(frozen=True)
class AuditEntry:
    hop: int
    site: str
    source: str


@dataclass
class PrivacyAudit:
    """Dataset sources touched per hop."""

    entries: list[AuditEntry] = field(default_factory=list)

    def record(self, hop: int, site: str, source: str):
        log.info(f"audit: hop {hop} site '{site}' accessed {source}")
        self.entries.append(AuditEntry(hop=hop, site=site, source=source))

    def sources(self, site: str) -> set[str]:
        return {e.source for e in self.entries if e.site == site}

    def violations(self) -> list[AuditEntry]:
        """Accesses of a source also touched by another site or within another site's hop."""
        owner: dict[str, str] = {}
        hop_site: dict[int, str] = {}
        bad = []

        for entry in self.entries:
            owner.setdefault(entry.source, entry.site)
            hop_site.setdefault(entry.hop, entry.site)

            if owner[entry.source] != entry.site or hop_site[entry.hop] != entry.site:
                bad.append(entry)

        return bad

    def to_list(self) -> list[dict[str, Any]]:
        return [vars(entry) for entry in self.entries]


def hop_path(workdir: Path, hop: int, site: str) -> Path:
    return workdir / f"hop-{hop:02d}-{site}.mckp"


class Site:
    """
    One center's side of a weight transfer protocol.

    A site owns its dataset and only exchanges checkpoint files. The
    dataset is loaded lazily on the first hop.

    Parameters
    ----------
    manifest : Path | None
        Manifest of the local center
    dataset : CenterDataset | None
        In-memory alternative to a manifest
    audit : PrivacyAudit | None
        Shared audit log

    """

    def __init__(
        self,
        manifest: Path | None = None,
        dataset: CenterDataset | None = None,
        audit: PrivacyAudit | None = None,
    ):
        assert (manifest is None) != (dataset is None), "pass a manifest or a dataset"

        self._manifest = manifest
        self._dataset = dataset
        self.audit = audit if audit is not None else PrivacyAudit()

        if dataset is not None:
            self.name = dataset.name
        else:
            self.name = read_manifest(manifest)["name"]

    @property
    def source(self) -> str:
        if self._dataset is not None:
            if self._dataset.source is not None:
                return str(self._dataset.source)
            return f"memory:{self.name}"
        return str(self._manifest)

    def _load(self, hop: int) -> CenterDataset:
        self.audit.record(hop, self.name, self.source)
        if self._dataset is None:
            self._dataset = load_center(self._manifest)
        return self._dataset

    def train(
        self,
        arriving: Path | None,
        cfg: TrainConfig,
        workdir: Path,
        hop: int,
        descriptor: NetworkDescriptor | None = None,
    ) -> Path:
        """
        Train one hop and write the outgoing checkpoint.

        Without arriving checkpoint the site trains from scratch with
        the segmentation loss only. With lwf the arriving model is the
        teacher of this hop.

        Returns
        -------
        Path
            The written checkpoint

        """
        init = read_checkpoint(arriving) if arriving else None
        digest = file_digest(arriving) if arriving else None

        if init is None:
            cfg = cfg.replace(strategy="single")

        teacher = init if cfg.strategy == "lwf" else None
        dataset = self._load(hop)

        ckpt = train_center(init, dataset, cfg, teacher, descriptor=descriptor, hop=hop)

        if arriving:
            assert file_digest(arriving) == digest, "teacher checkpoint was modified"

        return write_checkpoint(ckpt, hop_path(workdir, hop, self.name))


@dataclass(frozen=True)
class ProtocolRun:
    checkpoint: Checkpoint
    hops: tuple[Path, ...]
    audit: PrivacyAudit


def run_protocol(
    sites: Sequence[Site | CenterDataset],
    cfg: TrainConfig,
    workdir: Path | str | None = None,
    initial: Path | None = None,
    descriptor: NetworkDescriptor | None = None,
) -> ProtocolRun:
    """
    Pass a model along the centers.

    SWT visits every center once in the given order, CWT repeats the
    pass cfg.cycles times. Each hop carries the best-validation
    snapshot of the previous hop forward.

    Parameters
    ----------
    sites : Sequence[Site | CenterDataset]
        Centers in protocol order
    cfg : TrainConfig
        cfg.strategy is tl or lwf, cfg.topology selects the protocol
    workdir : Path | str | None
        Hop checkpoints are written here; with None they are written to
        a temporary directory and the returned hop paths are stale
    initial : Path | None
        Pretrained checkpoint arriving at the first site

    Raises
    ------
    TooFewCenters
        With fewer than two centers and no initial checkpoint

    """
    if len(sites) < 2 and initial is None:
        raise TooFewCenters(
            f"fedtrain: a protocol needs at least two centers, got {len(sites)}"
        )

    if cfg.strategy not in ("tl", "lwf"):
        raise ConfigError(f"fedtrain: protocols transfer with tl or lwf, not '{cfg.strategy}'")

    audit = PrivacyAudit()
    sites = [
        site if isinstance(site, Site) else Site(dataset=site, audit=audit)
        for site in sites
    ]
    for site in sites:
        site.audit = audit

    if workdir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return _run_protocol(sites, cfg, Path(tmp), initial, descriptor, audit)

    workdir = path(workdir, create=True)
    return _run_protocol(sites, cfg, workdir, initial, descriptor, audit)


def _run_protocol(
    sites: list[Site],
    cfg: TrainConfig,
    workdir: Path,
    initial: Path | None,
    descriptor: NetworkDescriptor | None,
    audit: PrivacyAudit,
) -> ProtocolRun:
    log.info(
        f"fedtrain: {cfg.topology} protocol ({cfg.strategy}) over"
        f" {[s.name for s in sites]} with {cfg.passes} pass(es)"
    )

    hops: list[Path] = []
    arriving = initial

    for _ in range(cfg.passes):
        for site in sites:
            hop = len(hops)
            arriving = site.train(arriving, cfg, workdir, hop, descriptor=descriptor)
            hops.append(arriving)

    assert arriving is not None
    ckpt = read_checkpoint(arriving)

    bad = audit.violations()
    if bad:
        raise TrainingError(f"fedtrain: cross-center data access: {bad}")

    return ProtocolRun(checkpoint=ckpt, hops=tuple(hops), audit=audit)


# --- evaluation


@dataclass(frozen=True)
class MetricsReport:
    """
    Metric rows of one model.

    rows holds (center, row) pairs for every evaluated center and
    filtering mode, combined the rows pooled over all centers.

    """

    model: str
    strategy: str
    seed: int | None
    split: str
    tolerance_mm: float
    rows: tuple[tuple[str, MetricsRow], ...]
    combined: tuple[MetricsRow, ...]

    @property
    def centers(self) -> list[str]:
        return list(dict.fromkeys(center for center, _ in self.rows))

    def row(self, center: str, with_brain_mask: bool = True) -> MetricsRow:
        candidates = self.combined if center == COMBINED else [
            row for name, row in self.rows if name == center
        ]

        for row in candidates:
            if row.with_brain_mask == with_brain_mask:
                return row

        raise KeyError(f"no row for {center} (brain mask: {with_brain_mask})")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "strategy": self.strategy,
            "seed": self.seed,
            "split": self.split,
            "tolerance_mm": self.tolerance_mm,
            "rows": [{"center": c} | row.to_dict() for c, row in self.rows],
            "combined": [row.to_dict() for row in self.combined],
        }


@dataclass(frozen=True)
class _EvalJob:
    descriptor: NetworkDescriptor | None
    arrays: dict[str, np.ndarray] | None
    case: CaseRecord
    threshold: float
    tile: int | None
    tolerance_mm: float
    modes: tuple[bool, ...]


def _evaluate_job(job: _EvalJob) -> dict[bool, CaseEvaluation]:
    case = job.case

    if job.arrays is None:
        pred = case.label
    else:
        net = TinyNet(job.descriptor)
        params = ParamSet.from_arrays(job.arrays, requires_grad=False)
        pred, _ = sliding_window_infer(
            net, params, case, threshold=job.threshold, tile=job.tile
        )

    return {
        masked: lesioneval.evaluate_case(
            case.case_id,
            pred,
            case.label,
            brain=case.brain_mask if masked else None,
            tolerance_mm=job.tolerance_mm,
        )
        for masked in job.modes
    }


def _strategy_of(ckpt: Checkpoint | None) -> str:
    if ckpt is None:
        return "oracle"
    if not ckpt.provenance:
        return "untrained"
    return ckpt.provenance[-1].strategy


def evaluate_checkpoint(
    ckpt: Checkpoint | None,
    centers: Sequence[CenterDataset],
    split: str = "test",
    tolerance_mm: float = 1.0,
    with_brain_mask: bool = True,
    brackets: bool = False,
    descriptor: NetworkDescriptor | None = None,
    threshold: float = 0.5,
    tile: int | None = None,
    threads: int = 1,
    model: str = "model",
) -> MetricsReport:
    """
    Evaluate a model on the given split of several centers.

    Predictions are computed once per case. With brackets, rows with
    and without brain-mask filtering are both reported.

    Parameters
    ----------
    ckpt : Checkpoint | None
        The model; None evaluates an oracle predicting the labels
    centers : Sequence[CenterDataset]
        Evaluated centers, the model may never have seen them
    descriptor : NetworkDescriptor | None
        Expected architecture, checked against the checkpoint
    threads : int
        Cases are evaluated by this many processes

    Raises
    ------
    ArchitectureMismatch
        If the checkpoint does not fit the expected architecture

    """
    if ckpt is not None and descriptor is not None:
        ckpt.check(descriptor)

    modes = (True, False) if brackets else (with_brain_mask,)

    jobs, owners = [], []
    for center in centers:
        for case in center.split(split):
            jobs.append(
                _EvalJob(
                    descriptor=ckpt.descriptor if ckpt else None,
                    arrays=ckpt.params.arrays() if ckpt else None,
                    case=case,
                    threshold=threshold,
                    tile=tile,
                    tolerance_mm=tolerance_mm,
                    modes=modes,
                )
            )
            owners.append(center.name)

    log.info(f"fedtrain: evaluating '{model}' on {len(jobs)} {split} cases")
    results = pmap(_evaluate_job, jobs, threads=threads)

    rows = []
    for center in centers:
        for masked in modes:
            evals = [r[masked] for r, o in zip(results, owners) if o == center.name]
            rows.append((center.name, lesioneval.summarize(evals, masked)))

    combined = tuple(
        lesioneval.summarize([r[masked] for r in results], masked) for masked in modes
    )

    return MetricsReport(
        model=model,
        strategy=_strategy_of(ckpt),
        seed=ckpt.provenance[-1].seed if ckpt and ckpt.provenance else None,
        split=split,
        tolerance_mm=tolerance_mm,
        rows=tuple(rows),
        combined=combined,
    )


# --- sweeps


def lambda_sweep(
    init: Checkpoint,
    center: CenterDataset,
    cfg: TrainConfig,
    teacher: Checkpoint,
    lambdas: Sequence[float],
) -> list[tuple[float, float]]:
    """
    Parameter update norm of one LWF hop per distillation weight.

    Every hop starts from the same init with the same seed.

    Returns
    -------
    list[tuple[float, float]]
        (lambda, norm of the parameter change) pairs

    """
    res = []
    for lam in lambdas:
        ckpt = train_center(init, center, cfg.replace(strategy="lwf", lambda_lwf=lam), teacher)
        norm = ckpt.params.distance(init.params)
        log.info(f"fedtrain: lambda {lam} moved parameters by {norm:.5f}")
        res.append((lam, norm))

    return res


def data_amount_sweep(
    center: CenterDataset,
    cfg: TrainConfig,
    amounts: Sequence[int],
    descriptor: NetworkDescriptor | None = None,
) -> list[tuple[int, float]]:
    """Best validation Dice of single-center training on the first n cases."""
    res = []
    for n in amounts:
        subset = center.subset(n)
        ckpt = train_center(None, subset, cfg.replace(strategy="single"), descriptor=descriptor)
        res.append((len(subset.train), ckpt.best_val_dice))

    return res


# --- experiments


@dataclass(frozen=True)
class RunResult:
    """One trained model of an experiment."""

    strategy: str
    repeat: int
    seed: int
    directory: Path
    checkpoint: Path
    report: MetricsReport
    pretrained: MetricsReport | None = None

    @property
    def forgetting(self) -> float | None:
        """F1 drop on the source center relative to the first hop model."""
        if self.pretrained is None:
            return None

        source = self.pretrained.centers[0]
        before = self.pretrained.row(source).f1
        return before - self.report.row(source).f1


def significance(
    reports: dict[str, list[MetricsReport]],
    metrics: Sequence[str] = ("sensitivity", "precision", "fpr", "f1", "f2", "sdice", "hd95_mm"),
    center: str = COMBINED,
    with_brain_mask: bool = True,
) -> dict[str, dict[tuple[str, str], float | None]]:
    """
    Pairwise unpaired t-test p-values between strategies.

    Strategies are also compared to themselves. Pairs with fewer than
    two repeats on either side or undefined metrics get None.

    """
    table: dict[str, dict[tuple[str, str], float | None]] = {}
    for metric in metrics:
        table[metric] = {}
        for a, b in combinations_with_replacement(sorted(reports), 2):
            xs = [getattr(r.row(center, with_brain_mask), metric) for r in reports[a]]
            ys = [getattr(r.row(center, with_brain_mask), metric) for r in reports[b]]

            p = None
            if None not in xs and None not in ys:
                try:
                    _, p = lesioneval.unpaired_t_test(xs, ys)
                except lesioneval.TooFewSamples:
                    p = None

            table[metric][(a, b)] = p

    return table


@dataclass(frozen=True)
class ExperimentResult:
    runs: tuple[RunResult, ...]
    significance: dict[str, dict[tuple[str, str], float | None]]

    def reports(self) -> dict[str, list[MetricsReport]]:
        return _by_strategy(self.runs)

    def forgetting(self) -> dict[str, list[float]]:
        res: dict[str, list[float]] = {}
        for run in self.runs:
            if run.forgetting is not None:
                res.setdefault(run.strategy, []).append(run.forgetting)
        return res


def _single_center(exp: ExperimentConfig, centers: list[CenterDataset]) -> CenterDataset:
    if exp.single_center is None:
        return centers[-1]

    for center in centers:
        if center.name == exp.single_center:
            return center

    raise ConfigError(f"{exp.name}: unknown single_center '{exp.single_center}'")


def _check_repeats(name: str, n: int):
    # the t-test comparison needs two runs per strategy
    if n < 2:
        raise ConfigError(f"{name}: at least two repeats are required (got {n})")


def check_experiment(exp: ExperimentConfig) -> list[tuple[str, Path]]:
    """
    Validate the references of an experiment without training.

    Returns
    -------
    list[tuple[str, Path]]
        Center names with their manifest files, in protocol order

    Raises
    ------
    FileError
        For missing manifests or teacher checkpoints
    MissingTeacher
        For lwf on a single center without teacher_path
    TooFewCenters
        For tl on a single center without teacher_path
    ArchitectureMismatch
        If the teacher belongs to another network
    ConfigError
        For fewer than two repeats

    """
    centers = []
    for manifest in exp.centers:
        dic = read_manifest(manifest)
        centers.append((dic["name"], dic["__path__"]))

    names = [name for name, _ in centers]
    if len(set(names)) != len(names):
        raise ConfigError(f"{exp.name}: center names are not unique: {names}")

    if exp.single_center is not None and exp.single_center not in names:
        raise ConfigError(f"{exp.name}: unknown single_center '{exp.single_center}'")

    if len(centers) < 2 and exp.teacher_path is None:
        if "lwf" in exp.strategies:
            raise MissingTeacher(f"{exp.name}: lwf on a single center requires 'teacher_path'")
        if "tl" in exp.strategies:
            raise TooFewCenters(f"{exp.name}: tl on a single center requires 'teacher_path'")

    if exp.teacher_path is not None:
        read_checkpoint(exp.teacher_path).check(exp.network)

    _check_repeats(exp.name, exp.repeats)
    _check_tile(exp.train, exp.network)
    return centers


def experiment_manifest(exp: ExperimentConfig, centers: list[tuple[str, Path]]) -> dict[str, Any]:
    """Everything needed to re-run an experiment."""
    return {
        "tool": "mclab",
        "version": mclab.__version__,
        "config": exp.to_dict(),
        "centers": [
            {"name": name, "manifest": str(manifest), "sha256": file_digest(manifest)}
            for name, manifest in centers
        ],
        "teacher_sha256": file_digest(exp.teacher_path) if exp.teacher_path else None,
        "seeds": exp.seeds,
        "output_dir": str(exp.output_dir),
    }


def run_strategy(
    exp: ExperimentConfig,
    strategy: str,
    repeat: int,
    threads: int = 1,
) -> RunResult:
    """
    Train and evaluate one strategy for one repeat.

    The run is written to <output_dir>/<strategy>/repeat-<k>/.

    """
    seed = exp.train.seed + repeat
    cfg = exp.train.replace(strategy=strategy, seed=seed)

    directory = path(exp.output_dir / strategy / f"repeat-{repeat}", create=True)

    centers = [load_center(manifest) for manifest in exp.centers]
    pretrained_ckpt = None

    if strategy == "single":
        ckpt = train_center(None, _single_center(exp, centers), cfg, descriptor=exp.network)

    elif strategy == "mixed":
        ckpt = train_mixed(centers, cfg, descriptor=exp.network)

    else:
        if exp.teacher_path is None and len(exp.centers) < 2:
            if strategy == "lwf":
                raise MissingTeacher(
                    f"{exp.name}: lwf on a single center requires 'teacher_path'"
                )
            raise TooFewCenters(f"{exp.name}: tl on a single center requires 'teacher_path'")

        sites = [Site(manifest=manifest) for manifest in exp.centers]
        run = run_protocol(
            sites,
            cfg,
            workdir=directory,
            initial=exp.teacher_path,
            descriptor=exp.network,
        )

        ckpt = run.checkpoint
        if exp.evaluate_pretrained:
            pretrained_ckpt = read_checkpoint(exp.teacher_path or run.hops[0])

    target = write_checkpoint(ckpt, directory / "model.mckp")

    ev = exp.evaluation
    kwargs = dict(
        split=ev.split,
        tolerance_mm=ev.tolerance_mm,
        with_brain_mask=ev.with_brain_mask,
        brackets=ev.brackets,
        descriptor=exp.network,
        threshold=cfg.threshold,
        tile=cfg.infer_tile,
        threads=threads,
    )

    report = evaluate_checkpoint(ckpt, centers, model=f"{strategy}/repeat-{repeat}", **kwargs)

    pretrained = None
    if pretrained_ckpt is not None:
        pretrained = evaluate_checkpoint(
            pretrained_ckpt, centers, model=f"{strategy}/repeat-{repeat}/pretrained", **kwargs
        )

    return RunResult(
        strategy=strategy,
        repeat=repeat,
        seed=seed,
        directory=directory,
        checkpoint=target,
        report=report,
        pretrained=pretrained,
    )


def _run_job(args: tuple[ExperimentConfig, str, int]) -> RunResult:
    exp, strategy, repeat = args
    return run_strategy(exp, strategy, repeat)


def _by_strategy(runs: Sequence[RunResult]) -> dict[str, list[MetricsReport]]:
    return buckets(runs, key=lambda _, run: (run.strategy, run.report))


def repeat_experiment(
    exp: ExperimentConfig,
    n_repeats: int | None = None,
    threads: int = 1,
) -> ExperimentResult:
    """
    Run every strategy of an experiment repeatedly.

    Repeat k uses seed + k. Independent runs are distributed over
    threads processes (or, for a single run, its evaluation); results
    do not depend on it.

    Parameters
    ----------
    exp : ExperimentConfig
        The experiment
    n_repeats : int | None
        Overrides exp.repeats

    Raises
    ------
    ConfigError
        For fewer than two repeats

    """
    n = n_repeats or exp.repeats
    _check_repeats(exp.name, n)

    jobs = [(exp, strategy, k) for k in range(n) for strategy in exp.strategies]

    log.info(f"fedtrain: experiment '{exp.name}' with {len(jobs)} runs")
    if threads > 1 and len(jobs) > 1:
        runs = pmap(_run_job, jobs, threads=threads)
    else:
        runs = [run_strategy(exp, s, k, threads=threads) for _, s, k in jobs]

    return ExperimentResult(runs=tuple(runs), significance=significance(_by_strategy(runs)))
