# -*- coding: utf-8 -*-

"""
Synthetic hospitals.

A :class:`CenterProfile` describes how one center's data differs from
the others: lesion density, lesion size, where lesions grow (deep in
the parenchyma or along the brain surface), through-plane resolution,
vessel-like enhancing distractors, lesion contrast and residual
meningeal enhancement. :func:`generate_center` turns a profile into a
:class:`CenterDataset` of brain-masked, z-normalized cases.

Every case draws from its own random stream derived from the profile
seed and the case id. Generation is therefore identical whether it
runs serially or in a process pool.

"""

import enum
import hashlib
import json
import logging
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from mclab import lesioneval
from mclab.collections import ConfigError, rconf, take
from mclab.filesystem import atomic_write, path
from mclab.parallel import pmap
from mclab.volgrid import (
    CaseRecord,
    Kind,
    Volume,
    read_volume,
    write_volume,
    z_normalize,
)

log = logging.getLogger(__name__)


class ProfileInvalid(ConfigError):
    pass


class InvalidThickness(ProfileInvalid):
    pass


class SpatialMode(enum.Enum):
    parenchymal = "parenchymal"
    boundary = "boundary"
    mixed = "mixed"


SPLITS = ("train", "val", "test")

# distance of the brain to the volume border in voxels
BRAIN_MARGIN = 6

# thickness of the meningeal shell in voxels
RIM_WIDTH = 2

# lesion radii are capped (mm)
MAX_RADIUS = 8.0

# placement attempts per lesion before it is skipped
RETRY_CAP = 20

# boundary lesions are centered this close to the surface (mm)
BOUNDARY_DEPTH = (0.5, 2.5)


# --- profile


@dataclass(frozen=True)
class CenterProfile:
    """
    Parameterized description of a synthetic center.

    Lesion volumes are lognormal in cm³ (size_log_mean and size_log_std
    are the parameters of the underlying normal), lesion counts are
    Poisson with mean lesion_density.

    """

    name: str
    n_train: int = 20
    n_val: int = 4
    n_test: int = 8

    lesion_density: float = 2.2
    size_log_mean: float = -2.0
    size_log_std: float = 1.0

    spatial_mode: SpatialMode = SpatialMode.parenchymal
    p_boundary: float = 0.5

    slice_thickness_mm: float = 1.0
    distractor_rate: float = 0.0
    contrast_gain: float = 2.0
    meningeal_rim: float = 0.0
    noise_std: float = 0.05

    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "spatial_mode", SpatialMode(self.spatial_mode))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

        def check(ok: bool, name: str, msg: str):
            if not ok:
                raise ProfileInvalid(f"profile '{self.name}': field '{name}' {msg}")

        check(bool(self.name), "name", "must not be empty")
        for split in SPLITS:
            n = getattr(self, f"n_{split}")
            check(n >= 0, f"n_{split}", f"must not be negative (got {n})")

        check(self.lesion_density > 0, "lesion_density", "must be positive")
        check(self.size_log_std >= 0, "size_log_std", "must not be negative")
        check(0 <= self.p_boundary <= 1, "p_boundary", "must lie in [0, 1]")
        check(self.distractor_rate >= 0, "distractor_rate", "must not be negative")
        check(self.contrast_gain > 0, "contrast_gain", "must be positive")
        check(0 <= self.meningeal_rim <= 1, "meningeal_rim", "must lie in [0, 1]")
        check(self.noise_std >= 0, "noise_std", "must not be negative")
        check(0 <= self.seed < 2**64, "seed", "must be an unsigned 64 bit integer")

        check(len(self.dims) == 3, "dims", "must have three components")
        check(
            min(self.dims) >= 4 * BRAIN_MARGIN,
            "dims",
            f"must be at least {4 * BRAIN_MARGIN} voxels per axis",
        )

        check(len(self.spacing) == 3, "spacing", "must have three components")
        check(
            all(math.isfinite(s) and s > 0 for s in self.spacing),
            "spacing",
            "must be positive",
        )

        if self.slice_thickness_mm < self.spacing[2] - 1e-9:
            raise InvalidThickness(
                f"profile '{self.name}': field 'slice_thickness_mm' must be"
                f" at least the z-spacing {self.spacing[2]}"
            )

    @property
    def size_median_cm3(self) -> float:
        return math.exp(self.size_log_mean)

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def case_ids(self, split: str) -> list[str]:
        return [f"{self.name}-{split}-{i:04d}" for i in range(self.split_size(split))]

    @classmethod
    def from_dict(cls, dic: dict[str, Any]) -> "CenterProfile":
        """
        Create a profile from a parsed json or yaml document.

        Raises
        ------
        ProfileInvalid
            Naming the offending field

        """
        defaults = asdict(cls(name="default"))
        defaults.pop("name")

        fields = {
            "name": str,
            "n_train": int,
            "n_val": int,
            "n_test": int,
            "lesion_density": float,
            "size_log_mean": float,
            "size_log_std": float,
            "spatial_mode": str,
            "p_boundary": float,
            "slice_thickness_mm": float,
            "distractor_rate": float,
            "contrast_gain": float,
            "meningeal_rim": float,
            "noise_std": float,
            "dims": (list, tuple),
            "spacing": (list, tuple),
            "seed": int,
        }

        kwargs = take(dic, fields, "profile", defaults=defaults, error=ProfileInvalid)

        try:
            kwargs["spatial_mode"] = SpatialMode(kwargs["spatial_mode"])
        except ValueError:
            modes = ", ".join(m.value for m in SpatialMode)
            raise ProfileInvalid(
                f"profile: field 'spatial_mode' must be one of {modes}"
            ) from None

        for name in ("dims", "spacing"):
            value = kwargs[name]
            if len(value) != 3 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise ProfileInvalid(f"profile: field '{name}' must be three numbers")

        if any(int(n) != n for n in kwargs["dims"]):
            raise ProfileInvalid("profile: field 'dims' must be integers")

        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        dic = asdict(self)
        dic["spatial_mode"] = self.spatial_mode.value
        dic["dims"] = list(self.dims)
        dic["spacing"] = list(self.spacing)
        return dic


# --- dataset


@dataclass(frozen=True, eq=False)
class CenterDataset:
    """
    Generated cases of one center.

    The source is the manifest the dataset was loaded from (None for
    datasets that only live in memory).

    """

    profile: CenterProfile
    train: tuple[CaseRecord, ...] = ()
    val: tuple[CaseRecord, ...] = ()
    test: tuple[CaseRecord, ...] = ()
    source: Path | None = None

    def __post_init__(self):
        ids = [case.case_id for case in self.cases()]
        assert len(ids) == len(set(ids)), "case ids must be unique across splits"

    @property
    def name(self) -> str:
        return self.profile.name

    def split(self, name: str) -> tuple[CaseRecord, ...]:
        assert name in SPLITS, f"unknown split {name}"
        return getattr(self, name)

    def cases(self) -> Iterator[CaseRecord]:
        for split in SPLITS:
            yield from self.split(split)

    def subset(self, n_train: int) -> "CenterDataset":
        """The same center with only the first n_train training cases."""
        return CenterDataset(
            profile=self.profile,
            train=self.train[:n_train],
            val=self.val,
            test=self.test,
            source=self.source,
        )


# --- random streams


STREAMS = ("brain", "lesions", "texture", "distractors", "rim", "noise")


def case_streams(seed: int, case_id: str) -> dict[str, np.random.Generator]:
    """
    Independent counter-based generators for one case.

    Each aspect of a case draws from its own stream so that changing
    e.g. the distractor rate leaves the lesion layout untouched.

    """
    digest = hashlib.sha256(case_id.encode()).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()

    root = np.random.SeedSequence([seed, *words])
    return {
        name: np.random.Generator(np.random.Philox(child))
        for name, child in zip(STREAMS, root.spawn(len(STREAMS)))
    }


# --- anatomy


def brain_mask(
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    rng: np.random.Generator,
) -> Volume:
    """
    Ellipsoidal brain with mild random eccentricity.

    The brain keeps at least BRAIN_MARGIN voxels distance to the
    volume border.

    """
    semi = [(n / 2 - BRAIN_MARGIN) * rng.uniform(0.96, 1.0) for n in dims]
    center = [(n - 1) / 2 for n in dims]

    grid = np.ogrid[tuple(slice(0, n) for n in dims)]
    dist = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi))

    return Volume.mask(dist <= 1.0, spacing)


def _depth(brain: Volume) -> np.ndarray:
    # distance (mm) of brain voxels to the closest background voxel
    return ndimage.distance_transform_edt(brain.data, sampling=brain.spacing)


def head_region(brain: Volume) -> Volume:
    """Brain plus the surrounding meningeal shell."""
    head = ndimage.binary_dilation(
        brain.data,
        structure=lesioneval.FACES,
        iterations=RIM_WIDTH,
    )
    return brain.like(head)


# --- lesions


def draw_lesion_count(profile: CenterProfile, split: str, rng: np.random.Generator):
    count = int(rng.poisson(profile.lesion_density))

    # detection metrics need at least one lesion per evaluated case
    if split in {"val", "test"}:
        count = max(1, count)

    return count


def draw_lesion_volumes(profile: CenterProfile, rng: np.random.Generator, n: int):
    """Lesion volumes in cm³."""
    return rng.lognormal(mean=profile.size_log_mean, sigma=profile.size_log_std, size=n)


def _radius_mm(volume_cm3: float) -> float:
    r = (3 * volume_cm3 * 1000 / (4 * math.pi)) ** (1 / 3)
    return min(r, MAX_RADIUS)


def _ellipsoid(
    dims: tuple[int, ...],
    spacing: tuple[float, ...],
    center: np.ndarray,
    semi_mm: np.ndarray,
) -> tuple[tuple[slice, ...], np.ndarray]:
    reach = [int(math.ceil(a / s)) for a, s in zip(semi_mm, spacing)]
    window = tuple(
        slice(max(0, c - r), min(n, c + r + 1))
        for c, r, n in zip(center, reach, dims)
    )

    grid = np.ogrid[window]
    dist = sum(
        ((g - c) * s / a) ** 2 for g, c, s, a in zip(grid, center, spacing, semi_mm)
    )

    return window, dist <= 1.0


def place_lesions(
    brain: Volume,
    profile: CenterProfile,
    rng: np.random.Generator,
    split: str = "train",
    n_lesions: int | None = None,
) -> Volume:
    """
    Draw a lesion annotation inside a brain mask.

    Lesion count and volumes are drawn first, then each lesion gets a
    center according to the spatial mode: parenchymal lesions are
    placed deep enough to never touch the brain surface, boundary
    lesions are centered right below it. Lesions are axis aligned
    ellipsoids clipped to the brain and never touch each other. A
    lesion which cannot be placed after RETRY_CAP attempts is skipped.

    Parameters
    ----------
    brain : Volume
        Nonempty brain mask
    profile : CenterProfile
        Provides density, size and spatial mode
    rng : np.random.Generator
        Lesion stream of the case
    split : str
        Validation and test cases get at least one lesion
    n_lesions : int | None
        Overwrite the drawn lesion count

    Returns
    -------
    Volume
        The lesion mask

    """
    assert brain.kind is Kind.mask and brain.data.any(), "brain mask must not be empty"

    count = draw_lesion_count(profile, split, rng)
    count = count if n_lesions is None else n_lesions

    volumes = draw_lesion_volumes(profile, rng, count)

    inside = brain.data.astype(bool)
    depth = _depth(brain)
    spacing = np.array(brain.spacing)

    label = np.zeros(brain.dims, dtype=bool)
    forbidden = np.zeros(brain.dims, dtype=bool)

    placed = 0
    for volume in volumes:
        axes = np.exp(rng.normal(0, 0.15, size=3))
        semi = np.minimum(_radius_mm(volume) * axes / np.prod(axes) ** (1 / 3), MAX_RADIUS)

        boundary = profile.spatial_mode is SpatialMode.boundary or (
            profile.spatial_mode is SpatialMode.mixed
            and rng.random() < profile.p_boundary
        )

        if boundary:
            lo, hi = BOUNDARY_DEPTH
            candidates = np.argwhere(inside & (depth >= lo) & (depth <= hi))
        else:
            candidates = np.argwhere(depth > semi.max() + 1.5)

        if not len(candidates):
            continue

        for _ in range(RETRY_CAP):
            center = candidates[rng.integers(len(candidates))]
            window, blob = _ellipsoid(brain.dims, brain.spacing, center, semi)
            blob &= inside[window]

            if not (blob & forbidden[window]).any():
                break
        else:
            continue

        label[window] |= blob

        # lesions must not touch (26-neighborhood)
        grown = np.zeros(brain.dims, dtype=bool)
        grown[window] = blob
        forbidden |= ndimage.binary_dilation(grown, structure=lesioneval.CONNECTIVITY[26])

        placed += 1

    if placed < count:
        log.debug(f"synthcenter: placed {placed}/{count} lesions, retries exhausted")

    return brain.like(label)


# --- image formation


def simulate_anisotropy(v: Volume, slice_thickness_mm: float) -> Volume:
    """
    Degrade the through-plane resolution.

    Slices are averaged in blocks of k = round(thickness / spacing.z)
    along z (a trailing partial block is averaged over its own length)
    and every block is written back to all of its slices. Dims and
    spacing stay the same and the total intensity is conserved.

    Raises
    ------
    InvalidThickness
        If the thickness is below the z-spacing or not finite

    """
    sz = v.spacing[2]
    if not math.isfinite(slice_thickness_mm) or slice_thickness_mm < sz - 1e-9:
        raise InvalidThickness(
            f"slice thickness {slice_thickness_mm} mm is below z-spacing {sz} mm"
        )

    k = int(round(slice_thickness_mm / sz))
    if k <= 1:
        return v

    data = v.data.astype(np.float64)
    nz = v.dims[2]

    out = np.empty_like(data)
    for start in range(0, nz, k):
        block = slice(start, min(nz, start + k))
        out[:, :, block] = data[:, :, block].mean(axis=2, keepdims=True)

    return v.like(out)


def add_distractors(
    image: Volume,
    brain: Volume,
    rate: float,
    rng: np.random.Generator,
    intensity: float = 2.0,
) -> Volume:
    """
    Add bright vessel-like tubes.

    The number of tubes is Poisson(rate). Each tube follows a smooth
    random walk through the brain with a radius of one to two voxels
    and lights up at intensity * U(0.9, 1.1). Annotations are not
    touched: these structures exist to provoke false positives.

    """
    assert rate >= 0, "distractor rate must not be negative"

    count = int(rng.poisson(rate)) if rate > 0 else 0
    if count == 0:
        return image

    inside = brain.data.astype(bool)
    starts = np.argwhere(inside)
    dims = np.array(image.dims)

    data = image.data.astype(np.float64)
    for _ in range(count):
        pos = starts[rng.integers(len(starts))].astype(np.float64)
        step = rng.normal(size=3)
        step /= np.linalg.norm(step)

        centerline = np.zeros(image.dims, dtype=bool)
        for _ in range(int(rng.integers(12, 28))):
            idx = tuple(np.clip(np.round(pos).astype(int), 0, dims - 1))
            centerline[idx] = True

            step = step + rng.normal(scale=0.3, size=3)
            step /= np.linalg.norm(step)
            pos = pos + step

        radius = rng.uniform(1.0, 2.0)
        tube = ndimage.distance_transform_edt(~centerline) <= radius
        tube &= inside

        level = intensity * rng.uniform(0.9, 1.1)
        data[tube] = np.maximum(data[tube], level)

    log.debug(f"synthcenter: added {count} distractors")
    return image.like(data)


def add_meningeal_rim(
    image: Volume,
    brain: Volume,
    level: float,
    rng: np.random.Generator,
) -> Volume:
    """Patchy enhancement in the shell directly outside the brain."""
    if level <= 0:
        return image

    shell = head_region(brain).data.astype(bool) & ~brain.data.astype(bool)
    patches = ndimage.gaussian_filter(rng.normal(size=image.dims), sigma=2.0) > 0

    data = image.data.astype(np.float64)
    data[shell & patches] = level

    return image.like(data)


def _tissue(brain: Volume, rng: np.random.Generator) -> np.ndarray:
    texture = ndimage.gaussian_filter(rng.normal(size=brain.dims), sigma=2.0)
    texture /= texture.std() or 1.0
    return (1.0 + 0.1 * texture) * brain.data


def synthesize_case(profile: CenterProfile, split: str, case_id: str) -> CaseRecord:
    """
    Generate a single case.

    The steps are: brain, lesions, tissue texture, lesion enhancement,
    distractors, meningeal rim, noise, slice thickness and finally
    z-normalization over the head region.

    """
    rng = case_streams(profile.seed, case_id)

    brain = brain_mask(profile.dims, profile.spacing, rng["brain"])
    label = place_lesions(brain, profile, rng["lesions"], split=split)

    gain = profile.contrast_gain
    image = _tissue(brain, rng["texture"])

    # soft lesion borders
    weight = ndimage.gaussian_filter(label.data.astype(np.float64), sigma=0.6)
    weight = np.clip(1.3 * weight, 0, 1) * brain.data
    image = image * (1 - weight) + gain * weight

    img = brain.like(image, kind=Kind.intensity)
    img = add_distractors(img, brain, profile.distractor_rate, rng["distractors"], gain)
    img = add_meningeal_rim(img, brain, profile.meningeal_rim * gain, rng["rim"])

    head = head_region(brain)
    if profile.noise_std > 0:
        noise = rng["noise"].normal(scale=profile.noise_std, size=profile.dims)
        img = img.like(img.data + noise * head.data)

    img = simulate_anisotropy(img, profile.slice_thickness_mm)
    img = z_normalize(img, head)

    return CaseRecord(case_id=case_id, image=img, label=label, brain_mask=brain)


def _synthesize(args: tuple[CenterProfile, str, str]) -> CaseRecord:
    return synthesize_case(*args)


def generate_center(profile: CenterProfile, threads: int = 1) -> CenterDataset:
    """
    Generate all cases of a center.

    The result is a pure function of the profile.

    Parameters
    ----------
    profile : CenterProfile
        The center description
    threads : int
        Worker processes, the result does not depend on it

    """
    jobs = [
        (profile, split, case_id)
        for split in SPLITS
        for case_id in profile.case_ids(split)
    ]

    log.info(f"synthcenter: generating {len(jobs)} cases for '{profile.name}'")
    records = pmap(_synthesize, jobs, threads=threads)

    splits: dict[str, list[CaseRecord]] = {split: [] for split in SPLITS}
    for (_, split, _), record in zip(jobs, records):
        splits[split].append(record)

    return CenterDataset(
        profile=profile,
        train=tuple(splits["train"]),
        val=tuple(splits["val"]),
        test=tuple(splits["test"]),
    )


# --- statistics


@dataclass(frozen=True)
class SplitStatistics:
    """Dataset description in the shape of a dataset overview table."""

    n_volumes: int
    n_lesions: int
    lesions_per_volume: float
    mean_size_cm3: float | None
    median_size_cm3: float | None
    frac_small: float | None = field(default=None)


CenterStatistics = dict[str, SplitStatistics]


def center_statistics(dataset: CenterDataset, small_cm3: float = 0.1) -> CenterStatistics:
    """
    Describe lesion counts and sizes per split.

    Lesions are counted as 26-connected components of the labels.
    frac_small is the fraction of lesions not larger than small_cm3.

    """
    res = {}
    for split in SPLITS:
        sizes = []
        cases = dataset.split(split)

        for case in cases:
            components = lesioneval.connected_components(case.label)
            voxel_cm3 = case.label.voxel_volume / 1000
            sizes.extend((components.sizes() * voxel_cm3).tolist())

        arr = np.array(sizes)
        has = len(arr) > 0

        res[split] = SplitStatistics(
            n_volumes=len(cases),
            n_lesions=len(arr),
            lesions_per_volume=len(arr) / len(cases) if cases else 0.0,
            mean_size_cm3=float(arr.mean()) if has else None,
            median_size_cm3=float(np.median(arr)) if has else None,
            frac_small=float((arr <= small_cm3).mean()) if has else None,
        )

    return res


# --- persistence

MANIFEST = "manifest.json"


def _case_paths(case_id: str) -> dict[str, str]:
    return {
        "image": f"cases/{case_id}-image.mcvl",
        "label": f"cases/{case_id}-label.mcvl",
        "brain_mask": f"cases/{case_id}-brain.mcvl",
    }


def write_center(dataset: CenterDataset, out_dir: str | Path) -> Path:
    """
    Write all volumes and the manifest of a center.

    Returns
    -------
    Path
        The manifest file

    """
    out_dir = path(out_dir, create=True)

    cases = []
    for split in SPLITS:
        for case in dataset.split(split):
            rel = _case_paths(case.case_id)
            write_volume(case.image, out_dir / rel["image"])
            write_volume(case.label, out_dir / rel["label"])
            write_volume(case.brain_mask, out_dir / rel["brain_mask"])
            cases.append({"id": case.case_id, "split": split} | rel)

    statistics = {
        split: asdict(stats) for split, stats in center_statistics(dataset).items()
    }

    manifest = {
        "name": dataset.name,
        "profile": dataset.profile.to_dict(),
        "cases": cases,
        "statistics": statistics,
    }

    target = out_dir / MANIFEST
    with atomic_write(target, mode="w") as fd:
        json.dump(manifest, fd, indent=2)
        fd.write("\n")

    log.info(f"synthcenter: wrote {len(cases)} cases to {out_dir}")
    return target


def read_manifest(manifest: str | Path) -> dict[str, Any]:
    manifest = path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST

    with path(manifest, is_file=True).open(mode="r") as fd:
        try:
            dic = json.load(fd)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{manifest}: malformed manifest: {exc}") from exc

    for key in ("name", "profile", "cases"):
        if key not in dic:
            raise ConfigError(f"{manifest}: missing field '{key}'")

    dic["__path__"] = manifest
    return dic


def load_center(manifest: str | Path) -> CenterDataset:
    """
    Load a center written by write_center.

    Parameters
    ----------
    manifest : str | Path
        The manifest file or the directory containing it

    """
    dic = read_manifest(manifest)
    source: Path = dic["__path__"]
    root = source.parent

    profile = CenterProfile.from_dict(dic["profile"])
    splits: dict[str, list[CaseRecord]] = {split: [] for split in SPLITS}

    for entry in dic["cases"]:
        try:
            split = entry["split"]
            record = CaseRecord(
                case_id=entry["id"],
                image=read_volume(root / entry["image"]),
                label=read_volume(root / entry["label"]),
                brain_mask=read_volume(root / entry["brain_mask"]),
            )
        except KeyError as exc:
            raise ConfigError(f"{source}: case entry misses field {exc}") from exc

        if split not in splits:
            raise ConfigError(f"{source}: unknown split '{split}'")

        splits[split].append(record)

    log.info(f"synthcenter: loaded '{profile.name}' from {source}")
    return CenterDataset(
        profile=profile,
        train=tuple(splits["train"]),
        val=tuple(splits["val"]),
        test=tuple(splits["test"]),
        source=source,
    )


def load_profile(*files: str | Path, **overwrites) -> CenterProfile:
    """Read a profile from json or yaml files."""
    return CenterProfile.from_dict(rconf(*files, **overwrites))
