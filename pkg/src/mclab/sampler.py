# -*- coding: utf-8 -*-

"""
Class-balanced training segments.

Each segment is independently centered on a lesion voxel with
probability p_tumor and on an in-brain background voxel otherwise.
Drawing segment specifications is separated from cutting the patches
so that sampling statistics can be checked without patch memory.

"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

import mclab
from mclab.volgrid import CaseRecord

log = logging.getLogger(__name__)


class SamplerError(mclab.Error):
    exit_code = 4


class EmptySplit(SamplerError):
    pass


class NoLesionVoxels(SamplerError):
    pass


# redraws of a case without lesion voxels before falling back
REDRAW_CAP = 10


@dataclass(frozen=True)
class SegmentSpec:
    """Where to cut one segment."""

    pool_index: int
    center: tuple[int, int, int]
    tumor: bool


@dataclass(frozen=True, eq=False)
class SegmentBatch:
    """
    Patches and their centered targets.

    Provenance holds (case_id, center_index) per segment.

    """

    patches: np.ndarray
    targets: np.ndarray
    provenance: tuple[tuple[str, int], ...]
    tumor: np.ndarray

    def __len__(self) -> int:
        return len(self.provenance)


class _Case:
    def __init__(self, center_index: int, case: CaseRecord):
        self.center_index = center_index
        self.case = case

        label = case.label.data.astype(bool)
        brain = case.brain_mask.data.astype(bool)

        self.lesion = np.flatnonzero(label.ravel())
        self.background = np.flatnonzero((brain & ~label).ravel())

        if not len(self.background):
            self.background = np.flatnonzero(~label.ravel())


class SegmentSampler:
    """
    Draw balanced segments from a pool of cases.

    Parameters
    ----------
    pool : Sequence[tuple[int, CaseRecord]]
        Cases with the index of the center they come from
    input_size : int
        Patch edge length
    output_size : int
        Target edge length (centered in the patch)

    Raises
    ------
    EmptySplit
        If the pool is empty

    """

    def __init__(
        self,
        pool: Sequence[tuple[int, CaseRecord]],
        input_size: int,
        output_size: int,
    ):
        if not pool:
            raise EmptySplit("sampler: no cases to sample from")

        assert (input_size - output_size) % 2 == 0, "target must be centered"

        self.cases = [_Case(ci, case) for ci, case in pool]
        self.input_size = input_size
        self.output_size = output_size

        for entry in self.cases:
            if any(n < input_size for n in entry.case.image.dims):
                raise SamplerError(
                    f"sampler: {entry.case.case_id} is smaller than a patch"
                )

        log.info(f"sampler: pool of {len(self.cases)} cases")

    @classmethod
    def from_cases(cls, cases: Sequence[CaseRecord], input_size, output_size):
        return cls([(0, case) for case in cases], input_size, output_size)

    def _lesion_center(self, rng: np.random.Generator) -> tuple[int, int] | None:
        for _ in range(REDRAW_CAP):
            idx = int(rng.integers(len(self.cases)))
            voxels = self.cases[idx].lesion
            if len(voxels):
                return idx, int(voxels[rng.integers(len(voxels))])

        return None

    def draw(self, n: int, p_tumor: float, rng: np.random.Generator) -> list[SegmentSpec]:
        """
        Draw n segment specifications.

        A tumor segment picks a case uniformly, then a lesion voxel
        uniformly. Cases without lesions are redrawn up to REDRAW_CAP
        times, then the segment falls back to background.

        Raises
        ------
        NoLesionVoxels
            If p_tumor is 1 but no case of the pool has lesion voxels

        """
        assert 0 <= p_tumor <= 1, "p_tumor must lie in [0, 1]"

        if p_tumor > 0 and not any(len(entry.lesion) for entry in self.cases):
            if p_tumor == 1:
                raise NoLesionVoxels("sampler: no case of the pool has lesion voxels")
            log.warning("sampler: no lesion voxels in the pool, drawing background only")

        specs = []
        for _ in range(n):
            found = None
            if rng.random() < p_tumor:
                found = self._lesion_center(rng)
                if found is None:
                    log.debug("sampler: no lesion voxels found, using background")

            tumor = found is not None
            if found is None:
                idx = int(rng.integers(len(self.cases)))
                voxels = self.cases[idx].background
                found = idx, int(voxels[rng.integers(len(voxels))])

            idx, flat = found
            dims = self.cases[idx].case.image.dims
            center = tuple(int(c) for c in np.unravel_index(flat, dims))
            specs.append(SegmentSpec(pool_index=idx, center=center, tumor=tumor))

        return specs

    def window(self, spec: SegmentSpec) -> tuple[slice, ...]:
        """Patch window around the center, shifted to lie inside the volume."""
        dims = self.cases[spec.pool_index].case.image.dims
        half = self.input_size // 2

        starts = [
            min(max(c - half, 0), n - self.input_size) for c, n in zip(spec.center, dims)
        ]
        return tuple(slice(s, s + self.input_size) for s in starts)

    def extract(self, specs: Sequence[SegmentSpec]) -> SegmentBatch:
        size, out = self.input_size, self.output_size
        inner = (size - out) // 2

        patches = np.empty((len(specs), 1, size, size, size))
        targets = np.empty((len(specs), 1, out, out, out))
        provenance = []

        for i, spec in enumerate(specs):
            entry = self.cases[spec.pool_index]
            window = self.window(spec)

            patches[i, 0] = entry.case.image.data[window]
            label = entry.case.label.data[window]
            targets[i, 0] = label[inner : inner + out, inner : inner + out, inner : inner + out]

            provenance.append((entry.case.case_id, entry.center_index))

        return SegmentBatch(
            patches=patches,
            targets=targets,
            provenance=tuple(provenance),
            tumor=np.array([spec.tumor for spec in specs]),
        )

    def sample(self, n: int, p_tumor: float, rng: np.random.Generator) -> SegmentBatch:
        return self.extract(self.draw(n, p_tumor, rng))


def sample_segments(
    cases: Sequence[CaseRecord],
    batch_size: int,
    p_tumor: float,
    rng: np.random.Generator,
    input_size: int = 19,
    output_size: int = 9,
) -> SegmentBatch:
    """
    Draw a class-balanced batch from the cases of one split.

    Raises
    ------
    EmptySplit
        If there are no cases

    """
    sampler = SegmentSampler.from_cases(cases, input_size, output_size)
    return sampler.sample(batch_size, p_tumor, rng)
