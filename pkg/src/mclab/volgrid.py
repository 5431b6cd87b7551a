# -*- coding: utf-8 -*-

"""
Three dimensional scalar grids.

Every other module exchanges image data as :class:`Volume`
instances: a dense array of shape (nx, ny, nz) together with the
physical voxel spacing in millimeters. Intensity volumes store 32 bit
floats, masks store zeros and ones as unsigned bytes. Volumes are
read-only once constructed and can be shared freely between workers.

"""

import enum
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

import mclab
from mclab.filesystem import FileError, atomic_write, path

log = logging.getLogger(__name__)


class Kind(enum.IntEnum):
    """Payload kind of a volume."""

    intensity = 0
    mask = 1


DTYPES = {
    Kind.intensity: np.dtype("<f4"),
    Kind.mask: np.dtype("u1"),
}


Spacing = tuple[float, float, float]


# --- errors


class VolgridError(mclab.Error):
    """Invalid volume data or operation."""


class EmptyRegion(VolgridError):
    """A normalization region without any set voxel."""


class DegenerateIntensity(VolgridError):
    """Intensities without spread inside the normalization region."""


class InvalidSpacing(VolgridError):
    """Non-positive or non-finite spacing."""

    exit_code = 2


class DimsMismatch(VolgridError):
    """Volumes which should share a grid do not."""


class VolumeFormatError(FileError):
    """Base class for malformed volume files."""


class BadMagic(VolumeFormatError):
    pass


class VersionMismatch(VolumeFormatError):
    pass


class TruncatedPayload(VolumeFormatError):
    pass


class InvalidDtype(VolumeFormatError):
    pass


# --- types


def _spacing(spacing) -> Spacing:
    try:
        sx, sy, sz = (float(s) for s in spacing)
    except (TypeError, ValueError) as exc:
        raise InvalidSpacing(f"spacing must be three reals, got {spacing!r}") from exc

    for s in (sx, sy, sz):
        if not math.isfinite(s) or s <= 0:
            raise InvalidSpacing(f"spacing must be positive and finite: {spacing!r}")

    return sx, sy, sz


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3D scalar grid with physical voxel spacing.

    Parameters
    ----------
    data : np.ndarray
        Array of shape (nx, ny, nz); converted to float32 (intensity)
        or uint8 (mask) and made read-only
    spacing : Spacing
        Millimeters per voxel along x, y and z
    kind : Kind
        Whether this is an intensity image or a binary mask

    """

    data: np.ndarray
    spacing: Spacing
    kind: Kind = Kind.intensity

    def __post_init__(self):
        kind = Kind(self.kind)
        data = np.asarray(self.data)

        assert data.ndim == 3, f"volumes are 3D, got shape {data.shape}"
        assert all(n > 0 for n in data.shape), "volumes must not be empty"

        if kind is Kind.mask:
            if data.dtype == bool:
                data = data.astype(np.uint8)
            elif not np.isin(data, (0, 1)).all():
                raise VolgridError("mask volumes contain only zeros and ones")

        data = np.array(data, dtype=DTYPES[kind], copy=True)
        data.flags.writeable = False

        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _spacing(self.spacing))
        object.__setattr__(self, "kind", kind)

    @classmethod
    def intensity(cls, data, spacing: Spacing = (1.0, 1.0, 1.0)) -> "Volume":
        return cls(data=data, spacing=spacing, kind=Kind.intensity)

    @classmethod
    def mask(cls, data, spacing: Spacing = (1.0, 1.0, 1.0)) -> "Volume":
        return cls(data=data, spacing=spacing, kind=Kind.mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        nx, ny, nz = self.data.shape
        return nx, ny, nz

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical size in millimeters."""
        ex, ey, ez = (n * s for n, s in zip(self.dims, self.spacing))
        return ex, ey, ez

    @property
    def voxel_volume(self) -> float:
        """Volume of a single voxel in mm³."""
        return math.prod(self.spacing)

    def like(self, data, kind: Kind | None = None) -> "Volume":
        """Create a volume on the same grid."""
        kind = self.kind if kind is None else kind
        return Volume(data=data, spacing=self.spacing, kind=kind)

    def identical(self, other: "Volume") -> bool:
        """Check for bit-identity (kind, grid and payload)."""
        return (
            self.kind is other.kind
            and self.spacing == other.spacing
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    def __str__(self) -> str:
        dims = "x".join(map(str, self.dims))
        spacing = "x".join(f"{s:g}" for s in self.spacing)
        return f"Volume {self.kind.name} {dims} @ {spacing} mm"


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One synthetic patient: image, annotation and brain mask."""

    case_id: str
    image: Volume
    label: Volume
    brain_mask: Volume

    def __post_init__(self):
        assert self.image.kind is Kind.intensity
        assert self.label.kind is Kind.mask
        assert self.brain_mask.kind is Kind.mask

        same_grid(self.image, self.label, self.brain_mask)


def same_grid(*volumes: Volume, spacing: bool = True):
    """
    Assert that volumes share dims (and spacing).

    Raises
    ------
    DimsMismatch
        If any volume deviates from the first

    """
    first, *rest = volumes
    for other in rest:
        if other.dims != first.dims:
            raise DimsMismatch(f"dims differ: {first.dims} vs {other.dims}")
        if spacing and other.spacing != first.spacing:
            raise DimsMismatch(f"spacing differs: {first.spacing} vs {other.spacing}")


# --- operations


def z_normalize(v: Volume, region: Volume) -> Volume:
    """
    Standardize intensities inside a region.

    In-region voxels are shifted and scaled to zero mean and unit
    (population) standard deviation, everything outside is set to 0.

    Parameters
    ----------
    v : Volume
        Intensity volume
    region : Volume
        Mask selecting the voxels used for the statistics

    Returns
    -------
    Volume
        Normalized intensity volume

    Raises
    ------
    EmptyRegion
        If the region has no set voxel
    DegenerateIntensity
        If the in-region standard deviation is below 1e-12

    """
    assert v.kind is Kind.intensity and region.kind is Kind.mask
    same_grid(v, region, spacing=False)

    sel = region.data.astype(bool)
    if not sel.any():
        raise EmptyRegion("z_normalize: region has no set voxels")

    vals = v.data[sel].astype(np.float64)
    mean, std = vals.mean(), vals.std()

    if std < 1e-12:
        raise DegenerateIntensity(f"z_normalize: constant intensity {mean:.6g}")

    out = np.zeros(v.dims, dtype=np.float64)
    out[sel] = (vals - mean) / std

    return v.like(out)


def resample(v: Volume, target_spacing) -> Volume:
    """
    Resample a volume to a different voxel spacing.

    Output voxel i lies at the physical position i * target of the
    input grid, the number of voxels is chosen to keep the physical
    extent within one voxel. Intensities are interpolated trilinearly,
    masks by nearest neighbor.

    Parameters
    ----------
    v : Volume
        Any volume
    target_spacing : Spacing
        Millimeters per voxel of the result

    Raises
    ------
    InvalidSpacing
        For non-positive components

    """
    target = _spacing(target_spacing)
    if target == v.spacing:
        return v

    dims = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(v.dims, v.spacing, target)
    )

    order = 1 if v.kind is Kind.intensity else 0
    scale = [t / s for s, t in zip(v.spacing, target)]

    out = ndimage.affine_transform(
        v.data.astype(np.float64),
        matrix=scale,
        output_shape=dims,
        order=order,
        mode="nearest",
    )

    if v.kind is Kind.mask:
        out = out > 0.5

    log.debug(f"volgrid: resampled {v.dims} -> {dims}")
    return Volume(data=out, spacing=target, kind=v.kind)


# --- file format
#
#   little endian, x-fastest payload
#   magic | u32 version | u32 dims[3] | f64 spacing[3] | u8 kind | 3x reserved

MAGIC = b"MCVL"
VERSION = 1
HEADER = struct.Struct("<4sI3I3dB3x")


def encode_volume(v: Volume) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, *v.dims, *v.spacing, int(v.kind))
    return header + v.data.ravel(order="F").tobytes()


def decode_volume(buf: bytes, source: str = "<bytes>") -> Volume:
    """
    Parse the MCVL volume format.

    Raises
    ------
    BadMagic, VersionMismatch, TruncatedPayload, InvalidDtype
        For malformed buffers

    """
    if len(buf) < HEADER.size:
        if not buf.startswith(MAGIC[: len(buf)]):
            raise BadMagic(f"{source}: not a volume file")
        raise TruncatedPayload(f"{source}: header has {len(buf)}/{HEADER.size} bytes")

    magic, version, nx, ny, nz, sx, sy, sz, kind = HEADER.unpack_from(buf)

    if magic != MAGIC:
        raise BadMagic(f"{source}: expected magic {MAGIC!r}, got {magic!r}")

    if version != VERSION:
        raise VersionMismatch(f"{source}: version {version} (supported: {VERSION})")

    if kind not in (Kind.intensity, Kind.mask):
        raise InvalidDtype(f"{source}: unknown payload kind {kind}")

    kind = Kind(kind)
    dtype = DTYPES[kind]

    if min(nx, ny, nz) == 0:
        raise VolumeFormatError(f"{source}: empty dims {(nx, ny, nz)}")

    expected = nx * ny * nz * dtype.itemsize
    payload = memoryview(buf)[HEADER.size :]

    if len(payload) < expected:
        raise TruncatedPayload(f"{source}: payload has {len(payload)}/{expected} bytes")
    if len(payload) > expected:
        raise VolumeFormatError(f"{source}: {len(payload) - expected} trailing bytes")

    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")

    if kind is Kind.mask and data.max() > 1:
        raise InvalidDtype(f"{source}: mask payload contains values other than 0/1")

    try:
        return Volume(data=data, spacing=(sx, sy, sz), kind=kind)
    except InvalidSpacing as exc:
        raise VolumeFormatError(f"{source}: {exc}") from exc


def write_volume(v: Volume, target: str | Path):
    """Write a volume atomically in the MCVL format."""
    with atomic_write(target) as fd:
        fd.write(encode_volume(v))


def read_volume(source: str | Path) -> Volume:
    """Read a MCVL volume file."""
    with path(source, is_file=True).open(mode="rb") as fd:
        buf = fd.read()

    return decode_volume(buf, source=str(source))
