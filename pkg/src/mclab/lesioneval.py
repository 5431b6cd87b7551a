# -*- coding: utf-8 -*-

"""
Lesion-wise detection and contouring metrics.

Detection is counted per lesion instance (connected component): a
reference lesion is detected if at least one predicted component
overlaps it by one voxel or more, a predicted component is a false
positive if it overlaps no reference lesion. Contouring metrics
(surface Dice, HD95, volumetric Dice) are evaluated per detected
reference lesion only.

"""

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage, stats

import mclab
from mclab.volgrid import DimsMismatch, Kind, Spacing, Volume, same_grid

log = logging.getLogger(__name__)


class LesionevalError(mclab.Error):
    pass


class NoVolumes(LesionevalError):
    pass


class EmptyMask(LesionevalError):
    pass


class TooFewSamples(LesionevalError):
    pass


class ZeroVariance(LesionevalError):
    pass


CONNECTIVITY = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}

# surfaces are extracted with face-neighbors
FACES = CONNECTIVITY[6]

# voxels around each lesion kept when cropping
CROP_MARGIN = 5


# --- components and matching


@dataclass(frozen=True, eq=False)
class ComponentMap:
    """
    Labeled lesion instances.

    Ids are dense (1..count), 0 is background.

    """

    labels: np.ndarray
    count: int
    spacing: Spacing
    connectivity: int = 26

    @property
    def voxel_lists(self) -> dict[int, tuple[np.ndarray, ...]]:
        return ndimage.value_indices(self.labels, ignore_value=0)

    def sizes(self) -> np.ndarray:
        """Voxel count per component, index 0 is component 1."""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]

    def select(self, *ids: int) -> np.ndarray:
        return np.isin(self.labels, ids)


def connected_components(mask: Volume, connectivity: int = 26) -> ComponentMap:
    """
    Label the connected components of a mask.

    Parameters
    ----------
    mask : Volume
        Binary mask
    connectivity : int
        One of 6 (faces), 18 (faces and edges) or 26 (all neighbors)

    """
    assert mask.kind is Kind.mask
    assert connectivity in CONNECTIVITY, "connectivity must be 6, 18 or 26"

    labels, count = ndimage.label(mask.data, structure=CONNECTIVITY[connectivity])
    return ComponentMap(
        labels=labels.astype(np.int32),
        count=int(count),
        spacing=mask.spacing,
        connectivity=connectivity,
    )


@dataclass(frozen=True)
class DetectionCounts:
    """
    True positive, false positive and false negative bookkeeping.

    References and predictions are counted separately: tp_ref and fn
    partition the reference lesions, tp_pred and fp partition the
    predicted components. Adding counts sums everything but the
    matches, whose ids are only meaningful within one volume.

    """

    tp_ref: int = 0
    fn: int = 0
    tp_pred: int = 0
    fp: int = 0
    n_volumes: int = 0
    matches: tuple[tuple[int, int], ...] = ()

    @property
    def n_ref(self) -> int:
        return self.tp_ref + self.fn

    @property
    def n_pred(self) -> int:
        return self.tp_pred + self.fp

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(
            tp_ref=self.tp_ref + other.tp_ref,
            fn=self.fn + other.fn,
            tp_pred=self.tp_pred + other.tp_pred,
            fp=self.fp + other.fp,
            n_volumes=self.n_volumes + other.n_volumes,
        )


def match_lesions(pred: ComponentMap, ref: ComponentMap) -> DetectionCounts:
    """
    Match predicted and reference lesions by voxel overlap.

    Any overlap of at least one voxel counts, without cutoff. One
    prediction may detect several references and vice versa.

    Raises
    ------
    DimsMismatch
        If the label maps have different shapes

    """
    if pred.labels.shape != ref.labels.shape:
        raise DimsMismatch(f"dims differ: {pred.labels.shape} vs {ref.labels.shape}")

    overlap = (pred.labels > 0) & (ref.labels > 0)
    pairs = np.stack((pred.labels[overlap], ref.labels[overlap]), axis=1)
    pairs = np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)

    tp_pred = len(np.unique(pairs[:, 0]))
    tp_ref = len(np.unique(pairs[:, 1]))

    return DetectionCounts(
        tp_ref=tp_ref,
        fn=ref.count - tp_ref,
        tp_pred=tp_pred,
        fp=pred.count - tp_pred,
        n_volumes=1,
        matches=tuple((int(p), int(r)) for p, r in pairs),
    )


# --- detection


@dataclass(frozen=True)
class DetectionMetrics:
    sensitivity: float
    precision: float
    fpr: float
    f1: float
    f2: float


def f_beta(sensitivity: float, precision: float, beta: float) -> float:
    """
    Weighted harmonic mean of sensitivity and precision.

    Returns 0 when the denominator vanishes.

    Examples
    --------
    >>> from mclab.lesioneval import f_beta
    >>> round(f_beta(0.854, 0.900, 1), 3)
    0.876
    >>> round(f_beta(0.854, 0.900, 2), 3)
    0.863

    """
    assert beta > 0, "beta must be positive"

    b2 = beta**2
    den = b2 * precision + sensitivity
    if den == 0:
        return 0.0

    return (1 + b2) * sensitivity * precision / den


def _ratio(num: int, den: int) -> float:
    # 0/0 -> 0
    return num / den if den else 0.0


def detection_metrics(counts: DetectionCounts) -> DetectionMetrics:
    """
    Compute lesion-wise detection scores.

    The false positive rate is the mean number of false positive
    components per evaluated volume (including volumes without
    reference lesions).

    Raises
    ------
    NoVolumes
        If no volume was evaluated

    """
    if counts.n_volumes < 1:
        raise NoVolumes("detection metrics require at least one volume")

    sens = _ratio(counts.tp_ref, counts.n_ref)
    prec = _ratio(counts.tp_pred, counts.n_pred)

    return DetectionMetrics(
        sensitivity=sens,
        precision=prec,
        fpr=counts.fp / counts.n_volumes,
        f1=f_beta(sens, prec, 1),
        f2=f_beta(sens, prec, 2),
    )


# --- contouring


def boundary(mask: np.ndarray) -> np.ndarray:
    """Set voxels with at least one background face-neighbor."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=FACES, border_value=0)


def surface_distances(
    pred: np.ndarray,
    ref: np.ndarray,
    spacing: Spacing,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Directed boundary distances in millimeters.

    Both masks must be nonempty.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        Distances pred -> ref and ref -> pred, one per boundary voxel

    """
    bp, br = boundary(pred), boundary(ref)

    # distance of every voxel to the closest boundary voxel
    to_ref = ndimage.distance_transform_edt(~br, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~bp, sampling=spacing)

    return to_ref[bp], to_pred[br]


def _check(pred: Volume, ref: Volume):
    assert pred.kind is Kind.mask and ref.kind is Kind.mask
    same_grid(pred, ref)


def _surface_dice(pred: np.ndarray, ref: np.ndarray, spacing, tolerance_mm) -> float:
    has_pred, has_ref = pred.any(), ref.any()
    if not has_pred and not has_ref:
        return 1.0
    if not has_pred or not has_ref:
        return 0.0

    d_pr, d_rp = surface_distances(pred, ref, spacing)
    hits = np.count_nonzero(d_pr <= tolerance_mm) + np.count_nonzero(
        d_rp <= tolerance_mm
    )

    return hits / (len(d_pr) + len(d_rp))


def _hd95(pred: np.ndarray, ref: np.ndarray, spacing) -> float:
    if not pred.any() or not ref.any():
        raise EmptyMask("hd95 is undefined for empty masks")

    d_pr, d_rp = surface_distances(pred, ref, spacing)
    return float(np.percentile(np.concatenate((d_pr, d_rp)), 95))


def _dice(pred: np.ndarray, ref: np.ndarray) -> float:
    total = np.count_nonzero(pred) + np.count_nonzero(ref)
    if total == 0:
        return 1.0

    return 2 * np.count_nonzero(pred & ref) / total


def surface_dice(pred: Volume, ref: Volume, tolerance_mm: float = 1.0) -> float:
    """
    Surface Dice at a distance tolerance.

    The fraction of both boundaries lying within tolerance_mm of the
    other boundary. Two empty masks agree perfectly (1.0), one empty
    mask scores 0.

    Raises
    ------
    DimsMismatch
        If the masks do not share a grid

    """
    assert tolerance_mm >= 0, "tolerance must not be negative"
    _check(pred, ref)

    return _surface_dice(
        pred.data.astype(bool),
        ref.data.astype(bool),
        pred.spacing,
        tolerance_mm,
    )


def hd95(pred: Volume, ref: Volume) -> float:
    """
    95th percentile of the pooled bidirectional boundary distances.

    Percentiles interpolate linearly between order statistics.

    Raises
    ------
    EmptyMask
        If either mask is empty
    DimsMismatch
        If the masks do not share a grid

    """
    _check(pred, ref)
    return _hd95(pred.data.astype(bool), ref.data.astype(bool), pred.spacing)


def volumetric_dice(pred: Volume, ref: Volume) -> float:
    """Overlap Dice; two empty masks score 1."""
    _check(pred, ref)
    return _dice(pred.data.astype(bool), ref.data.astype(bool))


@dataclass(frozen=True)
class LesionContour:
    ref_id: int
    sdice: float
    hd95: float
    dice: float
    case_id: str | None = None


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


@dataclass(frozen=True)
class ContourMetrics:
    """
    Per-lesion contouring accuracy of detected lesions.

    Aggregates are unweighted means over lesions and None if no
    lesion was detected.

    """

    per_lesion: tuple[LesionContour, ...] = ()

    @property
    def sdice(self) -> float | None:
        return _mean([lc.sdice for lc in self.per_lesion])

    @property
    def hd95_mm(self) -> float | None:
        return _mean([lc.hd95 for lc in self.per_lesion])

    @property
    def dice(self) -> float | None:
        return _mean([lc.dice for lc in self.per_lesion])

    def __add__(self, other: "ContourMetrics") -> "ContourMetrics":
        return ContourMetrics(per_lesion=self.per_lesion + other.per_lesion)


def _crop(sel: np.ndarray, margin: int) -> tuple[slice, ...]:
    idx = np.nonzero(sel)
    return tuple(
        slice(max(0, int(ax.min()) - margin), min(n, int(ax.max()) + margin + 1))
        for ax, n in zip(idx, sel.shape)
    )


def contour_metrics(
    pred: Volume,
    ref_components: ComponentMap,
    counts: DetectionCounts,
    tolerance_mm: float = 1.0,
    case_id: str | None = None,
) -> ContourMetrics:
    """
    Contouring accuracy of each detected reference lesion.

    Every detected reference lesion is compared to the union of the
    predicted components matched to it. Both are cropped to their
    joint bounding box grown by five voxels, which leaves the result
    unchanged compared to the whole volume.

    Parameters
    ----------
    pred : Volume
        Predicted mask (labeled with the connectivity of ref_components)
    ref_components : ComponentMap
        Reference lesions
    counts : DetectionCounts
        Matching of pred and ref_components
    tolerance_mm : float
        Surface Dice tolerance
    case_id : str | None
        Attached to each per-lesion record

    """
    pred_components = connected_components(pred, ref_components.connectivity)

    matched: dict[int, list[int]] = {}
    for pred_id, ref_id in counts.matches:
        matched.setdefault(ref_id, []).append(pred_id)

    spacing = ref_components.spacing
    lesions = []

    for ref_id in sorted(matched):
        ref = ref_components.labels == ref_id
        prd = pred_components.select(*matched[ref_id])

        window = _crop(ref | prd, CROP_MARGIN)
        ref, prd = ref[window], prd[window]

        lesions.append(
            LesionContour(
                ref_id=ref_id,
                sdice=_surface_dice(prd, ref, spacing, tolerance_mm),
                hd95=_hd95(prd, ref, spacing),
                dice=_dice(prd, ref),
                case_id=case_id,
            )
        )

    return ContourMetrics(per_lesion=tuple(lesions))


def apply_brain_mask(pred: Volume, brain: Volume) -> Volume:
    """
    Remove predicted voxels outside the brain.

    Components straddling the boundary may split; label again
    afterwards.

    """
    assert pred.kind is Kind.mask and brain.kind is Kind.mask
    same_grid(pred, brain, spacing=False)

    return pred.like(pred.data & brain.data)


# --- statistics


def unpaired_t_test(
    a: Sequence[float],
    b: Sequence[float],
    strict: bool = False,
) -> tuple[float, float]:
    """
    Welch's unequal variance t-test, two-sided.

    Samples without any spread have no defined statistic. Unless
    strict is set, two constant samples with equal values yield
    (0, 1) and with different values (±inf, 0).

    Parameters
    ----------
    a : Sequence[float]
        First sample
    b : Sequence[float]
        Second sample
    strict : bool
        Raise ZeroVariance for constant samples instead

    Returns
    -------
    tuple[float, float]
        The t statistic and the p-value

    Raises
    ------
    TooFewSamples
        If a sample has less than two values
    ZeroVariance
        If strict and both samples are constant

    """
    x, y = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise TooFewSamples(f"t-test requires two values each, got {len(x)}/{len(y)}")

    if x.var(ddof=1) == 0 and y.var(ddof=1) == 0:
        if strict:
            raise ZeroVariance("t-test: both samples are constant")

        diff = x.mean() - y.mean()
        if diff == 0:
            return 0.0, 1.0

        return float(np.copysign(np.inf, diff)), 0.0

    res = stats.ttest_ind(x, y, equal_var=False)
    return float(res.statistic), float(res.pvalue)


# --- cohorts


@dataclass(frozen=True)
class CaseEvaluation:
    """Detection and contouring result of a single volume."""

    case_id: str
    counts: DetectionCounts
    contour: ContourMetrics

    @property
    def detection(self) -> DetectionMetrics:
        return detection_metrics(self.counts)


def evaluate_case(
    case_id: str,
    pred: Volume,
    label: Volume,
    brain: Volume | None = None,
    tolerance_mm: float = 1.0,
    connectivity: int = 26,
) -> CaseEvaluation:
    """
    Evaluate one predicted mask against its annotation.

    If a brain mask is given, the prediction is filtered before its
    components are labeled.

    """
    _check(pred, label)
    if brain is not None:
        pred = apply_brain_mask(pred, brain)

    pred_cc = connected_components(pred, connectivity)
    ref_cc = connected_components(label, connectivity)

    counts = match_lesions(pred_cc, ref_cc)
    contour = contour_metrics(pred, ref_cc, counts, tolerance_mm, case_id=case_id)

    return CaseEvaluation(case_id=case_id, counts=counts, contour=contour)


@dataclass(frozen=True)
class MetricsRow:
    """
    One row of a result table.

    The json form is the record written for each combination of
    model, center and split.

    """

    sensitivity: float
    precision: float
    fpr: float
    f1: float
    f2: float
    sdice: float | None
    hd95_mm: float | None
    dice: float | None
    n_volumes: int
    n_ref_lesions: int
    with_brain_mask: bool
    per_lesion: tuple[LesionContour, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sensitivity": self.sensitivity,
            "precision": self.precision,
            "fpr": self.fpr,
            "f1": self.f1,
            "f2": self.f2,
            "sdice": self.sdice,
            "hd95_mm": self.hd95_mm,
            "dice": self.dice,
            "n_volumes": self.n_volumes,
            "n_ref_lesions": self.n_ref_lesions,
            "with_brain_mask": self.with_brain_mask,
        }


def summarize(
    evaluations: Sequence[CaseEvaluation],
    with_brain_mask: bool,
) -> MetricsRow:
    """
    Aggregate case evaluations into a cohort row.

    Cases are aggregated sorted by case_id so the result does not
    depend on evaluation order.

    Raises
    ------
    NoVolumes
        If no case was evaluated

    """
    ordered = sorted(evaluations, key=lambda ev: ev.case_id)

    counts, contour = DetectionCounts(), ContourMetrics()
    for ev in ordered:
        counts += ev.counts
        contour += ev.contour

    det = detection_metrics(counts)

    return MetricsRow(
        sensitivity=det.sensitivity,
        precision=det.precision,
        fpr=det.fpr,
        f1=det.f1,
        f2=det.f2,
        sdice=contour.sdice,
        hd95_mm=contour.hd95_mm,
        dice=contour.dice,
        n_volumes=counts.n_volumes,
        n_ref_lesions=counts.n_ref,
        with_brain_mask=with_brain_mask,
        per_lesion=contour.per_lesion,
    )
