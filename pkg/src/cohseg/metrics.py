"""Stability rate over global or boundary regions, plus mIoU and MAE.

The stability rate of a sequence is the mean, over consecutive frame
pairs, of the fraction of evaluated pixels whose current prediction agrees
with the previous frame's prediction transported along the known flow,
times 100. Evaluated pixels are those that are not occluded, have an
in-bounds transport target, belong to the estimated tracked set, and fall
inside the requested region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .core import (
    BinaryMask,
    CorrespondenceSet,
    FlowField,
    LabelMap,
    SoftmaxMap,
    argmax_labels,
    _require,
)
from .flow import warp_labels

__all__ = [
    "RegionSpec",
    "StabilityReport",
    "boundary_mask",
    "dilate_disc",
    "extract_boundary",
    "extend_boundary",
    "stb",
    "merge_reports",
    "miou",
    "mae",
]


@dataclass(frozen=True)
class RegionSpec:
    """Evaluation region: the whole frame, or a band around label edges."""

    mode: str = "global"
    band_width: int = 15

    def __post_init__(self) -> None:
        _require(self.mode in ("global", "local"), "mode must be 'global' or 'local'")
        if self.mode == "local":
            _require(self.band_width >= 1, "band_width must be >= 1")


@dataclass(frozen=True)
class StabilityReport:
    """Per-pair agreement ratios and their mean as a percentage.

    per_pair, agreements and evaluated_pixels cover the pairs that had a
    non-empty evaluation set, in sequence order; skipped lists the pair
    indices (index t of the later frame) that were dropped.
    """

    stb: float
    per_pair: list[float]
    agreements: list[int]
    evaluated_pixels: list[int]
    skipped: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        _require(len(self.per_pair) >= 1, "report needs at least one evaluated pair")
        _require(
            len(self.per_pair) == len(self.evaluated_pixels) == len(self.agreements),
            "per-pair lists must align",
        )
        mean = float(np.mean(self.per_pair)) * 100.0
        _require(abs(self.stb - mean) <= 1e-9, "stb must equal mean(per_pair) * 100")
        _require(0.0 <= self.stb <= 100.0, "stb must lie in [0, 100]")

    @classmethod
    def from_counts(
        cls, agreements: list[int], evaluated: list[int], skipped: list[int]
    ) -> "StabilityReport":
        ratios = [a / n for a, n in zip(agreements, evaluated)]
        return cls(
            stb=float(np.mean(ratios)) * 100.0,
            per_pair=ratios,
            agreements=list(agreements),
            evaluated_pixels=list(evaluated),
            skipped=list(skipped),
        )

    @property
    def has_skipped_pairs(self) -> bool:
        return bool(self.skipped)


# ---------------------------------------------------------------------------
# boundary extraction and extension
# ---------------------------------------------------------------------------

def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with any 4-neighbor of a different label (both transition sides)."""
    b = np.zeros(labels.shape, dtype=bool)
    dh = labels[:, :-1] != labels[:, 1:]
    b[:, :-1] |= dh
    b[:, 1:] |= dh
    dv = labels[:-1, :] != labels[1:, :]
    b[:-1, :] |= dv
    b[1:, :] |= dv
    return b


def dilate_disc(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate with a Euclidean disc of the given radius (exact distances)."""
    if radius <= 0 or not mask.any():
        return mask.copy()
    dist = ndi.distance_transform_edt(~mask)
    return dist <= radius


def extract_boundary(labels: LabelMap) -> BinaryMask:
    return BinaryMask(boundary_mask(labels.labels))


def extend_boundary(b: BinaryMask, theta: int) -> BinaryMask:
    """Thicken a boundary line into a band of total width about theta."""
    _require(theta >= 1, "theta must be >= 1")
    return BinaryMask(dilate_disc(b.as_bool(), theta // 2))


# ---------------------------------------------------------------------------
# stability rate
# ---------------------------------------------------------------------------

def _labels_of(prediction: SoftmaxMap | LabelMap) -> LabelMap:
    if isinstance(prediction, SoftmaxMap):
        return argmax_labels(prediction)
    return prediction


def stb(
    predictions: list[SoftmaxMap | LabelMap],
    gt_flows: list[FlowField],
    occlusions: list[BinaryMask],
    est_flows: list[CorrespondenceSet],
    region: RegionSpec = RegionSpec(),
    gt_labels: list[LabelMap] | None = None,
) -> StabilityReport:
    """Stability rate of a prediction sequence.

    gt_flows[t-1] is the known correspondence field on frame t's grid
    pointing into frame t-1, occlusions[t-1] marks frame-t pixels without a
    valid source, and est_flows[t-1] supplies the estimated tracked set
    that limits the evaluation. For local regions the band is anchored on
    the ground-truth label edges of the later frame, so gt_labels is
    required.
    """
    n = len(predictions)
    _require(n >= 2, "need at least two frames")
    _require(
        len(gt_flows) == len(occlusions) == len(est_flows) == n - 1,
        "flows, occlusions, and correspondence sets must cover n - 1 pairs",
    )
    if region.mode == "local":
        _require(gt_labels is not None and len(gt_labels) == n,
                 "local region needs one ground-truth label map per frame")

    labels = [_labels_of(p) for p in predictions]
    agreements: list[int] = []
    evaluated: list[int] = []
    skipped: list[int] = []
    for t in range(1, n):
        prev_labels = labels[t - 1]
        cur = labels[t].labels
        transported, valid = warp_labels(prev_labels, gt_flows[t - 1])
        eval_mask = (
            valid.as_bool()
            & ~occlusions[t - 1].as_bool()
            & est_flows[t - 1].tracked.as_bool()
        )
        if region.mode == "local":
            band = dilate_disc(
                boundary_mask(gt_labels[t].labels), region.band_width // 2
            )
            eval_mask &= band
        count = int(eval_mask.sum())
        if count == 0:
            skipped.append(t)
            continue
        agree = int((eval_mask & (transported.labels == cur)).sum())
        agreements.append(agree)
        evaluated.append(count)
    if not evaluated:
        raise ValueError("every frame pair had an empty evaluation set")
    return StabilityReport.from_counts(agreements, evaluated, skipped)


def merge_reports(reports: list[StabilityReport]) -> StabilityReport:
    """Pool several sequences into one report by concatenating their
    per-pair lists; the stability rate becomes the flat mean over all pairs."""
    _require(bool(reports), "need at least one report")
    agreements: list[int] = []
    evaluated: list[int] = []
    skipped: list[int] = []
    for r in reports:
        agreements.extend(r.agreements)
        evaluated.extend(r.evaluated_pixels)
        skipped.extend(r.skipped)
    return StabilityReport.from_counts(agreements, evaluated, skipped)


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------

def miou(preds: list[LabelMap], gts: list[LabelMap], classes: int) -> float:
    """Mean IoU over classes, pooled over all frames, as a percentage.

    Classes absent from both predictions and ground truth are excluded
    from the mean.
    """
    _require(len(preds) == len(gts) and preds, "need matching non-empty frame lists")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        _require((p.height, p.width) == (g.height, g.width), "frame dimensions differ")
        pl = p.labels.ravel()
        gl = g.labels.ravel()
        _require(int(pl.max()) < classes and int(gl.max()) < classes,
                 "class index out of range")
        confusion += np.bincount(
            gl.astype(np.int64) * classes + pl, minlength=classes * classes
        ).reshape(classes, classes)
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    present = union > 0
    return float(np.mean(tp[present] / union[present])) * 100.0


def mae(pred_scores: list[SoftmaxMap], gts: list[LabelMap]) -> float:
    """Mean absolute error between foreground probability (class 1) and a
    binary ground truth, times 100, pooled over all pixels and frames."""
    _require(len(pred_scores) == len(gts) and pred_scores,
             "need matching non-empty frame lists")
    total = 0.0
    count = 0
    for p, g in zip(pred_scores, gts):
        _require(p.classes == 2, "mae requires binary softmax maps")
        _require((p.height, p.width) == (g.height, g.width), "frame dimensions differ")
        _require(int(g.labels.max()) <= 1, "mae requires binary ground truth")
        fg = p.scores[..., 1].astype(np.float64)
        total += float(np.abs(fg - g.labels).sum())
        count += fg.size
    return total / count * 100.0
