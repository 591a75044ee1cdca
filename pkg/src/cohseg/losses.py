"""Loss stack for temporally coherent segmentation.

Four terms, each returning a scalar and analytic gradients with respect to
the per-frame softmax score maps:

- seg_loss: mean per-pixel cross-entropy against hard labels.
- lovasz_softmax: Jaccard surrogate over sorted per-pixel errors.
- boundary_coherency: Lovasz term tying warped predictions to the other
  frame's labels inside a band around its predicted boundary, both
  directions, each weighted one half.
- global_coherency: soft cross-entropy pulling warped predictions toward
  the other frame's scores on confidently disagreeing dual-matched pixels,
  both directions, each weighted one half.

Correspondence fields are treated as fixed when differentiating: gradients
flow through the bilinear warp of the scores, never through the flow, the
argmax labels, or the target side of the soft cross-entropy. Probabilities
are clamped below by EPS before every logarithm, and each term averages
over its active pixel set (counts are reported so raw sums stay
recoverable).

Functions accept the core value types or plain numpy arrays of the same
layout; gradients come back as float64 arrays shaped like the score maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    BinaryMask,
    CorrespondenceSet,
    FlowField,
    LabelMap,
    LossConfig,
    SoftmaxMap,
    _require,
)
from .flow import warp_scores_adjoint, warp_scores_raw
from .metrics import boundary_mask, dilate_disc

__all__ = [
    "EPS",
    "PairLoss",
    "FramePair",
    "LossReport",
    "seg_loss",
    "lovasz_softmax",
    "lovasz_class_losses",
    "boundary_coherency",
    "confident_disagreement_set",
    "global_coherency",
    "total_loss",
]

# Probability floor applied before every logarithm.
EPS = 1e-7


def _scores_of(m) -> np.ndarray:
    arr = m.scores if isinstance(m, SoftmaxMap) else np.asarray(m)
    _require(arr.ndim == 3, "scores must be (H, W, C)")
    return arr.astype(np.float64)


def _labels_arr(l) -> np.ndarray:
    arr = l.labels if isinstance(l, LabelMap) else np.asarray(l)
    _require(arr.ndim == 2, "labels must be (H, W)")
    return arr.astype(np.int64)


def _mask_arr(b) -> np.ndarray:
    arr = b.as_bool() if isinstance(b, BinaryMask) else np.asarray(b, dtype=bool)
    _require(arr.ndim == 2, "mask must be (H, W)")
    return arr


def _flow_arr(f) -> np.ndarray:
    arr = f.offsets if isinstance(f, FlowField) else np.asarray(f)
    _require(arr.ndim == 3 and arr.shape[2] == 2, "flow must be (H, W, 2)")
    return arr.astype(np.float64)


@dataclass(frozen=True)
class PairLoss:
    """Value and per-map gradients of one coherency term over a frame pair."""

    value: float
    grad_prev: np.ndarray
    grad_next: np.ndarray
    active_fwd: int
    active_bwd: int

    @property
    def empty(self) -> bool:
        return self.active_fwd == 0 and self.active_bwd == 0


@dataclass(frozen=True)
class FramePair:
    """Inputs of the coherency terms for one consecutive frame pair.

    flow_fwd lives on m_next's grid and maps each pixel to its source in
    m_prev (it transports the earlier prediction forward in time);
    flow_bwd is the reverse. corr_fwd and corr_bwd are the matching
    forward-backward check results on the same grids.
    """

    m_prev: SoftmaxMap
    m_next: SoftmaxMap
    flow_fwd: FlowField
    flow_bwd: FlowField
    corr_fwd: CorrespondenceSet
    corr_bwd: CorrespondenceSet

    def __post_init__(self) -> None:
        dims = (self.m_prev.height, self.m_prev.width)
        for other in (self.m_next, self.flow_fwd, self.flow_bwd, self.corr_fwd, self.corr_bwd):
            _require((other.height, other.width) == dims, "frame pair dimensions differ")
        _require(self.m_prev.classes == self.m_next.classes, "class counts differ")


@dataclass(frozen=True)
class LossReport:
    """Values and gradients of the combined loss.

    l_all recombines as l_seg + alpha * l_bc + beta * l_gc; active_counts
    records how many pixels each term averaged over.
    """

    l_seg: float
    l_bc: float
    l_gc: float
    l_all: float
    alpha: float
    beta: float
    grad_t_minus_1: np.ndarray | None
    grad_t: np.ndarray | None
    grad_seg: np.ndarray | None
    active_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        combined = self.l_seg + self.alpha * self.l_bc + self.beta * self.l_gc
        _require(abs(self.l_all - combined) <= 1e-9, "l_all must recombine exactly")


# ---------------------------------------------------------------------------
# per-pixel cross-entropy
# ---------------------------------------------------------------------------

def seg_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the true-class probability.

    The gradient is -1 / (n_pixels * p) at each pixel's true-class entry
    and zero elsewhere (and zero where the clamp is active).
    """
    scores = _scores_of(pred)
    labels = _labels_arr(gt)
    _require(scores.shape[:2] == labels.shape, "prediction and labels dimensions differ")
    _require(int(labels.max()) < scores.shape[2], "label index out of range")
    h, w, _ = scores.shape
    ys, xs = np.mgrid[0:h, 0:w]
    p_true = scores[ys, xs, labels]
    p_clamped = np.maximum(p_true, EPS)
    n = h * w
    value = float(np.mean(-np.log(p_clamped)))
    grad = np.zeros_like(scores)
    live = p_true >= EPS
    contrib = np.where(live, -1.0 / (n * p_clamped), 0.0)
    grad[ys, xs, labels] = contrib
    return value, grad


# ---------------------------------------------------------------------------
# Lovasz-softmax Jaccard surrogate
# ---------------------------------------------------------------------------

def _jaccard_weights(fg_sorted: np.ndarray) -> np.ndarray:
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    weights = jaccard.copy()
    weights[1:] = jaccard[1:] - jaccard[:-1]
    return weights


def _lovasz_terms(scores_flat: np.ndarray, labels_flat: np.ndarray):
    """Per-present-class Lovasz values and the gradient on the flat scores."""
    present = np.unique(labels_flat)
    grad = np.zeros_like(scores_flat)
    values: dict[int, float] = {}
    for c in present:
        fg = (labels_flat == c).astype(np.float64)
        errors = np.where(fg > 0.5, 1.0 - scores_flat[:, c], scores_flat[:, c])
        order = np.argsort(-errors, kind="stable")
        weights_sorted = _jaccard_weights(fg[order])
        values[int(c)] = float(errors[order] @ weights_sorted)
        weights = np.empty_like(weights_sorted)
        weights[order] = weights_sorted
        grad[:, c] += np.where(fg > 0.5, -weights, weights)
    return values, grad


def lovasz_softmax(pred, labels, active) -> tuple[float, np.ndarray]:
    """Jaccard surrogate averaged over the classes present in the active set.

    For each present class the per-pixel errors (1 - p for the class's own
    pixels, p elsewhere) are sorted descending and weighted by the discrete
    gradient of the Jaccard set function along the sorted prefix. The
    analytic gradient treats the sort permutation as locally constant.
    """
    scores = _scores_of(pred)
    lab = _labels_arr(labels)
    act = _mask_arr(active)
    _require(scores.shape[:2] == lab.shape == act.shape, "input dimensions differ")
    if not act.any():
        raise ValueError("empty active set")
    flat_scores = scores[act]
    flat_labels = lab[act]
    values, grad_flat = _lovasz_terms(flat_scores, flat_labels)
    k = len(values)
    grad = np.zeros_like(scores)
    grad[act] = grad_flat / k
    return float(sum(values.values())) / k, grad


def lovasz_class_losses(pred, labels, active) -> dict[int, float]:
    """Per-class Lovasz values (no averaging), for oracle-style checks."""
    scores = _scores_of(pred)
    lab = _labels_arr(labels)
    act = _mask_arr(active)
    if not act.any():
        raise ValueError("empty active set")
    values, _ = _lovasz_terms(scores[act], lab[act])
    return values


# ---------------------------------------------------------------------------
# warped-score plumbing shared by both coherency terms
# ---------------------------------------------------------------------------

def _warp_normalized(src_scores: np.ndarray, flow_arr: np.ndarray):
    """Warp and renormalize; returns (out, valid, sums, cache)."""
    raw, valid, cache = warp_scores_raw(src_scores, flow_arr)
    c = src_scores.shape[2]
    sums = np.ones(raw.shape[:2], dtype=np.float64)
    sums[valid] = np.maximum(raw[valid].sum(axis=-1), 1e-12)
    out = np.full(raw.shape, 1.0 / c, dtype=np.float64)
    out[valid] = raw[valid] / sums[valid][:, None]
    return out, valid, sums, cache


def _backprop_through_warp(
    grad_out: np.ndarray, out: np.ndarray, sums: np.ndarray, cache
) -> np.ndarray:
    """Chain a gradient on normalized warped scores back to the source map."""
    inner = (grad_out * out).sum(axis=-1, keepdims=True)
    grad_raw = (grad_out - inner) / sums[..., None]
    grad_raw[~cache.valid] = 0.0
    return warp_scores_adjoint(grad_raw, cache)


# ---------------------------------------------------------------------------
# boundary coherency
# ---------------------------------------------------------------------------

def _boundary_term(
    src_scores: np.ndarray, anchor_scores: np.ndarray, flow_arr: np.ndarray, theta: int
) -> tuple[float, np.ndarray, int]:
    anchor_labels = np.argmax(anchor_scores, axis=2)
    band = dilate_disc(boundary_mask(anchor_labels), theta // 2)
    out, valid, sums, cache = _warp_normalized(src_scores, flow_arr)
    active = band & valid
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(src_scores), 0
    value, grad_out = lovasz_softmax(out, anchor_labels, active)
    grad_src = _backprop_through_warp(grad_out, out, sums, cache)
    return value, grad_src, n_active


def boundary_coherency(
    m_prev, m_next, flow_fwd, flow_bwd, theta: int = 15
) -> PairLoss:
    """Boundary-band Jaccard agreement between warped and anchor predictions.

    The forward direction bands the argmax boundary of m_next, takes those
    argmax labels as hypothetical targets, warps m_prev onto m_next's grid
    along flow_fwd, and applies the Lovasz surrogate on the band
    intersected with the warp's validity. The backward direction swaps the
    roles. Each direction contributes half; gradients reach only the
    warped map of their direction. When both directions have empty active
    sets the result is zero with the empty flag set.
    """
    _require(theta >= 1, "theta must be >= 1")
    prev_scores = _scores_of(m_prev)
    next_scores = _scores_of(m_next)
    v_fwd, g_prev, n_fwd = _boundary_term(
        prev_scores, next_scores, _flow_arr(flow_fwd), theta
    )
    v_bwd, g_next, n_bwd = _boundary_term(
        next_scores, prev_scores, _flow_arr(flow_bwd), theta
    )
    return PairLoss(
        value=0.5 * v_fwd + 0.5 * v_bwd,
        grad_prev=0.5 * g_prev,
        grad_next=0.5 * g_next,
        active_fwd=n_fwd,
        active_bwd=n_bwd,
    )


# ---------------------------------------------------------------------------
# global coherency
# ---------------------------------------------------------------------------

def _confident_mask(
    target_scores: np.ndarray,
    warped_scores: np.ndarray,
    gamma: float,
    symmetric: bool,
) -> np.ndarray:
    top1 = np.argmax(target_scores, axis=2)
    h, w = top1.shape
    ys, xs = np.mgrid[0:h, 0:w]
    gap = target_scores[ys, xs, top1] - warped_scores[ys, xs, top1]
    if symmetric:
        return np.abs(gap) > gamma
    return gap > gamma


def confident_disagreement_set(
    m_next, m_warped, gamma: float, corr: CorrespondenceSet, symmetric: bool = False
) -> BinaryMask:
    """Dual-matched pixels where the frame's own top-1 score beats the warped
    map's score at that class by more than gamma.

    symmetric=True switches to the absolute-difference reading of the gap,
    kept for ablations.
    """
    mask = _confident_mask(_scores_of(m_next), _scores_of(m_warped), gamma, symmetric)
    return BinaryMask(mask & _mask_arr(corr.dual_matched))


def _global_term(
    src_scores: np.ndarray,
    target_scores: np.ndarray,
    flow_arr: np.ndarray,
    dual: np.ndarray,
    gamma: float,
    symmetric: bool,
) -> tuple[float, np.ndarray, int]:
    out, valid, sums, cache = _warp_normalized(src_scores, flow_arr)
    active = _confident_mask(target_scores, out, gamma, symmetric) & dual & valid
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(src_scores), 0
    p = np.maximum(out, EPS)
    per_pixel = -(target_scores * np.log(p)).sum(axis=-1)
    value = float(per_pixel[active].mean())
    grad_out = np.zeros_like(out)
    live = out >= EPS
    grad_out[active] = np.where(
        live[active], -(target_scores[active] / p[active]) / n_active, 0.0
    )
    grad_src = _backprop_through_warp(grad_out, out, sums, cache)
    return value, grad_src, n_active


def global_coherency(
    m_prev,
    m_next,
    flow_fwd,
    flow_bwd,
    corr_fwd: CorrespondenceSet,
    corr_bwd: CorrespondenceSet,
    gamma: float = 0.05,
    symmetric: bool = False,
) -> PairLoss:
    """Soft cross-entropy toward the more confident frame on trusted pixels.

    Forward direction: warp m_prev onto m_next's grid, select dual-matched
    pixels where m_next is confidently ahead of the warped scores, and
    average -sum(y * log p') with y = m_next held constant. Backward
    direction swaps the roles. Each direction contributes half; gradients
    reach only the warped side.
    """
    _require(0.0 < gamma < 1.0, "gamma must lie in (0, 1)")
    prev_scores = _scores_of(m_prev)
    next_scores = _scores_of(m_next)
    v_fwd, g_prev, n_fwd = _global_term(
        prev_scores, next_scores, _flow_arr(flow_fwd),
        _mask_arr(corr_fwd.dual_matched), gamma, symmetric,
    )
    v_bwd, g_next, n_bwd = _global_term(
        next_scores, prev_scores, _flow_arr(flow_bwd),
        _mask_arr(corr_bwd.dual_matched), gamma, symmetric,
    )
    return PairLoss(
        value=0.5 * v_fwd + 0.5 * v_bwd,
        grad_prev=0.5 * g_prev,
        grad_next=0.5 * g_next,
        active_fwd=n_fwd,
        active_bwd=n_bwd,
    )


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------

def total_loss(
    labeled: tuple | None = None,
    pair: FramePair | None = None,
    config: LossConfig = LossConfig(),
) -> LossReport:
    """Combine the segmentation and coherency terms.

    labeled is an optional (prediction, ground truth) pair for the
    cross-entropy term; pair an optional FramePair for the coherency
    terms. Absent terms contribute zero. Gradients are reported per map,
    already weighted by alpha and beta.
    """
    if labeled is None and pair is None:
        raise ValueError("need a labeled sample, a frame pair, or both")
    l_seg = 0.0
    grad_seg = None
    counts: dict[str, int] = {}
    if labeled is not None:
        pred, gt = labeled
        l_seg, grad_seg = seg_loss(pred, gt)
        counts["seg"] = int(np.prod(_labels_arr(gt).shape))
    l_bc = 0.0
    l_gc = 0.0
    grad_prev = None
    grad_next = None
    if pair is not None:
        bc = boundary_coherency(
            pair.m_prev, pair.m_next, pair.flow_fwd, pair.flow_bwd, theta=config.theta
        )
        gc = global_coherency(
            pair.m_prev, pair.m_next, pair.flow_fwd, pair.flow_bwd,
            pair.corr_fwd, pair.corr_bwd, gamma=config.gamma,
        )
        l_bc = bc.value
        l_gc = gc.value
        grad_prev = config.alpha * bc.grad_prev + config.beta * gc.grad_prev
        grad_next = config.alpha * bc.grad_next + config.beta * gc.grad_next
        counts.update(
            bc_fwd=bc.active_fwd, bc_bwd=bc.active_bwd,
            gc_fwd=gc.active_fwd, gc_bwd=gc.active_bwd,
        )
    return LossReport(
        l_seg=l_seg,
        l_bc=l_bc,
        l_gc=l_gc,
        l_all=l_seg + config.alpha * l_bc + config.beta * l_gc,
        alpha=config.alpha,
        beta=config.beta,
        grad_t_minus_1=grad_prev,
        grad_t=grad_next,
        grad_seg=grad_seg,
        active_counts=counts,
    )
