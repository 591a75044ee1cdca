"""Dense correspondence between frames: pyramidal Lucas-Kanade flow,
forward-backward dual matching, and flow-based warping.

Flow direction convention. compute_flow(src, dst) returns a field f on
src's pixel grid such that src(x, y) matches dst(x + u, y + v). Read as
motion, f moves src content toward dst; read as a resampling map, f pulls
dst data onto src's grid. The warp operations use the second reading:
warp_map(source, flow) produces out(x, y) = source(x + u, y + v), so a
field defined on frame B's grid that points into frame A transports A's
predictions onto B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .core import (
    BinaryMask,
    CorrespondenceSet,
    FlowField,
    Image,
    LabelMap,
    SoftmaxMap,
    _require,
)

__all__ = [
    "FlowParams",
    "compute_flow",
    "forward_backward_check",
    "warp_map",
    "warp_labels",
    "warp_image",
    "warp_scores_raw",
    "warp_scores_adjoint",
]


@dataclass(frozen=True)
class FlowParams:
    """Operating point of the pyramidal Lucas-Kanade solver."""

    pyramid_levels: int = 4
    window_radius: int = 10
    iterations_per_level: int = 10
    min_eigen_threshold: float = 1e-4

    def __post_init__(self) -> None:
        _require(self.pyramid_levels >= 1, "pyramid_levels must be >= 1")
        _require(self.window_radius >= 1, "window_radius must be >= 1")
        _require(self.iterations_per_level >= 1, "iterations_per_level must be >= 1")
        _require(self.min_eigen_threshold > 0.0, "min_eigen_threshold must be positive")

    def min_image_side(self) -> int:
        return (2 ** (self.pyramid_levels - 1)) * (2 * self.window_radius + 1)


# ---------------------------------------------------------------------------
# bilinear sampling machinery (shared with the loss layer)
# ---------------------------------------------------------------------------

def _axis_indices(coord: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # coord is assumed clipped to [0, size - 1]
    if size == 1:
        zero = np.zeros(coord.shape, dtype=np.intp)
        return zero, zero, np.zeros_like(coord)
    lo = np.clip(np.floor(coord), 0, size - 2).astype(np.intp)
    return lo, lo + 1, coord - lo


def _sample_bilinear(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample field (H, W) or (H, W, C) at fractional coords, edge-clamped."""
    h, w = field.shape[:2]
    x0, x1, fx = _axis_indices(np.clip(xs, 0.0, w - 1.0), w)
    y0, y1, fy = _axis_indices(np.clip(ys, 0.0, h - 1.0), h)
    if field.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = field[y0, x0]
    v01 = field[y0, x1]
    v10 = field[y1, x0]
    v11 = field[y1, x1]
    return (
        v00 * (1.0 - fy) * (1.0 - fx)
        + v01 * (1.0 - fy) * fx
        + v10 * fy * (1.0 - fx)
        + v11 * fy * fx
    )


@dataclass
class WarpCache:
    """Bilinear footprint of a warp, kept for the adjoint pass."""

    y0: np.ndarray
    y1: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    w00: np.ndarray
    w01: np.ndarray
    w10: np.ndarray
    w11: np.ndarray
    valid: np.ndarray
    src_shape: tuple[int, ...]


def _flow_targets(flow_arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = flow_arr.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xs + flow_arr[..., 0]
    ty = ys + flow_arr[..., 1]
    valid = (tx >= 0.0) & (tx <= w - 1.0) & (ty >= 0.0) & (ty <= h - 1.0)
    return tx, ty, valid


def warp_scores_raw(
    scores: np.ndarray, flow_arr: np.ndarray
) -> tuple[np.ndarray, np.ndarray, WarpCache]:
    """Bilinear pull of per-pixel score vectors along a correspondence field.

    Returns (raw, valid, cache). raw holds the gathered scores before any
    normalization (contents at invalid pixels are meaningless), valid marks
    in-bounds targets, and cache supports warp_scores_adjoint.
    """
    h, w = scores.shape[:2]
    _require(flow_arr.shape[:2] == (h, w), "flow and map dimensions differ")
    tx, ty, valid = _flow_targets(flow_arr)
    x0, x1, fx = _axis_indices(np.clip(tx, 0.0, w - 1.0), w)
    y0, y1, fy = _axis_indices(np.clip(ty, 0.0, h - 1.0), h)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    raw = (
        scores[y0, x0] * w00[..., None]
        + scores[y0, x1] * w01[..., None]
        + scores[y1, x0] * w10[..., None]
        + scores[y1, x1] * w11[..., None]
    )
    cache = WarpCache(y0, y1, x0, x1, w00, w01, w10, w11, valid, scores.shape)
    return raw, valid, cache


def warp_scores_adjoint(grad_raw: np.ndarray, cache: WarpCache) -> np.ndarray:
    """Transpose of warp_scores_raw: scatter output-side gradients to sources."""
    grad_src = np.zeros(cache.src_shape, dtype=np.float64)
    m = cache.valid
    g = grad_raw[m]
    for yy, xx, wk in (
        (cache.y0, cache.x0, cache.w00),
        (cache.y0, cache.x1, cache.w01),
        (cache.y1, cache.x0, cache.w10),
        (cache.y1, cache.x1, cache.w11),
    ):
        np.add.at(grad_src, (yy[m], xx[m]), g * wk[m][:, None])
    return grad_src


# ---------------------------------------------------------------------------
# pyramidal Lucas-Kanade
# ---------------------------------------------------------------------------

# window applied to the intermediate flow after every solver iteration
_MEDIAN_SIZE = 5


def _downsample(img: np.ndarray) -> np.ndarray:
    return ndi.gaussian_filter(img, sigma=1.0, mode="nearest")[::2, ::2]


def _upsample_to(field: np.ndarray, shape: tuple[int, int], scale: float) -> np.ndarray:
    zy = shape[0] / field.shape[0]
    zx = shape[1] / field.shape[1]
    up = ndi.zoom(field, (zy, zx), order=1, mode="nearest")
    assert up.shape == shape
    return up * scale


def compute_flow(prev: Image, next_: Image, params: FlowParams | None = None) -> FlowField:
    """Estimate per-pixel motion from prev toward next_.

    Iterative coarse-to-fine least squares on the local structure tensor;
    pixels whose smaller tensor eigenvalue falls below
    params.min_eigen_threshold keep the flow interpolated from the coarser
    level instead of receiving updates.
    """
    params = params or FlowParams()
    _require(
        (prev.height, prev.width) == (next_.height, next_.width),
        "frame dimensions differ",
    )
    min_side = params.min_image_side()
    _require(
        min(prev.height, prev.width) >= min_side,
        f"image side must be at least {min_side} px for these parameters",
    )
    pyr_i = [prev.gray()]
    pyr_j = [next_.gray()]
    for _ in range(params.pyramid_levels - 1):
        pyr_i.append(_downsample(pyr_i[-1]))
        pyr_j.append(_downsample(pyr_j[-1]))

    size = 2 * params.window_radius + 1
    step_limit = float(size)
    u = np.zeros_like(pyr_i[-1])
    v = np.zeros_like(pyr_i[-1])
    for level in range(params.pyramid_levels - 1, -1, -1):
        il = pyr_i[level]
        jl = pyr_j[level]
        h, w = il.shape
        if u.shape != il.shape:
            # displacements scale with the resolution ratio (roughly 2x)
            u = _upsample_to(u, il.shape, w / u.shape[1])
            v = _upsample_to(v, il.shape, h / v.shape[0])
        iy, ix = np.gradient(il)
        # zero-padded window sums keep border equations consistent between
        # the tensor and the residual side
        def window_sum(a):
            return ndi.uniform_filter(a, size, mode="constant")

        a11 = window_sum(ix * ix)
        a12 = window_sum(ix * iy)
        a22 = window_sum(iy * iy)
        trace = a11 + a22
        lam_min = 0.5 * (trace - np.sqrt((a11 - a22) ** 2 + 4.0 * a12 * a12))
        solvable = lam_min >= params.min_eigen_threshold
        det = a11 * a22 - a12 * a12
        det_safe = np.where(solvable, det, 1.0)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        best_step = np.inf
        stale = 0
        for _ in range(params.iterations_per_level):
            tx = xs + u
            ty = ys + v
            # out-of-bounds samples carry no information; zeroing their
            # residual keeps border errors from leaking into the window sums
            inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
            jw = _sample_bilinear(jl, tx, ty)
            it = np.where(inside, jw - il, 0.0)
            b1 = window_sum(ix * it)
            b2 = window_sum(iy * it)
            du = -(a22 * b1 - a12 * b2) / det_safe
            dv = -(-a12 * b1 + a11 * b2) / det_safe
            du = np.clip(du, -step_limit, step_limit)
            dv = np.clip(dv, -step_limit, step_limit)
            u = np.where(solvable, u + du, u)
            v = np.where(solvable, v + dv, v)
            # median filtering rejects isolated false locks so the next
            # warp starts from a clean field
            u = ndi.median_filter(u, _MEDIAN_SIZE)
            v = ndi.median_filter(v, _MEDIAN_SIZE)
            # bilinear interpolation error keeps the fixed point fuzzy at
            # fractional displacements; stop once steps stop shrinking
            step = float(np.abs(du[solvable]).mean()) if solvable.any() else 0.0
            if step < 1e-3:
                break
            if step < 0.9 * best_step:
                best_step = step
                stale = 0
            else:
                stale += 1
                if stale >= 2:
                    break
    return FlowField(np.stack([u, v], axis=-1).astype(np.float32))


# ---------------------------------------------------------------------------
# forward-backward dual matching
# ---------------------------------------------------------------------------

def forward_backward_check(
    fwd: FlowField, bwd: FlowField, fb_epsilon: float = 1.0
) -> CorrespondenceSet:
    """Dual matching: a tracked pixel survives when the backward flow at its
    forward target returns within fb_epsilon pixels of the start."""
    _require((fwd.height, fwd.width) == (bwd.height, bwd.width), "flow dimensions differ")
    _require(fb_epsilon > 0.0, "fb_epsilon must be positive")
    h, w = fwd.height, fwd.width
    offs = fwd.offsets.astype(np.float64)
    tx, ty, tracked = _flow_targets(offs)
    back = _sample_bilinear(bwd.offsets.astype(np.float64), tx, ty)
    ex = tx + back[..., 0] - np.arange(w)[None, :]
    ey = ty + back[..., 1] - np.arange(h)[:, None]
    err = np.hypot(ex, ey)
    err[~tracked] = np.inf
    dual = tracked & (err < fb_epsilon)
    return CorrespondenceSet(
        BinaryMask(tracked), BinaryMask(dual), err.astype(np.float32)
    )


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def warp_map(source: SoftmaxMap, flow: FlowField) -> tuple[SoftmaxMap, BinaryMask]:
    """Pull source scores along the flow; bilinear, renormalized per pixel.

    Pixels whose target leaves the image carry the uniform distribution and
    validity 0.
    """
    _require(
        (source.height, source.width) == (flow.height, flow.width),
        "flow and map dimensions differ",
    )
    raw, valid, _ = warp_scores_raw(
        source.scores.astype(np.float64), flow.offsets.astype(np.float64)
    )
    c = source.classes
    out = np.full(raw.shape, 1.0 / c, dtype=np.float64)
    sums = raw[valid].sum(axis=-1, keepdims=True)
    out[valid] = raw[valid] / np.maximum(sums, 1e-12)
    return SoftmaxMap(out.astype(np.float32)), BinaryMask(valid)


def warp_labels(source: LabelMap, flow: FlowField) -> tuple[LabelMap, BinaryMask]:
    """Pull labels along the flow with nearest-neighbor sampling.

    Fractional targets round half up; invalid pixels carry label 0 and
    validity 0.
    """
    _require(
        (source.height, source.width) == (flow.height, flow.width),
        "flow and map dimensions differ",
    )
    tx, ty, valid = _flow_targets(flow.offsets.astype(np.float64))
    h, w = source.height, source.width
    xi = np.floor(np.clip(tx, 0.0, w - 1.0) + 0.5).astype(np.intp)
    yi = np.floor(np.clip(ty, 0.0, h - 1.0) + 0.5).astype(np.intp)
    xi = np.minimum(xi, w - 1)
    yi = np.minimum(yi, h - 1)
    out = np.zeros((h, w), dtype=np.int32)
    out[valid] = source.labels[yi[valid], xi[valid]]
    return LabelMap(out, num_classes=source.num_classes), BinaryMask(valid)


def warp_image(source: Image, flow: FlowField) -> tuple[Image, BinaryMask]:
    """Pull image intensities along the flow; bilinear with edge clamping.

    Out-of-bounds targets sample the clamped border value; the returned
    mask marks in-bounds targets.
    """
    _require(
        (source.height, source.width) == (flow.height, flow.width),
        "flow and image dimensions differ",
    )
    tx, ty, valid = _flow_targets(flow.offsets.astype(np.float64))
    warped = _sample_bilinear(source.samples.astype(np.float64), tx, ty)
    return Image(np.clip(warped, 0.0, 1.0).astype(np.float32)), BinaryMask(valid)
