"""Shared test utilities: synthetic inputs and independent oracles."""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from cohseg import BinaryMask, CorrespondenceSet, FlowField, Image, LabelMap, SoftmaxMap


def textured(height: int, width: int, seed: int = 0, sigma: float = 2.0) -> np.ndarray:
    """Smoothed noise, range-normalized to [0, 1]; well textured everywhere."""
    rng = np.random.default_rng(seed)
    t = ndi.gaussian_filter(rng.random((height, width)), sigma)
    t = (t - t.min()) / (t.max() - t.min())
    return t.astype(np.float32)


def random_softmax(rng: np.random.Generator, h: int, w: int, c: int) -> SoftmaxMap:
    raw = rng.random((h, w, c)) + 0.05
    return SoftmaxMap((raw / raw.sum(axis=2, keepdims=True)).astype(np.float32))


def random_labels(rng: np.random.Generator, h: int, w: int, c: int) -> LabelMap:
    return LabelMap(rng.integers(0, c, size=(h, w)).astype(np.int32), num_classes=c)


def blob_labels(h: int, w: int, seed: int = 0) -> LabelMap:
    """A filled ellipse foreground on background, binary."""
    rng = np.random.default_rng(seed)
    cy = h / 2 + rng.uniform(-h / 8, h / 8)
    cx = w / 2 + rng.uniform(-w / 8, w / 8)
    ys, xs = np.mgrid[0:h, 0:w]
    mask = ((ys - cy) / (h / 4)) ** 2 + ((xs - cx) / (w / 4)) ** 2 <= 1.0
    return LabelMap(mask.astype(np.int32), num_classes=2)


def full_correspondence(h: int, w: int) -> CorrespondenceSet:
    ones = BinaryMask(np.ones((h, w), dtype=np.uint8))
    return CorrespondenceSet(ones, ones, np.zeros((h, w), dtype=np.float32))


def constant_flow(h: int, w: int, u: float, v: float) -> FlowField:
    f = np.empty((h, w, 2), dtype=np.float32)
    f[..., 0] = u
    f[..., 1] = v
    return FlowField(f)


def image_of(arr: np.ndarray) -> Image:
    return Image(np.asarray(arr, dtype=np.float32))


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def stb_pair_counts_bruteforce(
    prev_labels: np.ndarray,
    cur_labels: np.ndarray,
    gt_flow: np.ndarray,
    occluded: np.ndarray,
    est_tracked: np.ndarray,
    region: np.ndarray | None,
) -> tuple[int, int]:
    """Explicit per-pixel loop for one frame pair: (agreements, evaluated)."""
    h, w = cur_labels.shape
    agree = 0
    total = 0
    for y in range(h):
        for x in range(w):
            if occluded[y, x] or not est_tracked[y, x]:
                continue
            if region is not None and not region[y, x]:
                continue
            sx = x + float(gt_flow[y, x, 0])
            sy = y + float(gt_flow[y, x, 1])
            if sx < 0 or sx > w - 1 or sy < 0 or sy > h - 1:
                continue
            nx = int(np.floor(sx + 0.5))
            ny = int(np.floor(sy + 0.5))
            total += 1
            if prev_labels[ny, nx] == cur_labels[y, x]:
                agree += 1
    return agree, total


def miou_bruteforce(preds: list[np.ndarray], gts: list[np.ndarray], classes: int) -> float:
    """Set-counting IoU per class over pooled frames."""
    ious = []
    for c in range(classes):
        inter = 0
        union = 0
        for p, g in zip(preds, gts):
            for y in range(p.shape[0]):
                for x in range(p.shape[1]):
                    in_p = p[y, x] == c
                    in_g = g[y, x] == c
                    inter += in_p and in_g
                    union += in_p or in_g
        if union > 0:
            ious.append(inter / union)
    return float(np.mean(ious)) * 100.0


def jaccard_loss_bruteforce(pred_fg: np.ndarray, gt_fg: np.ndarray) -> float:
    """1 - IoU from direct set counting of hard binary masks."""
    inter = int(np.sum(pred_fg & gt_fg))
    union = int(np.sum(pred_fg | gt_fg))
    if union == 0:
        return 0.0
    return 1.0 - inter / union


def finite_difference_grad(func, base: np.ndarray, coords, step: float = 1e-4) -> dict:
    """Central finite differences of a scalar function at selected entries."""
    out = {}
    for idx in coords:
        hi = base.copy()
        lo = base.copy()
        hi[idx] += step
        lo[idx] -= step
        out[idx] = (func(hi) - func(lo)) / (2.0 * step)
    return out


def disc_pixels(cy: int, cx: int, radius: int, h: int, w: int) -> set[tuple[int, int]]:
    out = set()
    for y in range(h):
        for x in range(w):
            if (y - cy) ** 2 + (x - cx) ** 2 <= radius * radius:
                out.add((y, x))
    return out
