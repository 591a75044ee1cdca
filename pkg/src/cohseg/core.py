"""Core raster value types shared by the flow, synthesis, metric, and loss layers.

Every type copies its input into a numpy array, validates its invariants on
construction, and marks the storage read-only. Instances are immutable and
safe to share freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SCORE_SUM_TOL",
    "Image",
    "SoftmaxMap",
    "LabelMap",
    "BinaryMask",
    "FlowField",
    "CorrespondenceSet",
    "LossConfig",
    "argmax_labels",
]

# Per-pixel probability rows must sum to one within this tolerance.
SCORE_SUM_TOL = 1e-5


def _own(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True, eq=False)
class Image:
    """Grayscale (H, W) or RGB (H, W, 3) image with intensities in [0, 1]."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.samples, dtype=np.float32)
        _require(arr.ndim in (2, 3), "image must be (H, W) or (H, W, 3)")
        if arr.ndim == 3:
            _require(arr.shape[2] == 3, "color images must have exactly 3 channels")
        _require(arr.shape[0] >= 1 and arr.shape[1] >= 1, "image must be at least 1x1")
        _require(bool(np.isfinite(arr).all()), "image samples must be finite")
        _require(
            float(arr.min()) >= 0.0 and float(arr.max()) <= 1.0,
            "image samples must lie in [0, 1]",
        )
        object.__setattr__(self, "samples", _own(arr))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 2 else 3

    def gray(self) -> np.ndarray:
        """Luma (BT.601) as float64, shape (H, W)."""
        if self.samples.ndim == 2:
            return self.samples.astype(np.float64)
        r, g, b = (self.samples[..., i].astype(np.float64) for i in range(3))
        return 0.299 * r + 0.587 * g + 0.114 * b


@dataclass(frozen=True, eq=False)
class SoftmaxMap:
    """Per-pixel class probabilities, shape (H, W, C) with C >= 2.

    Every score lies in [0, 1] and each pixel's scores sum to one within
    SCORE_SUM_TOL. The invariant is checked on every construction, which
    includes every file read.
    """

    scores: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.scores, dtype=np.float32)
        _require(arr.ndim == 3, "scores must be (H, W, C)")
        _require(arr.shape[0] >= 1 and arr.shape[1] >= 1, "map must be at least 1x1")
        _require(arr.shape[2] >= 2, "softmax map needs at least 2 classes")
        _require(bool(np.isfinite(arr).all()), "scores must be finite")
        _require(
            float(arr.min()) >= 0.0 and float(arr.max()) <= 1.0,
            "scores must lie in [0, 1]",
        )
        sums = arr.sum(axis=2, dtype=np.float64)
        _require(
            float(np.abs(sums - 1.0).max()) <= SCORE_SUM_TOL,
            f"per-pixel scores must sum to 1 within {SCORE_SUM_TOL}",
        )
        object.__setattr__(self, "scores", _own(arr))

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def classes(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer class index per pixel, shape (H, W).

    num_classes is optional; when given, every label must be < num_classes.
    """

    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self) -> None:
        src = np.asarray(self.labels)
        _require(
            src.dtype == np.bool_ or np.issubdtype(src.dtype, np.integer),
            "labels must have an integer dtype",
        )
        arr = np.array(src, dtype=np.int32)
        _require(arr.ndim == 2, "labels must be (H, W)")
        _require(arr.shape[0] >= 1 and arr.shape[1] >= 1, "map must be at least 1x1")
        _require(int(arr.min()) >= 0, "labels must be non-negative")
        if self.num_classes is not None:
            _require(self.num_classes >= 1, "num_classes must be positive")
            _require(
                int(arr.max()) < self.num_classes,
                "every label must be smaller than num_classes",
            )
        object.__setattr__(self, "labels", _own(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel membership flags stored as uint8 values 0 or 1."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.bits)
        _require(arr.ndim == 2, "mask must be (H, W)")
        _require(arr.shape[0] >= 1 and arr.shape[1] >= 1, "mask must be at least 1x1")
        if arr.dtype != np.bool_:
            _require(
                bool(np.isin(arr, (0, 1)).all()),
                "mask values must be exactly 0 or 1",
            )
        object.__setattr__(self, "bits", _own(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement field, shape (H, W, 2) holding (u, v) in pixels.

    offsets[..., 0] is the x displacement u and offsets[..., 1] the
    y displacement v; a pixel at (x, y) corresponds to (x + u, y + v).
    """

    offsets: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.offsets, dtype=np.float32)
        _require(arr.ndim == 3 and arr.shape[2] == 2, "offsets must be (H, W, 2)")
        _require(arr.shape[0] >= 1 and arr.shape[1] >= 1, "field must be at least 1x1")
        _require(bool(np.isfinite(arr).all()), "flow offsets must be finite")
        object.__setattr__(self, "offsets", _own(arr))

    @property
    def height(self) -> int:
        return self.offsets.shape[0]

    @property
    def width(self) -> int:
        return self.offsets.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.offsets[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.offsets[..., 1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Tracked pixel set, its dual-matched subset, and the round-trip error.

    tracked marks pixels whose flow target stays inside the image;
    dual_matched marks tracked pixels that also survive the
    forward-backward check. fb_error holds the round-trip distance in
    pixels and is +inf outside the tracked set.
    """

    tracked: BinaryMask
    dual_matched: BinaryMask
    fb_error: np.ndarray

    def __post_init__(self) -> None:
        err = np.array(self.fb_error, dtype=np.float32)
        shape = (self.tracked.height, self.tracked.width)
        _require(
            (self.dual_matched.height, self.dual_matched.width) == shape,
            "tracked and dual_matched dimensions differ",
        )
        _require(err.shape == shape, "fb_error dimensions differ from masks")
        _require(
            bool((self.dual_matched.bits <= self.tracked.bits).all()),
            "dual_matched must be a subset of tracked",
        )
        on_track = self.tracked.as_bool()
        if on_track.any():
            vals = err[on_track]
            _require(
                bool(np.isfinite(vals).all()) and float(vals.min()) >= 0.0,
                "fb_error must be finite and non-negative on tracked pixels",
            )
        object.__setattr__(self, "fb_error", _own(err))

    @property
    def height(self) -> int:
        return self.tracked.height

    @property
    def width(self) -> int:
        return self.tracked.width


@dataclass(frozen=True)
class LossConfig:
    """Thresholds and weights for the coherency loss stack.

    theta is the boundary band width in pixels, gamma the confidence gap
    that admits a pixel into the trusted disagreement set, alpha and beta
    weight the boundary and global terms, and fb_epsilon is the
    forward-backward acceptance radius in pixels.
    """

    theta: int = 15
    gamma: float = 0.05
    alpha: float = 1.0
    beta: float = 5e-5
    fb_epsilon: float = 1.0

    def __post_init__(self) -> None:
        _require(int(self.theta) == self.theta and self.theta >= 1, "theta must be an integer >= 1")
        _require(0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)")
        _require(self.alpha >= 0.0, "alpha must be non-negative")
        _require(self.beta >= 0.0, "beta must be non-negative")
        _require(self.fb_epsilon > 0.0, "fb_epsilon must be positive")


def argmax_labels(softmax_map: SoftmaxMap) -> LabelMap:
    """Per-pixel index of the maximal score; ties break to the lowest index."""
    labels = np.argmax(softmax_map.scores, axis=2).astype(np.int32)
    return LabelMap(labels, num_classes=softmax_map.classes)
