"""Synthetic evaluation sequences: perturbation chains with exact flow.

Each sequence starts from a labeled image and applies one randomly chosen
perturbation per step (translation, rotation, scaling, or an occluding
rectangle), plus minute Gaussian noise on the image only. Geometric steps
are exact affine maps, so the correspondence field between consecutive
frames is known analytically: the stored field lives on the new frame's
grid and maps each pixel to its source in the previous frame
(new(x) = old(x + flow(x)) wherever a source exists). Pixels without a
valid source, because they entered from outside the image or sit under
the occluder, are flagged in the occlusion mask and keep their previous
label.

Step magnitudes at severity k in 1..6:

- translation: length 2k px in a uniformly random direction
- rotation: 0.5k degrees about the image center
- scaling: factor 1 +/- 0.01k (random sign) about the center
- occlusion: axis-aligned rectangle of area fraction 0.02k at a uniform
  random position, filled with mid-gray 0.5
- Gaussian noise sigma: 0.002k, applied to the image on every step

The magnitudes keep ten composed steps in-distribution and are recorded in
every sequence manifest so runs are self-describing. Generation is a pure
function of (image, label, severity, length, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codecs
from .core import BinaryMask, FlowField, Image, LabelMap, _require
from .flow import warp_image, warp_labels

__all__ = [
    "KINDS",
    "PerturbationSpec",
    "SyntheticFrame",
    "SyntheticSequence",
    "step_magnitudes",
    "affine_pull_flow",
    "apply_flow_step",
    "perturb_step",
    "generate_sequence",
    "generate_suite",
    "save_sequence",
    "load_sequence",
]

KINDS = ("translation", "rotation", "scaling", "occlusion")

DEFAULT_LENGTH = 11
OCCLUDER_GRAY = 0.5


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation step: its kind, severity level, and noise sigma."""

    kind: str
    severity: int
    noise_sigma: float

    def __post_init__(self) -> None:
        _require(self.kind in KINDS, f"kind must be one of {KINDS}")
        _require(1 <= self.severity <= 6, "severity must lie in [1, 6]")
        _require(self.noise_sigma >= 0.0, "noise_sigma must be non-negative")


@dataclass(frozen=True)
class SyntheticFrame:
    """A generated frame plus its link to the previous frame.

    gt_flow_from_prev and occluded_from_prev are None on the first frame.
    """

    image: Image
    label: LabelMap
    gt_flow_from_prev: FlowField | None
    occluded_from_prev: BinaryMask | None

    def __post_init__(self) -> None:
        dims = (self.image.height, self.image.width)
        _require((self.label.height, self.label.width) == dims,
                 "image and label dimensions differ")
        if self.gt_flow_from_prev is not None:
            _require((self.gt_flow_from_prev.height, self.gt_flow_from_prev.width) == dims,
                     "flow dimensions differ from the frame")
        if self.occluded_from_prev is not None:
            _require((self.occluded_from_prev.height, self.occluded_from_prev.width) == dims,
                     "occlusion mask dimensions differ from the frame")


@dataclass(frozen=True)
class SyntheticSequence:
    frames: list[SyntheticFrame]
    severity: int
    seed: int
    step_kinds: list[str]

    def __post_init__(self) -> None:
        _require(len(self.frames) >= 1, "sequence needs at least one frame")
        _require(len(self.step_kinds) == len(self.frames) - 1,
                 "one step kind per generated frame")

    @property
    def length(self) -> int:
        return len(self.frames)


def step_magnitudes(severity: int) -> dict[str, float]:
    _require(1 <= severity <= 6, "severity must lie in [1, 6]")
    return {
        "translation_px": 2.0 * severity,
        "rotation_deg": 0.5 * severity,
        "scale_delta": 0.01 * severity,
        "occlusion_frac": 0.02 * severity,
        "noise_sigma": 0.002 * severity,
    }


# ---------------------------------------------------------------------------
# exact affine steps
# ---------------------------------------------------------------------------

def affine_pull_flow(
    height: int, width: int, matrix: np.ndarray, offset: np.ndarray
) -> FlowField:
    """Correspondence field of an affine source map src = A @ [x, y] + b.

    The field stores src - target per pixel, cast once to float32 so the
    values used for resampling equal the values later round-tripped
    through flow files.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sx = matrix[0, 0] * xs + matrix[0, 1] * ys + offset[0]
    sy = matrix[1, 0] * xs + matrix[1, 1] * ys + offset[1]
    return FlowField(np.stack([sx - xs, sy - ys], axis=-1).astype(np.float32))


def apply_flow_step(
    image: Image, label: LabelMap, flow: FlowField
) -> tuple[Image, LabelMap, BinaryMask]:
    """Resample a frame along an exact correspondence field.

    Labels move by nearest neighbor, intensities bilinearly; pixels whose
    source lies outside the image are reported occluded.
    """
    new_label, valid = warp_labels(label, flow)
    new_image, _ = warp_image(image, flow)
    return new_image, new_label, BinaryMask(~valid.as_bool())


def _rotation_pull(height: int, width: int, degrees: float) -> FlowField:
    angle = math.radians(degrees)
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    cos_a = math.cos(-angle)
    sin_a = math.sin(-angle)
    matrix = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    center = np.array([cx, cy])
    offset = center - matrix @ center
    return affine_pull_flow(height, width, matrix, offset)


def _scaling_pull(height: int, width: int, factor: float) -> FlowField:
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    matrix = np.array([[1.0 / factor, 0.0], [0.0, 1.0 / factor]])
    center = np.array([cx, cy])
    offset = center - matrix @ center
    return affine_pull_flow(height, width, matrix, offset)


def _translation_pull(height: int, width: int, dx: float, dy: float) -> FlowField:
    # content moves by (dx, dy); each new pixel pulls from x - dx, y - dy
    field = np.empty((height, width, 2), dtype=np.float32)
    field[..., 0] = -dx
    field[..., 1] = -dy
    return FlowField(field)


def perturb_step(
    frame: SyntheticFrame, spec: PerturbationSpec, rng: np.random.Generator
) -> SyntheticFrame:
    """Generate the next frame from `frame` under one perturbation step.

    The random draws (direction, sign, rectangle position, noise field)
    are consumed in a fixed order independent of kind and severity, so
    sequences generated from the same seed stay aligned across severities.
    """
    h, w = frame.image.height, frame.image.width
    mags = step_magnitudes(spec.severity)
    direction = rng.uniform(0.0, 2.0 * math.pi)
    sign_draw = rng.uniform()
    rect_y = rng.uniform()
    rect_x = rng.uniform()
    noise = rng.standard_normal(frame.image.samples.shape)

    if spec.kind == "occlusion":
        samples = frame.image.samples.copy()
        frac = mags["occlusion_frac"]
        rh = min(h, max(1, round(h * math.sqrt(frac))))
        rw = min(w, max(1, round(w * math.sqrt(frac))))
        top = int(rect_y * (h - rh + 1))
        left = int(rect_x * (w - rw + 1))
        samples[top:top + rh, left:left + rw] = OCCLUDER_GRAY
        image = Image(samples)
        label = frame.label
        flow = FlowField.zeros(h, w)
        occluded = np.zeros((h, w), dtype=bool)
        occluded[top:top + rh, left:left + rw] = True
    else:
        if spec.kind == "translation":
            length = mags["translation_px"]
            flow = _translation_pull(
                h, w, length * math.cos(direction), length * math.sin(direction)
            )
        elif spec.kind == "rotation":
            flow = _rotation_pull(h, w, mags["rotation_deg"])
        else:
            factor = 1.0 + mags["scale_delta"] * (1.0 if sign_draw < 0.5 else -1.0)
            flow = _scaling_pull(h, w, factor)
        image, label, occl_mask = apply_flow_step(frame.image, frame.label, flow)
        occluded = occl_mask.as_bool()

    if spec.noise_sigma > 0.0:
        noisy = np.clip(
            image.samples.astype(np.float64) + spec.noise_sigma * noise, 0.0, 1.0
        )
        image = Image(noisy.astype(np.float32))
    return SyntheticFrame(image, label, flow, BinaryMask(occluded))


def generate_sequence(
    image: Image,
    label: LabelMap,
    severity: int,
    length: int = DEFAULT_LENGTH,
    seed: int = 0,
) -> SyntheticSequence:
    """Perturbation chain of `length` frames; frame 0 is the input unchanged.

    The perturbation kind is resampled uniformly at every step and
    recorded; severity stays fixed for the whole sequence.
    """
    _require(1 <= severity <= 6, "severity must lie in [1, 6]")
    _require(length >= 1, "length must be >= 1")
    _require((image.height, image.width) == (label.height, label.width),
             "image and label dimensions differ")
    rng = np.random.default_rng(seed)
    sigma = step_magnitudes(severity)["noise_sigma"]
    frames = [SyntheticFrame(image, label, None, None)]
    kinds: list[str] = []
    for _ in range(length - 1):
        kind = KINDS[int(rng.integers(0, len(KINDS)))]
        kinds.append(kind)
        spec = PerturbationSpec(kind=kind, severity=severity, noise_sigma=sigma)
        frames.append(perturb_step(frames[-1], spec, rng))
    return SyntheticSequence(frames, severity=severity, seed=seed, step_kinds=kinds)


def generate_suite(
    image: Image, label: LabelMap, seed: int = 0, length: int = DEFAULT_LENGTH
) -> list[SyntheticSequence]:
    """One sequence per severity 1..6 with per-severity derived seeds."""
    child_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(6)]
    return [
        generate_sequence(image, label, severity=k, length=length, seed=child_seeds[k - 1])
        for k in range(1, 7)
    ]


# ---------------------------------------------------------------------------
# directory layout
# ---------------------------------------------------------------------------

def save_sequence(seq: SyntheticSequence, out_dir: str | Path) -> None:
    """Persist a sequence as frame/label/flow/occl files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(seq.frames):
        codecs.write_image_png(out / f"frame_{i:03d}.png", fr.image)
        codecs.write_label_png(out / f"label_{i:03d}.png", fr.label)
        if i > 0:
            codecs.write_flo(out / f"flow_{i:03d}.flo", fr.gt_flow_from_prev)
            codecs.write_mask_png(out / f"occl_{i:03d}.png", fr.occluded_from_prev)
    manifest: dict[str, object] = {
        "severity": seq.severity,
        "seed": seq.seed,
        "length": seq.length,
    }
    for key, value in step_magnitudes(seq.severity).items():
        manifest[key] = value
    for i, kind in enumerate(seq.step_kinds, start=1):
        manifest[f"step_{i:03d}"] = kind
    codecs.write_keyvalues(out / "manifest.txt", manifest)


def load_sequence(seq_dir: str | Path) -> SyntheticSequence:
    """Load a persisted sequence. Image intensities come back 8-bit
    quantized; labels, flows, and occlusion masks are exact."""
    src = Path(seq_dir)
    manifest = codecs.read_keyvalues(src / "manifest.txt")
    length = int(manifest["length"])
    frames: list[SyntheticFrame] = []
    for i in range(length):
        image = codecs.read_image_png(src / f"frame_{i:03d}.png")
        label = codecs.read_label_png(src / f"label_{i:03d}.png")
        if i == 0:
            frames.append(SyntheticFrame(image, label, None, None))
        else:
            flow = codecs.read_flo(src / f"flow_{i:03d}.flo")
            occl = codecs.read_mask_png(src / f"occl_{i:03d}.png")
            frames.append(SyntheticFrame(image, label, flow, occl))
    kinds = [manifest[f"step_{i:03d}"] for i in range(1, length)]
    return SyntheticSequence(
        frames,
        severity=int(manifest["severity"]),
        seed=int(manifest["seed"]),
        step_kinds=kinds,
    )
