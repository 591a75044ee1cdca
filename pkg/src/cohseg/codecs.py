"""File codecs: SFM1 score rasters, Middlebury .flo flow, PNG images and labels.

All writers are atomic (temp file + rename) and all round trips are
bit-exact. The byte-level encode/decode pairs are exposed separately so
property tests can exercise them without touching the filesystem.

SFM1 layout: magic b"SFM1", three little-endian uint32 (H, W, C), then
H*W*C little-endian float32 in row-major (y, x, class) order.

Flow layout: little-endian float32 sentinel 202021.25, int32 W, int32 H,
then row-major interleaved (u, v) float32 pairs.
"""

from __future__ import annotations

import os
import struct
import uuid
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import BinaryMask, FlowField, Image, LabelMap, SoftmaxMap

__all__ = [
    "CodecError",
    "BadMagicError",
    "TruncatedPayloadError",
    "DimensionOverflowError",
    "encode_sfm",
    "decode_sfm",
    "read_sfm",
    "write_sfm",
    "read_sfm_raw",
    "write_sfm_raw",
    "encode_flo",
    "decode_flo",
    "read_flo",
    "write_flo",
    "read_label_png",
    "write_label_png",
    "read_image_png",
    "write_image_png",
    "read_mask_png",
    "write_mask_png",
    "read_keyvalues",
    "write_keyvalues",
]


class CodecError(ValueError):
    """A file does not conform to its declared format."""


class BadMagicError(CodecError):
    """Leading magic bytes do not identify the expected format."""


class TruncatedPayloadError(CodecError):
    """The payload is shorter than the header promises."""


class DimensionOverflowError(CodecError):
    """Declared dimensions are zero, negative, or implausibly large."""


_SFM_MAGIC = b"SFM1"
_FLO_SENTINEL = 202021.25
# Refuse rasters beyond 2^28 elements so corrupt headers cannot trigger
# huge allocations.
_MAX_ELEMS = 1 << 28


def _write_bytes_atomic(path: str | os.PathLike, data: bytes) -> None:
    target = Path(path)
    tmp = target.with_name(f".{target.name}.{uuid.uuid4().hex[:8]}.tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, target)
    finally:
        tmp.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# SFM1
# ---------------------------------------------------------------------------

def encode_sfm(scores: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(scores, dtype="<f4")
    if arr.ndim != 3:
        raise CodecError("SFM payload must be a (H, W, C) array")
    h, w, c = arr.shape
    if min(h, w, c) < 1 or h * w * c > _MAX_ELEMS or max(h, w, c) > 0xFFFFFFFF:
        raise DimensionOverflowError(f"unreasonable SFM dimensions {h}x{w}x{c}")
    return _SFM_MAGIC + struct.pack("<III", h, w, c) + arr.tobytes()


def decode_sfm(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedPayloadError("file shorter than the SFM magic")
    if data[:4] != _SFM_MAGIC:
        raise BadMagicError(f"expected SFM1 magic, found {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedPayloadError("file shorter than the SFM header")
    h, w, c = struct.unpack("<III", data[4:16])
    if min(h, w, c) < 1 or h * w * c > _MAX_ELEMS:
        raise DimensionOverflowError(f"unreasonable SFM dimensions {h}x{w}x{c}")
    expected = 16 + 4 * h * w * c
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"SFM payload holds {(len(data) - 16) // 4} of {h * w * c} floats"
        )
    if len(data) > expected:
        raise CodecError("trailing bytes after the SFM payload")
    flat = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=16)
    return flat.reshape(h, w, c).astype(np.float32)


def write_sfm(path: str | os.PathLike, softmax_map: SoftmaxMap) -> None:
    _write_bytes_atomic(path, encode_sfm(softmax_map.scores))


def read_sfm(path: str | os.PathLike) -> SoftmaxMap:
    scores = decode_sfm(Path(path).read_bytes())
    try:
        return SoftmaxMap(scores)
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from exc


def write_sfm_raw(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write an arbitrary (H, W, C) float raster, e.g. a gradient map."""
    _write_bytes_atomic(path, encode_sfm(values))


def read_sfm_raw(path: str | os.PathLike) -> np.ndarray:
    return decode_sfm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Middlebury flow
# ---------------------------------------------------------------------------

def encode_flo(offsets: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(offsets, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise CodecError("flow payload must be a (H, W, 2) array")
    h, w = arr.shape[:2]
    if min(h, w) < 1 or h * w * 2 > _MAX_ELEMS or max(h, w) > 0x7FFFFFFF:
        raise DimensionOverflowError(f"unreasonable flow dimensions {h}x{w}")
    return struct.pack("<fii", _FLO_SENTINEL, w, h) + arr.tobytes()


def decode_flo(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedPayloadError("file shorter than the flow sentinel")
    (sentinel,) = struct.unpack("<f", data[:4])
    if sentinel != _FLO_SENTINEL:
        raise BadMagicError(f"expected flow sentinel {_FLO_SENTINEL}, found {sentinel}")
    if len(data) < 12:
        raise TruncatedPayloadError("file shorter than the flow header")
    w, h = struct.unpack("<ii", data[4:12])
    if min(h, w) < 1 or h * w * 2 > _MAX_ELEMS:
        raise DimensionOverflowError(f"unreasonable flow dimensions {h}x{w}")
    expected = 12 + 8 * h * w
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"flow payload holds {(len(data) - 12) // 4} of {h * w * 2} floats"
        )
    if len(data) > expected:
        raise CodecError("trailing bytes after the flow payload")
    flat = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=12)
    return flat.reshape(h, w, 2).astype(np.float32)


def write_flo(path: str | os.PathLike, flow: FlowField) -> None:
    _write_bytes_atomic(path, encode_flo(flow.offsets))


def read_flo(path: str | os.PathLike) -> FlowField:
    offsets = decode_flo(Path(path).read_bytes())
    try:
        return FlowField(offsets)
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def _png_bytes(img: PILImage.Image) -> bytes:
    buf = BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _open_png(path: str | os.PathLike) -> PILImage.Image:
    img = PILImage.open(path)
    img.load()
    if img.format != "PNG":
        raise CodecError(f"{path}: expected a PNG file, found {img.format}")
    return img


def write_label_png(path: str | os.PathLike, labels: LabelMap) -> None:
    """Write labels as 8-bit grayscale when they fit, 16-bit otherwise."""
    arr = labels.labels
    top = int(arr.max())
    if top > 0xFFFF:
        raise CodecError(f"label {top} exceeds the 16-bit PNG range")
    if top < 256:
        img = PILImage.fromarray(arr.astype(np.uint8), mode="L")
    else:
        img = PILImage.fromarray(arr.astype(np.uint16))
    _write_bytes_atomic(path, _png_bytes(img))


def read_label_png(path: str | os.PathLike) -> LabelMap:
    img = _open_png(path)
    if img.mode == "P":
        raise CodecError(f"{path}: palette PNGs are not supported for labels")
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.int32)
    elif img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.int32)
        if arr.min() < 0 or arr.max() > 0xFFFF:
            raise CodecError(f"{path}: label values outside the 16-bit range")
    else:
        raise CodecError(f"{path}: unsupported PNG mode {img.mode} for labels")
    return LabelMap(arr)


def write_image_png(path: str | os.PathLike, image: Image) -> None:
    arr = np.round(image.samples.astype(np.float64) * 255.0).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    _write_bytes_atomic(path, _png_bytes(PILImage.fromarray(arr, mode=mode)))


def read_image_png(path: str | os.PathLike) -> Image:
    img = _open_png(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32) / 255.0
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float32) / 255.0
    else:
        raise CodecError(
            f"{path}: unsupported PNG mode {img.mode}; images must be 8-bit gray or RGB"
        )
    return Image(arr)


def write_mask_png(path: str | os.PathLike, mask: BinaryMask) -> None:
    arr = (mask.bits * np.uint8(255)).astype(np.uint8)
    _write_bytes_atomic(path, _png_bytes(PILImage.fromarray(arr, mode="L")))


def read_mask_png(path: str | os.PathLike) -> BinaryMask:
    img = _open_png(path)
    if img.mode != "L":
        raise CodecError(f"{path}: masks must be 8-bit grayscale PNGs")
    return BinaryMask(np.asarray(img) > 127)


# ---------------------------------------------------------------------------
# key=value reports and manifests
# ---------------------------------------------------------------------------

def write_keyvalues(path: str | os.PathLike, mapping: dict) -> None:
    lines = [f"{key}={mapping[key]}" for key in mapping]
    _write_bytes_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_keyvalues(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CodecError(f"{path}: malformed line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
