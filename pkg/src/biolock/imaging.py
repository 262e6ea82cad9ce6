"""Raster primitives shared by the fingerprint and iris pipelines.

Images are immutable value objects wrapping float64/bool numpy arrays in
row-major (height, width) layout.  Intensities live in [0, 1]; 8-bit values
appear only at the PGM I/O boundary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    EvenKernel,
    EvenWindow,
    MalformedHeader,
    TruncatedData,
    UnsupportedMaxval,
)

FIELD_KINDS = ("orientation", "frequency", "coherence")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GrayImage:
    """Grayscale raster, float64 intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("GrayImage needs a non-empty 2-D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GrayImage intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("GrayImage intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(arr))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryImage:
    """Boolean raster (mask, binarized image, or skeleton)."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("BinaryImage needs a non-empty 2-D array")
        object.__setattr__(self, "bits", _freeze(arr.astype(bool)))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class FloatField:
    """Per-pixel or per-block real-valued field (orientation/frequency/coherence)."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("FloatField needs a non-empty 2-D array")
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "orientation":
            if arr.min() < 0.0 or arr.max() >= np.pi:
                raise ValueError("orientation values must lie in [0, pi)")
        elif self.kind == "frequency":
            if arr.min() < 0.0:
                raise ValueError("frequency values must be >= 0")
        else:
            if arr.min() < 0.0 or arr.max() > 1.0 + 1e-12:
                raise ValueError("coherence values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# PGM (P5) I/O

_PGM_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_tokens(data: bytes, count: int):
    """Read whitespace/comment-separated header tokens, return (tokens, offset)."""
    tokens = []
    pos = 0
    for _ in range(count):
        m = _PGM_TOKEN.match(data[pos:])
        if not m:
            raise MalformedHeader("incomplete PGM header")
        tokens.append(m.group(1))
        pos += m.end(1)
    return tokens, pos


def decode_pgm(data: bytes) -> GrayImage:
    """Decode a binary PGM (P5, maxval 255) into a GrayImage (v/255 mapping)."""
    if not data.startswith(b"P5"):
        raise MalformedHeader("not a binary PGM (P5) file")
    try:
        tokens, pos = _read_tokens(data[2:], 3)
    except MalformedHeader:
        raise
    width, height, maxval = (int(t) for t in tokens)
    if width <= 0 or height <= 0:
        raise MalformedHeader("non-positive dimensions")
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} unsupported (need 255)")
    # exactly one whitespace byte separates the header from the payload
    payload = data[2 + pos + 1:]
    if len(payload) < width * height:
        raise TruncatedData(
            f"payload has {len(payload)} bytes, expected {width * height}"
        )
    raw = np.frombuffer(payload[: width * height], dtype=np.uint8)
    return GrayImage(raw.reshape(height, width).astype(np.float64) / 255.0)


def encode_pgm(img: GrayImage) -> bytes:
    """Encode a GrayImage as binary PGM (P5, maxval 255)."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    payload = np.rint(img.pixels * 255.0).clip(0, 255).astype(np.uint8).tobytes()
    return header + payload


def encode_pgm_raster(raster: np.ndarray) -> bytes:
    """Encode an arbitrary real raster as PGM after min-max scaling to [0, 1]."""
    arr = np.asarray(raster, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        scaled = np.zeros_like(arr)
    else:
        scaled = (arr - lo) / (hi - lo)
    return encode_pgm(GrayImage(scaled))


# ---------------------------------------------------------------------------
# Filtering

def _correlate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Replicated-edge correlation, accumulating kernel entries in row-major
    order so the result is bit-identical to a naive nested-loop evaluation."""
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    padded = np.pad(arr, ((ry, ry), (rx, rx)), mode="edge")
    h, w = arr.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


def convolve(img: GrayImage | np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate an image with an odd-sized kernel (replicated edges).

    Output is a raw real raster the same size as the input; values are not
    renormalized.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise EvenKernel(f"kernel must be odd-sized in both dimensions, got {kernel.shape}")
    arr = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    return _correlate(arr, kernel)


SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def gradients(img: GrayImage) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradients; x increases rightward, y downward.

    Raw signed responses, replicated edges.
    """
    gx = _correlate(img.pixels, SOBEL_X)
    # Correlating the transpose with SOBEL_X accumulates each kernel row in the
    # order -c, +c, so constant regions cancel exactly; a direct SOBEL_Y pass
    # sums -c-2c-c per column and leaves 1-ulp residue on constant input.
    gy = _correlate(img.pixels.T, SOBEL_X).T
    return gx, gy


def morph_close_open(mask: BinaryImage, radius: int) -> BinaryImage:
    """Morphological closing then opening with a square (2r+1) element.

    Pixels beyond the border count as background for dilation and as
    foreground for erosion, so an all-true mask is a fixed point.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    size = 2 * radius + 1
    bits = mask.bits

    def dilate(b):
        return ndimage.maximum_filter(b, size=size, mode="constant", cval=False)

    def erode(b):
        return ndimage.minimum_filter(b, size=size, mode="constant", cval=True)

    closed = erode(dilate(bits))
    opened = dilate(erode(closed))
    return BinaryImage(opened)


def adaptive_threshold(raster: GrayImage | np.ndarray, window: int) -> BinaryImage:
    """Pixel true iff its value exceeds the local mean over an odd window.

    Ties go to false; a tiny epsilon absorbs float round-off so a constant
    image stays all-false.
    """
    if window < 3 or window % 2 == 0:
        raise EvenWindow(f"window must be odd and >= 3, got {window}")
    arr = raster.pixels if isinstance(raster, GrayImage) else np.asarray(raster, dtype=np.float64)
    local_mean = ndimage.uniform_filter(arr, size=window, mode="nearest")
    return BinaryImage(arr > local_mean + 1e-12)


# ---------------------------------------------------------------------------
# Thinning

def _neighbor_stack(bits: np.ndarray) -> list[np.ndarray]:
    """8-neighborhood planes P2..P9 (N, NE, E, SE, S, SW, W, NW) of a padded image."""
    p = np.pad(bits, 1, mode="constant", constant_values=False).astype(np.uint8)
    h, w = bits.shape
    # offsets relative to the center pixel, y down
    offs = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    return [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in offs]


def thin(img: BinaryImage) -> BinaryImage:
    """Two-subiteration parallel thinning, iterated until stable.

    Deletes only foreground pixels, so the result is always a subset of the
    input, and a stable result re-thins to itself.  Pixels with exactly two
    set neighbours that are cyclically adjacent (exposed line tips) are kept;
    without that guard the classic subiteration pair eats an extra pixel off
    stroke ends, shortening a 20-long bar below 18.
    """
    bits = img.bits.copy()
    while True:
        changed = False
        for phase in (0, 1):
            n = _neighbor_stack(bits)
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            b = sum(plane.astype(np.int32) for plane in n)
            seq = n + [n[0]]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32)
                    for i in range(8))
            adj_pairs = sum((seq[i] & seq[i + 1]).astype(np.int32) for i in range(8))
            cond = bits & (b >= 2) & (b <= 6) & (a == 1)
            cond &= ~((b == 2) & (adj_pairs >= 1))
            if phase == 0:
                cond &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if cond.any():
                bits[cond] = False
                changed = True
        if not changed:
            return BinaryImage(bits)
