"""Iris pipeline: localization, normalization, iris codes, and code matching.

The pipeline finds the pupil and iris circles in a grayscale eye image,
unwraps the annulus between them into a fixed-size polar strip, masks rows
likely covered by eyelids, and summarizes the strip as a binary iris code
under one of two schemes:

* ``haar`` -- signs of selected subbands of an unnormalized 2-D Haar
  multiresolution analysis of the strip.
* ``mellin`` -- signs of phases of complex log-radial/angular operators
  correlated with the strip over a grid of anchor windows.

Codes are compared with a masked Hamming distance minimized over small
circular shifts within each subband/anchor row, which absorbs in-plane eye
rotation between captures.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    BadDimensions,
    BadMagic,
    BoundaryNotFound,
    IncomparableCodes,
    NoPupilFound,
    SchemeMismatch,
    TruncatedData,
)
from .imaging import GrayImage, _freeze

# Localization.
PUPIL_THRESHOLD = 0.25
MIN_PUPIL_AREA = 16
BOUNDARY_SAMPLES = 256
BOUNDARY_START_OFFSET = 4.0

# Normalization.
DEFAULT_RADIAL = 64
DEFAULT_ANGULAR = 512
EYELID_SECTORS = ((math.pi / 3, 2 * math.pi / 3),
                  (4 * math.pi / 3, 5 * math.pi / 3))
EYELID_DEVIATION = 2.0

# Coding.
SCHEME_HAAR = "haar"
SCHEME_MELLIN = "mellin"
HAAR_LEVELS = 5
MELLIN_SETTINGS = ((2, 1), (4, 1), (3, 2))
MELLIN_WINDOW_ROWS = 16
MELLIN_WINDOW_COLS = 64
MELLIN_RADIAL_ANCHORS = 8
MELLIN_ANGULAR_ANCHORS = 64
MELLIN_MAX_INVALID = 0.5

# Matching.
DEFAULT_MAX_SHIFT = 8
MIN_COMPARABLE_BITS = 64

CODE_MAGIC = b"IRC1"
_SCHEME_CODE = {SCHEME_HAAR: 0, SCHEME_MELLIN: 1}
_CODE_SCHEME = {v: k for k, v in _SCHEME_CODE.items()}


# ---------------------------------------------------------------------------
# Types

@dataclass(frozen=True)
class IrisGeometry:
    """Pupil and iris circles sharing a center, in pixel coordinates."""

    center_x: float
    center_y: float
    pupil_r: float
    iris_r: float

    def __post_init__(self):
        for name in ("center_x", "center_y", "pupil_r", "iris_r"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite number")
        if self.pupil_r < 4.0:
            raise ValueError("pupil_r must be >= 4 pixels")
        if self.iris_r <= self.pupil_r:
            raise ValueError("iris_r must exceed pupil_r")


@dataclass(frozen=True)
class NormalizedStrip:
    """Polar unwrap of the iris annulus: rows = radius, columns = angle.

    Row 0 hugs the pupil boundary, the last row hugs the iris boundary.
    ``valid`` marks cells that survived occlusion screening.  Both dimensions
    must be divisible by 32 so a level-5 Haar analysis is well defined.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.valid)
        if vals.ndim != 2 or vals.size == 0:
            raise ValueError("strip values must form a non-empty 2-D array")
        if mask.shape != vals.shape:
            raise ValueError("strip validity mask must match the value shape")
        if not np.all(np.isfinite(vals)):
            raise ValueError("strip values must be finite")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("strip values must lie in [0, 1]")
        if vals.shape[0] % 32 or vals.shape[1] % 32:
            raise BadDimensions(
                f"strip dimensions {vals.shape} must be divisible by 32")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "valid", _freeze(mask.astype(bool)))

    @property
    def radial(self) -> int:
        return self.values.shape[0]

    @property
    def angular(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class IrisCode:
    """Binary iris code plus a per-bit validity mask."""

    bits: np.ndarray
    mask: np.ndarray
    scheme: str

    def __post_init__(self):
        if self.scheme not in _SCHEME_CODE:
            raise ValueError(f"unknown iris code scheme {self.scheme!r}")
        bits = np.asarray(self.bits)
        mask = np.asarray(self.mask)
        if bits.ndim != 1 or mask.shape != bits.shape:
            raise ValueError("bits and mask must be 1-D arrays of equal length")
        expected = sum(r * w for r, w in _row_layout(self.scheme))
        if bits.size != expected:
            raise ValueError(
                f"{self.scheme} code must have {expected} bits, got {bits.size}")
        object.__setattr__(self, "bits", _freeze(bits.astype(bool)))
        object.__setattr__(self, "mask", _freeze(mask.astype(bool)))

    def __len__(self) -> int:
        return self.bits.size


def _row_layout(scheme: str) -> tuple[tuple[int, int], ...]:
    """Row structure of a code as (row_count, row_width) segments.

    Shift alignment rotates bits within each such row independently.
    """
    if scheme == SCHEME_HAAR:
        # Three level-4 detail subbands of shape (4, 32), then three level-5
        # detail subbands and the level-5 approximation, each (2, 16).
        return ((4, 32),) * 3 + ((2, 16),) * 4
    # One row per (operator setting, radial anchor) pair.
    return ((len(MELLIN_SETTINGS) * MELLIN_RADIAL_ANCHORS,
             MELLIN_ANGULAR_ANCHORS),)


# ---------------------------------------------------------------------------
# Localization

def locate_pupil(img: GrayImage) -> tuple[float, float, float]:
    """Find the pupil center and radius.

    Thresholds the image at 0.25, takes the largest dark connected component
    (8-connectivity), and returns its centroid plus the distance from the
    centroid to the nearest pixel outside the component.  Raises NoPupilFound
    when no dark component reaches 16 pixels.
    """
    dark = img.pixels < PUPIL_THRESHOLD
    labels, count = ndimage.label(dark, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        raise NoPupilFound("no pixels below the pupil threshold")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = int(sizes.argmax())
    if sizes[best] < MIN_PUPIL_AREA:
        raise NoPupilFound(
            f"largest dark component has {sizes[best]} px, needs {MIN_PUPIL_AREA}")
    component = labels == best
    ys, xs = np.nonzero(component)
    cx = float(xs.mean())
    cy = float(ys.mean())
    out_ys, out_xs = np.nonzero(~component)
    if out_ys.size == 0:
        raise NoPupilFound("dark component fills the whole image")
    pupil_r = float(np.hypot(out_xs - cx, out_ys - cy).min())
    return cx, cy, pupil_r


def _circle_samples(pixels: np.ndarray, cx: float, cy: float,
                    radii: np.ndarray, samples: int) -> np.ndarray:
    """Mean bilinear intensity around each circle, one row per radius."""
    phi = 2.0 * math.pi * np.arange(samples) / samples
    x = cx + radii[:, None] * np.cos(phi)[None, :]
    y = cy + radii[:, None] * np.sin(phi)[None, :]
    return _bilinear(pixels, x, y).mean(axis=1)


def _bilinear(pixels: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``pixels`` at float coordinates, clamping to the border."""
    h, w = pixels.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros_like(y, int)
    fx = x - x0
    fy = y - y0
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, np.minimum(x0 + 1, w - 1)] * fx
    y1 = np.minimum(y0 + 1, h - 1)
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, np.minimum(x0 + 1, w - 1)] * fx
    return top * (1 - fy) + bot * fy


def locate_iris_boundary(img: GrayImage, center_x: float, center_y: float,
                         pupil_r: float) -> float:
    """Find the outer iris radius.

    Sweeps circles of radius pupil_r + 4, pupil_r + 5, ... out to the last
    radius that keeps the circle inside the image, measuring the mean
    intensity over 256 bilinear perimeter samples, and returns the radius
    whose mean changed the most against the previous circle.  Ties go to the
    smallest radius.  Raises BoundaryNotFound when fewer than two circles fit.
    """
    margin = min(center_x, center_y,
                 img.width - 1.0 - center_x, img.height - 1.0 - center_y)
    start = pupil_r + BOUNDARY_START_OFFSET
    steps = int(math.floor(margin - start)) + 1
    if steps < 2:
        raise BoundaryNotFound(
            f"no room to search outward of radius {start:.1f} "
            f"within margin {margin:.1f}")
    radii = start + np.arange(steps, dtype=np.float64)
    means = _circle_samples(img.pixels, center_x, center_y, radii,
                            BOUNDARY_SAMPLES)
    jumps = np.abs(np.diff(means))
    return float(radii[int(jumps.argmax()) + 1])


# ---------------------------------------------------------------------------
# Normalization

def normalize(img: GrayImage, geometry: IrisGeometry,
              radial: int = DEFAULT_RADIAL,
              angular: int = DEFAULT_ANGULAR) -> NormalizedStrip:
    """Unwrap the iris annulus into a ``radial`` x ``angular`` polar strip.

    Cell (i, j) samples the image bilinearly at radius
    pupil_r + (i + 0.5) / radial * (iris_r - pupil_r) and angle
    2*pi*j / angular measured from the +x axis toward +y.  All cells start
    valid.
    """
    cx, cy = geometry.center_x, geometry.center_y
    if (cx - geometry.iris_r < 0 or cx + geometry.iris_r > img.width - 1
            or cy - geometry.iris_r < 0 or cy + geometry.iris_r > img.height - 1):
        raise ValueError("iris circle extends beyond the image")
    rows = np.arange(radial, dtype=np.float64)
    r = geometry.pupil_r + (rows + 0.5) / radial * (geometry.iris_r - geometry.pupil_r)
    phi = 2.0 * math.pi * np.arange(angular, dtype=np.float64) / angular
    x = cx + r[:, None] * np.cos(phi)[None, :]
    y = cy + r[:, None] * np.sin(phi)[None, :]
    values = _bilinear(img.pixels, x, y)
    return NormalizedStrip(values, np.ones((radial, angular), dtype=bool))


def detect_eyelids(strip: NormalizedStrip) -> NormalizedStrip:
    """Invalidate outer-radius rows of columns that look eyelid-covered.

    A column is flagged when its angle falls in the upper (60-120 degree) or
    lower (240-300 degree) sector and its mean intensity deviates from the
    strip's global median by more than two global standard deviations.
    Flagged columns lose validity for rows i >= radial/2; values are kept.
    """
    vals = strip.values
    median = float(np.median(vals))
    spread = float(vals.std())
    col_mean = vals.mean(axis=0)
    angles = 2.0 * math.pi * np.arange(strip.angular) / strip.angular
    in_sector = np.zeros(strip.angular, dtype=bool)
    for lo, hi in EYELID_SECTORS:
        in_sector |= (angles >= lo) & (angles <= hi)
    flagged = in_sector & (np.abs(col_mean - median) > EYELID_DEVIATION * spread)
    if not flagged.any():
        return strip
    valid = strip.valid.copy()
    valid[strip.radial // 2:, flagged] = False
    return NormalizedStrip(strip.values, valid)


# ---------------------------------------------------------------------------
# Haar scheme

def haar_decompose(values: np.ndarray,
                   levels: int = HAAR_LEVELS,
                   ) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Unnormalized 2-D Haar analysis.

    Each level turns the running approximation into a half-size approximation
    plus three detail subbands via pairwise sums and differences (no 1/2 or
    1/sqrt(2) scaling): columns are paired first (angular direction), then
    rows (radial direction).  Returns the final approximation and the
    (angular, radial, diagonal) detail triple per level, coarsest last.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] % (1 << levels) or a.shape[1] % (1 << levels):
        raise BadDimensions(
            f"shape {a.shape} does not support a level-{levels} analysis")
    details = []
    for _ in range(levels):
        col_sum = a[:, 0::2] + a[:, 1::2]
        col_diff = a[:, 0::2] - a[:, 1::2]
        approx = col_sum[0::2, :] + col_sum[1::2, :]
        radial_detail = col_sum[0::2, :] - col_sum[1::2, :]
        angular_detail = col_diff[0::2, :] + col_diff[1::2, :]
        diagonal = col_diff[0::2, :] - col_diff[1::2, :]
        details.append((angular_detail, radial_detail, diagonal))
        a = approx
    return a, details


def haar_reconstruct(approx: np.ndarray,
                     details: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
                     ) -> np.ndarray:
    """Invert :func:`haar_decompose` exactly (up to float round-off)."""
    a = np.asarray(approx, dtype=np.float64)
    for angular_detail, radial_detail, diagonal in reversed(details):
        col_sum = np.empty((a.shape[0] * 2, a.shape[1]))
        col_sum[0::2, :] = (a + radial_detail) / 2.0
        col_sum[1::2, :] = (a - radial_detail) / 2.0
        col_diff = np.empty_like(col_sum)
        col_diff[0::2, :] = (angular_detail + diagonal) / 2.0
        col_diff[1::2, :] = (angular_detail - diagonal) / 2.0
        a = np.empty((col_sum.shape[0], col_sum.shape[1] * 2))
        a[:, 0::2] = (col_sum + col_diff) / 2.0
        a[:, 1::2] = (col_sum - col_diff) / 2.0
    return a


def _block_any(cells: np.ndarray, block: int) -> np.ndarray:
    """Per-block OR over non-overlapping ``block`` x ``block`` tiles."""
    h, w = cells.shape
    return cells.reshape(h // block, block, w // block, block).any(axis=(1, 3))


def haar_code(strip: NormalizedStrip) -> IrisCode:
    """Sign-quantize selected Haar subbands of the strip into a 512-bit code.

    Bits are 1 where the coefficient is > 0, in fixed raster order: level-4
    angular/radial/diagonal details, level-5 angular/radial/diagonal details,
    then the level-5 approximation.  A bit's mask is 0 when any strip cell in
    the coefficient's support is invalid.
    """
    if strip.radial % 32 or strip.angular % 32:
        raise BadDimensions(
            f"strip {strip.values.shape} must be divisible by 32 in both axes")
    approx, details = haar_decompose(strip.values, HAAR_LEVELS)
    invalid = ~strip.valid
    pieces = []
    mask_pieces = []
    for level in (4, 5):
        tainted = _block_any(invalid, 1 << level)
        for band in details[level - 1]:
            pieces.append(band > 0.0)
            mask_pieces.append(~tainted)
    pieces.append(approx > 0.0)
    mask_pieces.append(~_block_any(invalid, 1 << HAAR_LEVELS))
    bits = np.concatenate([p.ravel() for p in pieces])
    mask = np.concatenate([m.ravel() for m in mask_pieces])
    return IrisCode(bits, mask, SCHEME_HAAR)


# ---------------------------------------------------------------------------
# Mellin scheme

def _mellin_kernels(window_tops: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Complex operator per (radial anchor, setting), keyed by (top, index)."""
    taper = np.outer(np.hanning(MELLIN_WINDOW_ROWS), np.hanning(MELLIN_WINDOW_COLS))
    cols = np.arange(MELLIN_WINDOW_COLS, dtype=np.float64)
    kernels = {}
    for top in window_tops:
        # Log-radial coordinate of each window row, normalized to [0, 1]
        # across the window (row indices are 1-based to keep logs finite).
        row_pos = top + np.arange(MELLIN_WINDOW_ROWS, dtype=np.float64) + 1.0
        s = np.log(row_pos / row_pos[0]) / math.log(row_pos[-1] / row_pos[0])
        for idx, (p, q) in enumerate(MELLIN_SETTINGS):
            phase = (p * 2.0 * math.pi * cols[None, :] / MELLIN_WINDOW_COLS
                     + q * 2.0 * math.pi * s[:, None])
            kernels[(int(top), idx)] = taper * np.exp(1j * phase)
    return kernels


def mellin_code(strip: NormalizedStrip) -> IrisCode:
    """Phase-quantize log-radial/angular operator responses into 1536 bits.

    Three operator settings (p, q) in {(2, 1), (4, 1), (3, 2)} are correlated
    with the strip over a grid of 8 radial x 64 angular anchor positions,
    each seeing a 16 x 64 raised-cosine window that wraps circularly in angle
    and clamps in radius.  A bit is 1 when the response phase lies in (0, pi];
    its mask is 0 when more than half the window's cells are invalid.
    """
    if strip.radial < MELLIN_WINDOW_ROWS or strip.angular < MELLIN_WINDOW_COLS:
        raise BadDimensions(
            f"strip {strip.values.shape} is smaller than the "
            f"{MELLIN_WINDOW_ROWS}x{MELLIN_WINDOW_COLS} operator window")
    r_count, a_count = MELLIN_RADIAL_ANCHORS, MELLIN_ANGULAR_ANCHORS
    centers = (np.arange(r_count) + 0.5) * strip.radial / r_count
    tops = np.clip(np.round(centers - MELLIN_WINDOW_ROWS / 2).astype(int),
                   0, strip.radial - MELLIN_WINDOW_ROWS)
    stride = strip.angular // a_count
    kernels = _mellin_kernels(np.unique(tops))

    # Wrap the strip so every angular window is a contiguous slice.
    vals = np.concatenate([strip.values, strip.values[:, :MELLIN_WINDOW_COLS]],
                          axis=1)
    invalid = ~strip.valid
    inv = np.concatenate([invalid, invalid[:, :MELLIN_WINDOW_COLS]], axis=1)

    bits = np.zeros(len(MELLIN_SETTINGS) * r_count * a_count, dtype=bool)
    mask = np.zeros_like(bits)
    starts = np.arange(a_count) * stride
    for r_idx, top in enumerate(tops):
        windows = np.stack([vals[top:top + MELLIN_WINDOW_ROWS, s:s + MELLIN_WINDOW_COLS]
                            for s in starts])
        bad_frac = np.stack([inv[top:top + MELLIN_WINDOW_ROWS, s:s + MELLIN_WINDOW_COLS]
                             for s in starts]).mean(axis=(1, 2))
        ok = bad_frac <= MELLIN_MAX_INVALID
        for s_idx in range(len(MELLIN_SETTINGS)):
            resp = np.einsum("wij,ij->w", windows, kernels[(int(top), s_idx)])
            phase = np.arctan2(resp.imag, resp.real)
            base = (s_idx * r_count + r_idx) * a_count
            bits[base:base + a_count] = phase > 0.0
            mask[base:base + a_count] = ok
    return IrisCode(bits, mask, SCHEME_MELLIN)


# ---------------------------------------------------------------------------
# Matching

def _shift_rows(flat: np.ndarray, layout: tuple[tuple[int, int], ...],
                shift: int) -> np.ndarray:
    """Circularly shift a flat code by ``shift`` within each layout row."""
    if shift == 0:
        return flat
    out = np.empty_like(flat)
    pos = 0
    for rows, width in layout:
        seg = flat[pos:pos + rows * width].reshape(rows, width)
        out[pos:pos + rows * width] = np.roll(seg, shift, axis=1).ravel()
        pos += rows * width
    return out


def hamming_distance(a: IrisCode, b: IrisCode,
                     max_shift: int = DEFAULT_MAX_SHIFT) -> float:
    """Masked Hamming distance minimized over small angular shifts.

    For each shift s in [-max_shift, +max_shift], b's bits and mask are
    rotated by s within each subband/anchor row, and the fraction of jointly
    valid bits that disagree is computed.  Returns the minimum over shifts
    with at least 64 jointly valid bits; raises IncomparableCodes when no
    shift reaches that, and SchemeMismatch when the codes' schemes or lengths
    differ.
    """
    if a.scheme != b.scheme or len(a) != len(b):
        raise SchemeMismatch(
            f"cannot compare {a.scheme}/{len(a)} against {b.scheme}/{len(b)}")
    layout = _row_layout(a.scheme)
    best = None
    for shift in range(-max_shift, max_shift + 1):
        bits = _shift_rows(b.bits, layout, shift)
        mask = _shift_rows(b.mask, layout, shift)
        joint = a.mask & mask
        valid_count = int(joint.sum())
        if valid_count < MIN_COMPARABLE_BITS:
            continue
        hd = float(((a.bits ^ bits) & joint).sum()) / valid_count
        if best is None or hd < best:
            best = hd
    if best is None:
        raise IncomparableCodes(
            f"fewer than {MIN_COMPARABLE_BITS} jointly valid bits at every shift")
    return best


# ---------------------------------------------------------------------------
# Serialization

def encode_code(code: IrisCode) -> bytes:
    """Serialize an iris code: magic, scheme byte, bit count, packed bits+mask."""
    head = CODE_MAGIC + struct.pack("<BI", _SCHEME_CODE[code.scheme], len(code))
    packed_bits = np.packbits(code.bits.astype(np.uint8), bitorder="little")
    packed_mask = np.packbits(code.mask.astype(np.uint8), bitorder="little")
    return head + packed_bits.tobytes() + packed_mask.tobytes()


def decode_code(data: bytes) -> IrisCode:
    """Parse bytes produced by :func:`encode_code`."""
    if data[:4] != CODE_MAGIC:
        raise BadMagic(f"expected {CODE_MAGIC!r} header, got {data[:4]!r}")
    if len(data) < 9:
        raise TruncatedData("iris code header truncated")
    scheme_code, length = struct.unpack_from("<BI", data, 4)
    if scheme_code not in _CODE_SCHEME:
        raise TruncatedData(f"unknown iris code scheme byte {scheme_code}")
    nbytes = (length + 7) // 8
    if len(data) < 9 + 2 * nbytes:
        raise TruncatedData(
            f"iris code payload needs {2 * nbytes} bytes, got {len(data) - 9}")
    raw_bits = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=9)
    raw_mask = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=9 + nbytes)
    bits = np.unpackbits(raw_bits, count=length, bitorder="little").astype(bool)
    mask = np.unpackbits(raw_mask, count=length, bitorder="little").astype(bool)
    return IrisCode(bits, mask, _CODE_SCHEME[scheme_code])


# ---------------------------------------------------------------------------
# End-to-end convenience

def build_codes(img: GrayImage) -> tuple[IrisGeometry, NormalizedStrip, IrisCode, IrisCode]:
    """Run the full iris pipeline: locate, unwrap, screen eyelids, code.

    Returns the fitted geometry, the screened strip, and the (haar, mellin)
    code pair.
    """
    cx, cy, pupil_r = locate_pupil(img)
    iris_r = locate_iris_boundary(img, cx, cy, pupil_r)
    geometry = IrisGeometry(cx, cy, pupil_r, iris_r)
    strip = detect_eyelids(normalize(img, geometry))
    return geometry, strip, haar_code(strip), mellin_code(strip)
