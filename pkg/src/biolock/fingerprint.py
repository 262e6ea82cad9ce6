"""Fingerprint pipeline: segmentation, orientation/frequency estimation,
Gabor enhancement, minutiae extraction and filtering, registration, matching.

Coordinates are (x right, y down); ridge orientation is an angle in [0, pi)
measured from +x, and minutia direction is its lift to [0, 2*pi) along the
departing ridge.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagic,
    BlockTooSmall,
    EmptyTemplate,
    ImageTooSmall,
    TruncatedData,
)
from .imaging import (
    BinaryImage,
    FloatField,
    GrayImage,
    adaptive_threshold,
    gradients,
    morph_close_open,
    thin,
)

# ---------------------------------------------------------------------------
# Parameters

DEFAULT_COHERENCE_WINDOW = 16   # W: window for per-pixel coherence sums
DEFAULT_MASK_K = 0.0            # mask threshold offset: coh >= M_c + k*S_c
DEFAULT_MORPH_RADIUS = 2        # mask cleanup element radius

DEFAULT_BLOCK = 16              # block size for orientation/frequency grids
FREQ_MIN = 1.0 / 25.0           # plausible ridge frequency band (cycles/px)
FREQ_MAX = 1.0 / 3.0
FREQ_FALLBACK = 1.0 / 9.0       # used when no block yields a reliable estimate

GABOR_SIGMA = 4.0               # isotropic Gaussian envelope
GABOR_HALF = int(2 * GABOR_SIGMA)  # kernel half-size -> 17x17 support

BINARIZE_WINDOW = 11            # adaptive threshold window on enhanced image

DEFAULT_THETA0 = 12.0                   # spatial match threshold (px)
DEFAULT_THETA1 = math.radians(20.0)     # orientation match threshold
DEFAULT_XY_BIN = 8.0                    # registration accumulator bin (px)
DEFAULT_ANGLE_BIN = math.radians(10.0)  # registration accumulator bin

MAX_MINUTIAE = 256              # template cap, keeps matching cost bounded
TRACE_STEPS = 8                 # skeleton steps walked to orient a minutia

KIND_ENDING = "ending"
KIND_BIFURCATION = "bifurcation"
_KIND_CODE = {KIND_ENDING: 0, KIND_BIFURCATION: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

TEMPLATE_MAGIC = b"FPT1"

# 8-neighborhood in clockwise order starting north: N NE E SE S SW W NW
_NEIGH_OFFSETS = ((0, -1), (1, -1), (1, 0), (1, 1),
                  (0, 1), (-1, 1), (-1, 0), (-1, -1))


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class SegmentationParams:
    window: int = DEFAULT_COHERENCE_WINDOW
    k: float = DEFAULT_MASK_K
    morph_radius: int = DEFAULT_MORPH_RADIUS

    def __post_init__(self):
        if self.window < 8 or self.window % 2 != 0:
            raise ValueError(f"coherence window must be even and >= 8, got {self.window}")
        if self.morph_radius < 1:
            raise ValueError(f"morph_radius must be >= 1, got {self.morph_radius}")


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    theta: float  # direction in [0, 2*pi)
    kind: str

    def __post_init__(self):
        if not (0.0 <= self.theta < 2.0 * math.pi):
            raise ValueError(f"theta must be in [0, 2*pi), got {self.theta}")
        if self.kind not in _KIND_CODE:
            raise ValueError(f"kind must be one of {sorted(_KIND_CODE)}, got {self.kind!r}")


@dataclass(frozen=True)
class FingerprintTemplate:
    minutiae: tuple[Minutia, ...]
    image_width: int
    image_height: int
    quality: float = 1.0  # masked-area fraction

    def __post_init__(self):
        object.__setattr__(self, "minutiae", tuple(self.minutiae))
        if len(self.minutiae) > MAX_MINUTIAE:
            raise ValueError(f"template holds at most {MAX_MINUTIAE} minutiae")
        if not (0.0 <= self.quality <= 1.0):
            raise ValueError(f"quality must be in [0,1], got {self.quality}")

    def __len__(self) -> int:
        return len(self.minutiae)


@dataclass(frozen=True)
class MatchParams:
    theta0: float = DEFAULT_THETA0
    theta1: float = DEFAULT_THETA1
    hough_xy_bin: float = DEFAULT_XY_BIN
    hough_angle_bin: float = DEFAULT_ANGLE_BIN

    def __post_init__(self):
        if min(self.theta0, self.theta1, self.hough_xy_bin, self.hough_angle_bin) <= 0:
            raise ValueError("all match parameters must be strictly positive")
        if self.theta1 >= math.pi:
            raise ValueError("theta1 must be below pi")


@dataclass(frozen=True)
class RegistrationTransform:
    dx: float
    dy: float
    dtheta: float
    support: int

    def __post_init__(self):
        if self.support < 0:
            raise ValueError("support must be >= 0")


# ---------------------------------------------------------------------------
# Segmentation

def coherence_image(img: GrayImage, params: SegmentationParams = SegmentationParams()) -> FloatField:
    """Per-pixel structure-tensor coherence over a WxW window, in [0,1].

    Windows with zero gradient energy get coherence 0.
    """
    w = params.window
    if img.width < w or img.height < w:
        raise ImageTooSmall(f"image must be at least {w}x{w}, got {img.width}x{img.height}")
    gx, gy = gradients(img)
    gxx = gx * gx
    gyy = gy * gy
    gxy = gx * gy

    def wsum(a):
        # uniform_filter computes window means; coherence is a ratio of sums
        # over one window, so the common 1/W^2 factor cancels.
        return ndimage.uniform_filter(a, size=w, mode="nearest")

    sx = wsum(gxx - gyy)
    sxy = wsum(2.0 * gxy)
    denom = wsum(gxx + gyy)
    num = np.sqrt(sx * sx + sxy * sxy)
    # the moving-average window sums cancel only to round-off over flat
    # regions, so treat near-zero gradient energy as zero energy
    live = denom > 1e-12
    coh = np.where(live, num / np.where(live, denom, 1.0), 0.0)
    return FloatField(np.clip(coh, 0.0, 1.0), kind="coherence")


def segment(img: GrayImage, params: SegmentationParams = SegmentationParams()) -> tuple[BinaryImage, GrayImage]:
    """Foreground mask from block coherence, plus the masked image.

    Mask keeps pixels with coherence >= M_c + k*S_c (global mean/std of the
    coherence image), cleaned by closing-then-opening; mask-false pixels of
    the returned image are exactly 0.
    """
    coh = coherence_image(img, params)
    m_c = float(coh.values.mean())
    s_c = float(coh.values.std())
    raw = BinaryImage(coh.values >= m_c + params.k * s_c)
    mask = morph_close_open(raw, params.morph_radius)
    segmented = GrayImage(np.where(mask.bits, img.pixels, 0.0))
    return mask, segmented


# ---------------------------------------------------------------------------
# Orientation and frequency fields

def estimate_orientation(img: GrayImage, block: int = DEFAULT_BLOCK) -> FloatField:
    """Per-block least-squares ridge orientation in [0, pi).

    Gradient orientation phi = atan2(sum 2*gx*gy, sum gx^2-gy^2) / 2; the
    ridge runs orthogonal to it.  Smoothed by averaging doubled-angle vectors
    over 3x3 block neighborhoods; blocks with no gradient energy stay 0.
    """
    if block < 8 or block % 2 != 0:
        raise BlockTooSmall(f"block must be even and >= 8, got {block}")
    bw, bh = img.width // block, img.height // block
    if bw < 1 or bh < 1:
        raise BlockTooSmall(f"image {img.width}x{img.height} too small for block {block}")
    gx, gy = gradients(img)
    gxx_m_gyy = gx * gx - gy * gy
    gxy2 = 2.0 * gx * gy

    def block_sum(a):
        trimmed = a[:bh * block, :bw * block]
        return trimmed.reshape(bh, block, bw, block).sum(axis=(1, 3))

    sx = block_sum(gxx_m_gyy)
    sxy = block_sum(gxy2)
    phi = 0.5 * np.arctan2(sxy, sx)
    theta = np.mod(phi + 0.5 * math.pi, math.pi)

    # doubled-angle vector smoothing; degenerate blocks contribute a zero
    # vector so they inherit orientation from textured neighbors
    energy = (sx != 0.0) | (sxy != 0.0)
    c = np.where(energy, np.cos(2.0 * theta), 0.0)
    s = np.where(energy, np.sin(2.0 * theta), 0.0)
    c_bar = ndimage.uniform_filter(c, size=3, mode="nearest")
    s_bar = ndimage.uniform_filter(s, size=3, mode="nearest")
    smooth = np.mod(0.5 * np.arctan2(s_bar, c_bar) + math.pi, math.pi)
    degenerate = (np.abs(c_bar) < 1e-12) & (np.abs(s_bar) < 1e-12)
    out = np.where(degenerate, 0.0, smooth)
    return FloatField(np.where(out >= math.pi, 0.0, out), kind="orientation")


def _bilinear(pixels: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def estimate_frequency(img: GrayImage, orientation: FloatField,
                       block: int = DEFAULT_BLOCK) -> FloatField:
    """Per-block ridge frequency from the signature across the ridge flow.

    Each block is sampled along the direction orthogonal to its orientation;
    frequency is 1/mean spacing of signature peaks, clamped to the plausible
    band.  Blocks without peaks take the median of estimated neighbors, and
    if no block at all yields an estimate the global fallback applies.
    """
    bh, bw = orientation.values.shape
    pixels = img.pixels
    half = block  # samples run from -block to +block across the ridges
    t = np.arange(-half, half + 1, dtype=np.float64)
    offsets = (-3.0, 0.0, 3.0)

    freq = np.full((bh, bw), np.nan)
    for bi in range(bh):
        for bj in range(bw):
            theta = orientation.values[bi, bj]
            cx = bj * block + block / 2.0
            cy = bi * block + block / 2.0
            nx, ny = math.cos(theta + 0.5 * math.pi), math.sin(theta + 0.5 * math.pi)
            rx, ry = math.cos(theta), math.sin(theta)
            sig = np.zeros_like(t)
            for o in offsets:
                sx = cx + o * rx + t * nx
                sy = cy + o * ry + t * ny
                sig += _bilinear(pixels, sx, sy)
            sig /= len(offsets)
            peaks = [i for i in range(1, len(sig) - 1)
                     if sig[i] > sig[i - 1] and sig[i] >= sig[i + 1]]
            if len(peaks) >= 2:
                gaps = np.diff(peaks)
                f = 1.0 / float(gaps.mean())
                freq[bi, bj] = min(max(f, FREQ_MIN), FREQ_MAX)

    # propagate estimates into empty blocks: simultaneous rounds of
    # median-of-known-neighbors until the grid stops changing
    while np.isnan(freq).any():
        known = ~np.isnan(freq)
        if not known.any():
            freq[:] = FREQ_FALLBACK
            break
        updated = freq.copy()
        progress = False
        for bi in range(bh):
            for bj in range(bw):
                if known[bi, bj]:
                    continue
                vals = [freq[bi + dy, bj + dx]
                        for dx, dy in _NEIGH_OFFSETS
                        if 0 <= bi + dy < bh and 0 <= bj + dx < bw
                        and known[bi + dy, bj + dx]]
                if vals:
                    updated[bi, bj] = float(np.median(vals))
                    progress = True
        if not progress:
            updated[np.isnan(updated)] = FREQ_FALLBACK
        freq = updated
    return FloatField(freq, kind="frequency")


# ---------------------------------------------------------------------------
# Enhancement

def _gabor_kernel(theta: float, freq: float) -> np.ndarray:
    """Even-symmetric Gabor tuned across the ridge flow, mean-compensated."""
    half = GABOR_HALF
    v, u = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    phi = theta + 0.5 * math.pi  # direction of intensity variation
    up = u * math.cos(phi) + v * math.sin(phi)
    g = np.exp(-(u * u + v * v) / (2.0 * GABOR_SIGMA ** 2)) * np.cos(2.0 * math.pi * freq * up)
    return g - g.mean()


def gabor_enhance(img: GrayImage, orientation: FloatField, frequency: FloatField) -> np.ndarray:
    """Filter each pixel with the Gabor kernel of its block's (theta, freq).

    Returns the raw signed response raster; flat regions map to 0 because the
    kernels carry no DC.
    """
    bh, bw = orientation.values.shape
    if frequency.values.shape != (bh, bw):
        raise ValueError("orientation and frequency grids must agree")
    block = img.height // bh
    h, w = img.height, img.width
    half = GABOR_HALF
    padded = np.pad(img.pixels, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (2 * half + 1, 2 * half + 1))
    out = np.zeros((h, w))
    for bi in range(bh):
        r0 = bi * block
        r1 = (bi + 1) * block if bi < bh - 1 else h
        for bj in range(bw):
            c0 = bj * block
            c1 = (bj + 1) * block if bj < bw - 1 else w
            kernel = _gabor_kernel(orientation.values[bi, bj], frequency.values[bi, bj])
            out[r0:r1, c0:c1] = np.tensordot(windows[r0:r1, c0:c1], kernel, axes=([2, 3], [0, 1]))
    return out


# ---------------------------------------------------------------------------
# Minutiae extraction

def crossing_number(neighborhood) -> int:
    """Half the sum of absolute differences around the 8-neighborhood.

    `neighborhood` lists the 8 neighbor values in cyclic order; the result
    counts ridge arms: 1 = ending, 2 = interior ridge, 3 = bifurcation.
    """
    vals = [1 if v else 0 for v in neighborhood]
    if len(vals) != 8:
        raise ValueError("neighborhood must have exactly 8 entries")
    return sum(abs(vals[i] - vals[i - 1]) for i in range(8)) // 2


def _cn_map(bits: np.ndarray) -> np.ndarray:
    p = np.pad(bits, 1, mode="constant", constant_values=False).astype(np.int8)
    h, w = bits.shape
    planes = [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dx, dy in _NEIGH_OFFSETS]
    cn = sum(np.abs(planes[i] - planes[i - 1]) for i in range(8)) // 2
    return np.where(bits, cn, 0)


def _skeleton_neighbors(bits: np.ndarray, x: int, y: int) -> list[tuple[int, int]]:
    h, w = bits.shape
    out = []
    for dx, dy in _NEIGH_OFFSETS:
        nx, ny = x + dx, y + dy
        if 0 <= nx < w and 0 <= ny < h and bits[ny, nx]:
            out.append((nx, ny))
    return out


def _walk_arm(bits: np.ndarray, start: tuple[int, int], first: tuple[int, int],
              max_steps: int) -> tuple[int, int]:
    """Follow a skeleton arm from `start` through `first`; return the farthest
    pixel reached within max_steps (stops early at junctions or arm ends)."""
    visited = {start, first}
    cur = first
    for _ in range(max_steps - 1):
        nxt = [q for q in _skeleton_neighbors(bits, *cur) if q not in visited]
        if len(nxt) != 1:
            break
        cur = nxt[0]
        visited.add(cur)
    return cur


def _lift_direction(theta_base: float, vx: float, vy: float) -> float:
    """Lift a [0,pi) ridge orientation to [0,2*pi) toward the vector (vx,vy)."""
    if vx * math.cos(theta_base) + vy * math.sin(theta_base) >= 0.0:
        lifted = theta_base
    else:
        lifted = theta_base + math.pi
    return lifted % (2.0 * math.pi)


def extract_minutiae(thinned: BinaryImage, orientation: FloatField,
                     mask: BinaryImage) -> list[Minutia]:
    """Classify skeleton pixels by crossing number; report endings and
    bifurcations inside the mask, with directions lifted along their arms."""
    bits = thinned.bits
    h, w = bits.shape
    bh, bw = orientation.values.shape
    block_w = max(1, w // bw)
    block_h = max(1, h // bh)
    cn = _cn_map(bits)
    out: list[Minutia] = []
    ys, xs = np.nonzero((cn == 1) | (cn == 3))
    for y, x in zip(ys.tolist(), xs.tolist()):
        if not mask.bits[y, x]:
            continue
        bi = min(y // block_h, bh - 1)
        bj = min(x // block_w, bw - 1)
        theta_base = float(orientation.values[bi, bj])
        neighbors = _skeleton_neighbors(bits, x, y)
        if cn[y, x] == 1:
            kind = KIND_ENDING
            if neighbors:
                fx, fy = _walk_arm(bits, (x, y), neighbors[0], TRACE_STEPS)
                vx, vy = fx - x, fy - y
            else:
                vx, vy = math.cos(theta_base), math.sin(theta_base)
        else:
            kind = KIND_BIFURCATION
            vx = vy = 0.0
            for nb in neighbors:
                fx, fy = _walk_arm(bits, (x, y), nb, TRACE_STEPS)
                norm = math.hypot(fx - x, fy - y)
                if norm > 0:
                    vx += (fx - x) / norm
                    vy += (fy - y) / norm
        if abs(vx) < 1e-12 and abs(vy) < 1e-12:
            theta = theta_base
        else:
            theta = _lift_direction(theta_base, vx, vy)
        out.append(Minutia(float(x), float(y), theta, kind))
    return out


# ---------------------------------------------------------------------------
# False-minutiae filtering

def _border_distance(mask: BinaryImage) -> np.ndarray:
    """Distance from each pixel to the nearest mask-false pixel, counting the
    image frame itself as background."""
    framed = np.pad(mask.bits, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(framed)
    return dist[1:-1, 1:-1]


def _angle_diff(a: float, b: float) -> float:
    """Absolute circular difference of two directions, in [0, pi]."""
    d = (a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def _trace_to_junction(bits: np.ndarray, ending: tuple[int, int],
                       max_steps: int) -> tuple[tuple[int, int] | None, int]:
    """Walk from an ending along its arm; return (junction pixel, steps) if a
    crossing-number >= 3 pixel is reached within max_steps, else (None, steps)."""
    cn = _cn_map(bits)
    visited = {ending}
    cur = ending
    steps = 0
    while steps < max_steps:
        nxt = [q for q in _skeleton_neighbors(bits, *cur) if q not in visited]
        if not nxt:
            return None, steps
        # the junction pixel itself may sit among a fan-out of continuations
        for q in nxt:
            if cn[q[1], q[0]] >= 3:
                return q, steps + 1
        if len(nxt) > 1:
            return None, steps
        cur = nxt[0]
        visited.add(cur)
        steps += 1
    return None, steps


def _two_paths(bits: np.ndarray, a: tuple[int, int], b: tuple[int, int],
               max_steps: int) -> bool:
    """True when two skeleton paths no longer than max_steps join a and b."""

    def shortest(blocked: set[tuple[int, int]]) -> list[tuple[int, int]] | None:
        prev: dict[tuple[int, int], tuple[int, int]] = {}
        seen = {a}
        queue = deque([(a, 0)])
        while queue:
            cur, d = queue.popleft()
            if cur == b:
                path = [cur]
                while path[-1] != a:
                    path.append(prev[path[-1]])
                return path
            if d == max_steps:
                continue
            for q in _skeleton_neighbors(bits, *cur):
                if q in seen or q in blocked:
                    continue
                seen.add(q)
                prev[q] = cur
                queue.append((q, d + 1))
        return None

    first = shortest(set())
    if first is None:
        return False
    interior = set(first) - {a, b}
    return shortest(interior) is not None


def filter_false_minutiae(minutiae: list[Minutia], thinned: BinaryImage,
                          mask: BinaryImage, avg_ridge_gap: float) -> list[Minutia]:
    """Drop artifact minutiae: border effects, ridge breaks, spurs/spikes,
    holes, and bridges/ladders, in that order.

    Each rule marks every qualifying minutia against the survivors of the
    previous rule and removes them together, so re-filtering the output is a
    no-op for the pair rules.
    """
    if avg_ridge_gap <= 0:
        raise ValueError("avg_ridge_gap must be positive")
    bits = thinned.bits
    border = _border_distance(mask)
    gap = avg_ridge_gap
    steps = max(1, int(math.ceil(gap)))

    current = [m for m in minutiae
               if border[int(round(m.y)), int(round(m.x))] >= gap]

    # ridge break: facing ending pairs across a small gap
    drop: set[int] = set()
    endings = [(i, m) for i, m in enumerate(current) if m.kind == KIND_ENDING]
    for ai in range(len(endings)):
        for bi in range(ai + 1, len(endings)):
            i, ma = endings[ai]
            j, mb = endings[bi]
            if math.hypot(ma.x - mb.x, ma.y - mb.y) >= gap:
                continue
            if abs(_angle_diff(ma.theta, mb.theta) - math.pi) < math.radians(30.0):
                drop.add(i)
                drop.add(j)
    current = [m for i, m in enumerate(current) if i not in drop]

    # spur/spike: an ending hanging off a nearby junction takes the junction
    # minutia down with it
    drop = set()
    bif_at = {(int(round(m.x)), int(round(m.y))): i
              for i, m in enumerate(current) if m.kind == KIND_BIFURCATION}
    for i, m in enumerate(current):
        if m.kind != KIND_ENDING:
            continue
        junction, n_steps = _trace_to_junction(bits, (int(round(m.x)), int(round(m.y))), steps)
        if junction is not None and n_steps < gap:
            drop.add(i)
            if junction in bif_at:
                drop.add(bif_at[junction])
    current = [m for i, m in enumerate(current) if i not in drop]

    # hole: twin bifurcations joined by two short paths (a loop)
    drop = set()
    bifs = [(i, m) for i, m in enumerate(current) if m.kind == KIND_BIFURCATION]
    for ai in range(len(bifs)):
        for bi in range(ai + 1, len(bifs)):
            i, ma = bifs[ai]
            j, mb = bifs[bi]
            if math.hypot(ma.x - mb.x, ma.y - mb.y) >= gap:
                continue
            pa = (int(round(ma.x)), int(round(ma.y)))
            pb = (int(round(mb.x)), int(round(mb.y)))
            if _two_paths(bits, pa, pb, 2 * steps):
                drop.add(i)
                drop.add(j)
    current = [m for i, m in enumerate(current) if i not in drop]

    # bridge/ladder: close pairs with near-orthogonal ridge directions where
    # at least one member is a bifurcation
    drop = set()
    for ai in range(len(current)):
        for bi in range(ai + 1, len(current)):
            ma, mb = current[ai], current[bi]
            if ma.kind == KIND_ENDING and mb.kind == KIND_ENDING:
                continue
            if math.hypot(ma.x - mb.x, ma.y - mb.y) >= gap:
                continue
            fold = _angle_diff(ma.theta, mb.theta) % math.pi
            fold = min(fold, math.pi - fold)
            if fold >= math.radians(60.0):
                drop.add(ai)
                drop.add(bi)
    return [m for i, m in enumerate(current) if i not in drop]


# ---------------------------------------------------------------------------
# Registration and matching

def _wrap_pi(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


def _rotate_about(x: float, y: float, cx: float, cy: float,
                  angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = x - cx, y - cy
    return cx + c * dx - s * dy, cy + s * dx + c * dy


def register_minutiae(template: FingerprintTemplate, probe: FingerprintTemplate,
                      params: MatchParams = MatchParams()) -> RegistrationTransform:
    """Vote (dtheta, dx, dy) over all minutia pairs in a quantized accumulator
    and return the peak bin's transform refined by averaging its raw votes.

    Ties between equally supported bins go to the smallest |dtheta|, then the
    smallest |dx|+|dy| of the refined transform.
    """
    if len(template) == 0 or len(probe) == 0:
        raise EmptyTemplate("registration needs non-empty minutiae sets")
    cx = template.image_width / 2.0
    cy = template.image_height / 2.0
    votes: dict[tuple[int, int, int], list[tuple[float, float, float]]] = {}
    for mt in template.minutiae:
        for mp in probe.minutiae:
            dtheta = _wrap_pi(mp.theta - mt.theta)
            rx, ry = _rotate_about(mt.x, mt.y, cx, cy, dtheta)
            dx = mp.x - rx
            dy = mp.y - ry
            key = (int(round(dtheta / params.hough_angle_bin)),
                   int(round(dx / params.hough_xy_bin)),
                   int(round(dy / params.hough_xy_bin)))
            votes.setdefault(key, []).append((dtheta, dx, dy))

    best: tuple | None = None
    for key in sorted(votes):
        raw = votes[key]
        n = len(raw)
        dtheta = sum(v[0] for v in raw) / n
        dx = sum(v[1] for v in raw) / n
        dy = sum(v[2] for v in raw) / n
        rank = (-n, abs(dtheta), abs(dx) + abs(dy))
        if best is None or rank < best[0]:
            best = (rank, RegistrationTransform(dx, dy, dtheta, n))
    return best[1]


def _apply_registration(probe: FingerprintTemplate, reg: RegistrationTransform,
                        template: FingerprintTemplate) -> list[tuple[float, float, float, str]]:
    """Map probe minutiae back into the template frame."""
    cx = template.image_width / 2.0
    cy = template.image_height / 2.0
    out = []
    for m in probe.minutiae:
        x, y = _rotate_about(m.x - reg.dx, m.y - reg.dy, cx, cy, -reg.dtheta)
        theta = (m.theta - reg.dtheta) % (2.0 * math.pi)
        out.append((x, y, theta, m.kind))
    return out


def match_minutiae(template: FingerprintTemplate, probe: FingerprintTemplate,
                   params: MatchParams = MatchParams()) -> float:
    """Similarity in [0,1]: greedily pair registered minutiae, closest pairs
    first, within the spatial/orientation thresholds and with equal kind;
    score = matched / max(|template|, |probe|)."""
    nt, np_ = len(template), len(probe)
    if nt == 0 or np_ == 0:
        return 0.0
    reg = register_minutiae(template, probe, params)
    aligned = _apply_registration(probe, reg, template)

    candidates = []
    for ti, mt in enumerate(template.minutiae):
        for pi, (x, y, theta, kind) in enumerate(aligned):
            if kind != mt.kind:
                continue
            dist = math.hypot(mt.x - x, mt.y - y)
            if dist > params.theta0:
                continue
            if _angle_diff(mt.theta, theta) > params.theta1:
                continue
            candidates.append((dist, ti, pi))
    candidates.sort()
    used_t: set[int] = set()
    used_p: set[int] = set()
    matched = 0
    for dist, ti, pi in candidates:
        if ti in used_t or pi in used_p:
            continue
        used_t.add(ti)
        used_p.add(pi)
        matched += 1
    return matched / max(nt, np_)


# ---------------------------------------------------------------------------
# Full pipeline

@dataclass(frozen=True)
class PipelineArtifacts:
    """Intermediate rasters kept for inspection dumps."""
    mask: BinaryImage
    segmented: GrayImage
    orientation: FloatField
    frequency: FloatField
    enhanced: np.ndarray
    binarized: BinaryImage
    thinned: BinaryImage
    raw_minutiae: list[Minutia]


def build_template(img: GrayImage,
                   seg_params: SegmentationParams = SegmentationParams(),
                   block: int = DEFAULT_BLOCK,
                   keep_artifacts: bool = False):
    """End-to-end extraction: segment, estimate fields, enhance, binarize,
    thin, extract and filter minutiae, cap to the template limit.

    Returns the template, or (template, PipelineArtifacts) when asked.
    """
    mask, segmented = segment(img, seg_params)
    orientation = estimate_orientation(img, block)
    frequency = estimate_frequency(img, orientation, block)
    enhanced = gabor_enhance(img, orientation, frequency)
    binarized = adaptive_threshold(enhanced, BINARIZE_WINDOW)
    ridge_bits = BinaryImage(binarized.bits & mask.bits)
    thinned = thin(ridge_bits)
    raw = extract_minutiae(thinned, orientation, mask)
    gap = 1.0 / float(np.median(frequency.values))
    kept = filter_false_minutiae(raw, thinned, mask, gap)

    if len(kept) > MAX_MINUTIAE:
        border = _border_distance(mask)
        scored = sorted(range(len(kept)),
                        key=lambda i: (-border[int(round(kept[i].y)), int(round(kept[i].x))], i))
        keep_idx = sorted(scored[:MAX_MINUTIAE])
        kept = [kept[i] for i in keep_idx]

    quality = float(mask.bits.mean())
    template = FingerprintTemplate(tuple(kept), img.width, img.height, quality)
    if keep_artifacts:
        return template, PipelineArtifacts(mask, segmented, orientation,
                                           frequency, enhanced, binarized,
                                           thinned, raw)
    return template


# ---------------------------------------------------------------------------
# Binary template format

def encode_template(template: FingerprintTemplate) -> bytes:
    """Serialize: magic, LE u16 count/width/height, then per minutia
    (f32 x, f32 y, f32 theta, u8 kind, 3 pad bytes)."""
    parts = [TEMPLATE_MAGIC,
             struct.pack("<HHH", len(template), template.image_width, template.image_height)]
    for m in template.minutiae:
        parts.append(struct.pack("<fffB3x", m.x, m.y, m.theta, _KIND_CODE[m.kind]))
    return b"".join(parts)


def decode_template(data: bytes) -> FingerprintTemplate:
    if data[:4] != TEMPLATE_MAGIC:
        raise BadMagic(f"expected {TEMPLATE_MAGIC!r} header, got {data[:4]!r}")
    if len(data) < 10:
        raise TruncatedData("template header truncated")
    count, width, height = struct.unpack_from("<HHH", data, 4)
    need = 10 + 16 * count
    if len(data) < need:
        raise TruncatedData(f"template payload needs {need} bytes, got {len(data)}")
    minutiae = []
    for i in range(count):
        x, y, theta, code = struct.unpack_from("<fffB", data, 10 + 16 * i)
        if code not in _CODE_KIND:
            raise TruncatedData(f"unknown minutia kind code {code}")
        theta = min(max(float(theta), 0.0), math.nextafter(2.0 * math.pi, 0.0))
        minutiae.append(Minutia(float(x), float(y), theta, _CODE_KIND[code]))
    return FingerprintTemplate(tuple(minutiae), width, height)
