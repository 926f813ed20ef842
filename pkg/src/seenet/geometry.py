"""Measurement geometry.

Pure functions for RECIST axis extraction from masks, click-guidance channel
synthesis, keypoint heatmap encode/decode, the slice<->LOI coordinate
transform, and contour tracing.

Coordinate convention used everywhere: (x, y) = (column, row) with pixel
centers at integer coordinates, so pixel (i, j) of an array covers the
continuous square [j-0.5, j+0.5] x [i-0.5, i+0.5].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage
from skimage import measure as _skmeasure

from .errors import (
    DegenerateBox,
    DegenerateMap,
    DisconnectedMask,
    EmptyMask,
    OutOfBounds,
)

DISTANCE_CAP = 255.0
CLICK_PEAK = 255.0
DEFAULT_CLICK_SIGMA = 5.0
LOI_SIZE = 256

_CROSS = ndimage.generate_binary_structure(2, 1)


class Frame(str, Enum):
    SLICE = "slice"
    LOI = "loi"


@dataclass(frozen=True)
class Point2:
    """A point in pixel coordinates (x = column, y = row)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def dist(self, other: "Point2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class RecistMeasurement:
    """Two perpendicular measurement axes: long (max diameter) and short.

    Lengths in mm are pixel lengths scaled by ``spacing_mm_per_px``.
    """

    long_a: Point2
    long_b: Point2
    short_a: Point2
    short_b: Point2
    spacing_mm_per_px: float
    frame: Frame = Frame.SLICE

    def __post_init__(self):
        if self.spacing_mm_per_px <= 0:
            raise ValueError("spacing must be positive")
        if self.long_px + 1e-9 < self.short_px:
            raise ValueError(
                f"long axis ({self.long_px:.3f}px) shorter than short axis "
                f"({self.short_px:.3f}px)"
            )

    @property
    def long_px(self) -> float:
        return self.long_a.dist(self.long_b)

    @property
    def short_px(self) -> float:
        return self.short_a.dist(self.short_b)

    @property
    def long_mm(self) -> float:
        return self.long_px * self.spacing_mm_per_px

    @property
    def short_mm(self) -> float:
        return self.short_px * self.spacing_mm_per_px

    def endpoints(self) -> np.ndarray:
        """4x2 array in channel order [long_a, long_b, short_a, short_b]."""
        return np.array(
            [[p.x, p.y] for p in (self.long_a, self.long_b, self.short_a, self.short_b)],
            dtype=np.float64,
        )

    def angle_between_axes(self) -> float:
        """Absolute deviation from perpendicularity, in radians."""
        u = self.long_b.as_array() - self.long_a.as_array()
        v = self.short_b.as_array() - self.short_a.as_array()
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return 0.0
        cosang = abs(float(np.dot(u, v))) / (nu * nv)
        return abs(math.pi / 2 - math.acos(min(1.0, cosang)))

    def with_endpoints(self, pts: np.ndarray, frame: Frame | None = None) -> "RecistMeasurement":
        """Rebuild from a 4x2 endpoint array (same channel order)."""
        a, b, c, d = (Point2(float(p[0]), float(p[1])) for p in pts)
        return replace(
            self, long_a=a, long_b=b, short_a=c, short_b=d,
            frame=self.frame if frame is None else frame,
        )


@dataclass(frozen=True)
class ClickGuidance:
    """Click point plus derived guidance channels.

    ``distance_image`` holds the Euclidean distance to the click, capped at
    255; ``click_image`` is a peak-255 Gaussian around the click.
    """

    click: Point2
    click_image: np.ndarray
    distance_image: np.ndarray
    shape: tuple[int, int]


@dataclass(frozen=True)
class HeatmapSet:
    """Four peak-1 Gaussian keypoint maps, order [long_a, long_b, short_a, short_b]."""

    maps: np.ndarray  # (4, h, w) float32 in [0, 1]
    sigma: float
    peak: float = 1.0


@dataclass(frozen=True)
class LoiTransform:
    """Invertible rotate/crop/resize mapping slice frame -> LOI frame.

    Forward: rotate about ``crop_center`` by ``rotation_rad``, crop the
    axis-aligned square of side ``crop_width_px`` centered there, resize to
    ``output_size``.
    """

    rotation_rad: float
    crop_center: Point2
    crop_width_px: float
    output_size: tuple[int, int] = (LOI_SIZE, LOI_SIZE)

    def __post_init__(self):
        if self.crop_width_px <= 0:
            raise ValueError("crop width must be positive")

    @property
    def scale(self) -> float:
        return self.output_size[1] / self.crop_width_px


# ---------------------------------------------------------------------------
# RECIST extraction


def _foreground(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise EmptyMask(f"mask must be 2D, got shape {m.shape}")
    return m > 0 if m.dtype != bool else m


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(N, 2) integer (x, y) coordinates of 4-connected boundary pixels."""
    fg = _foreground(mask)
    interior = ndimage.binary_erosion(fg, structure=_CROSS, border_value=0)
    ys, xs = np.nonzero(fg & ~interior)
    return np.stack([xs, ys], axis=1)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain on integer points; strict turns only."""
    pts = sorted({(int(x), int(y)) for x, y in points})
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def _farthest_pair(boundary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Farthest pair among boundary pixels, exact in integer arithmetic.

    The diameter of a point set is attained between convex-hull vertices, so
    only hull vertices are scanned. Ties resolve to the pair whose first
    endpoint (the lexicographically smaller by (y, x)) is smallest, then by
    the second endpoint.
    """
    hull = _convex_hull(boundary)
    n = len(hull)
    if n == 1:
        return hull[0], hull[0]
    best_d2 = -1
    best_key = None
    best = (hull[0], hull[0])
    for i in range(n):
        xi, yi = int(hull[i][0]), int(hull[i][1])
        for j in range(i + 1, n):
            xj, yj = int(hull[j][0]), int(hull[j][1])
            d2 = (xi - xj) ** 2 + (yi - yj) ** 2
            if d2 < best_d2:
                continue
            a, b = ((xi, yi), (xj, yj))
            if (a[1], a[0]) > (b[1], b[0]):
                a, b = b, a
            key = (a[1], a[0], b[1], b[0])
            if d2 > best_d2 or key < best_key:
                best_d2, best_key = d2, key
                best = (np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))
    return best


def recist_from_mask(
    mask: np.ndarray,
    spacing_mm_per_px: float,
    frame: Frame = Frame.SLICE,
) -> RecistMeasurement:
    """Measure the long and short RECIST axes of a binary mask.

    Long axis: the boundary-pixel pair at maximum Euclidean distance (exact).
    Short axis: perpendicular chords are scanned at 1-px steps along the long
    axis; at each step the longest contiguous foreground run along the
    perpendicular line is measured via the perpendicular projections of the
    run's pixels, so the short segment is exactly perpendicular to the long
    one and never exceeds it. Widest chord wins, ties go to the smaller step.
    """
    fg = _foreground(mask)
    n_fg = int(fg.sum())
    if n_fg < 3:
        raise EmptyMask(f"mask has {n_fg} foreground pixels, need >= 3")
    _, n_comp = ndimage.label(fg, structure=ndimage.generate_binary_structure(2, 2))
    if n_comp > 1:
        raise DisconnectedMask(f"mask has {n_comp} connected components")

    boundary = boundary_pixels(fg)
    pa, pb = _farthest_pair(boundary)
    a = pa.astype(np.float64)
    b = pb.astype(np.float64)
    long_len = float(np.linalg.norm(b - a))

    u = (b - a) / long_len
    v = np.array([-u[1], u[0]])
    h, w = fg.shape

    # Perpendicular scan range: the whole mask fits inside its bounding circle.
    ys, xs = np.nonzero(fg)
    smax = int(math.ceil(math.hypot(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)))
    s_offsets = np.arange(-smax, smax + 1, dtype=np.float64)

    best_len = -1.0
    best_pts: tuple[np.ndarray, np.ndarray] | None = None
    for t in range(int(math.floor(long_len)) + 1):
        c = a + t * u
        line = c[None, :] + s_offsets[:, None] * v[None, :]
        px = np.rint(line[:, 0]).astype(np.int64)
        py = np.rint(line[:, 1]).astype(np.int64)
        ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        hit = np.zeros(len(s_offsets), dtype=bool)
        hit[ok] = fg[py[ok], px[ok]]
        if not hit.any():
            continue
        # Longest contiguous run of foreground samples; earliest run on ties.
        padded = np.concatenate([[False], hit, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, ends = edges[0::2], edges[1::2]
        run = int(np.argmax(ends - starts))
        sl = slice(starts[run], ends[run])
        pix = np.stack([px[sl], py[sl]], axis=1).astype(np.float64)
        q = (pix - c[None, :]) @ v
        chord = float(q.max() - q.min())
        if chord > best_len + 1e-12:
            best_len = chord
            best_pts = (c + q.min() * v, c + q.max() * v)

    assert best_pts is not None  # t=0 always intersects the mask at pixel a
    sa, sb = best_pts
    return RecistMeasurement(
        long_a=Point2(float(a[0]), float(a[1])),
        long_b=Point2(float(b[0]), float(b[1])),
        short_a=Point2(float(sa[0]), float(sa[1])),
        short_b=Point2(float(sb[0]), float(sb[1])),
        spacing_mm_per_px=spacing_mm_per_px,
        frame=frame,
    )


# ---------------------------------------------------------------------------
# Click guidance


def make_click_guidance(
    shape: tuple[int, int],
    p: Point2,
    sigma_c: float = DEFAULT_CLICK_SIGMA,
) -> ClickGuidance:
    """Build the two guidance channels for a click at ``p``.

    distance_image(q) = min(||q - p||, 255); click_image is a Gaussian with
    peak 255 at the pixel nearest ``p`` and width ``sigma_c``.
    """
    h, w = shape
    if not (0 <= p.x < w and 0 <= p.y < h):
        raise OutOfBounds(f"click ({p.x}, {p.y}) outside {w}x{h} grid")
    if sigma_c <= 0:
        raise ValueError("sigma_c must be positive")
    Y, X = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (X - p.x) ** 2 + (Y - p.y) ** 2
    distance = np.minimum(np.sqrt(d2), DISTANCE_CAP).astype(np.float32)
    cx, cy = round(p.x), round(p.y)
    d2_peak = (X - cx) ** 2 + (Y - cy) ** 2
    click_img = (CLICK_PEAK * np.exp(-d2_peak / (2.0 * sigma_c**2))).astype(np.float32)
    return ClickGuidance(click=p, click_image=click_img, distance_image=distance, shape=(h, w))


# ---------------------------------------------------------------------------
# Keypoint heatmaps


def gaussian_maps(points: np.ndarray, grid: tuple[int, int], sigma: float) -> np.ndarray:
    """Peak-1 Gaussians, one channel per (x, y) point, as a (K, h, w) array."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = grid
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    Y, X = np.mgrid[0:h, 0:w].astype(np.float64)
    maps = np.empty((len(pts), h, w), dtype=np.float32)
    for k, (cx, cy) in enumerate(pts):
        maps[k] = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * sigma**2))
    return maps


def encode_heatmaps(
    recist: RecistMeasurement,
    grid: tuple[int, int],
    sigma: float,
) -> HeatmapSet:
    """Render one peak-1 Gaussian per RECIST endpoint onto ``grid`` (h, w)."""
    return HeatmapSet(maps=gaussian_maps(recist.endpoints(), grid, sigma), sigma=sigma)


def decode_peak(channel: np.ndarray) -> tuple[float, float]:
    """Sub-pixel peak of one heatmap channel.

    Argmax (row-major first on ties) refined by the weighted centroid of the
    3x3 window around it, weights = window values minus the window minimum
    (zeroing the baseline keeps the refinement accurate for wide Gaussians).
    """
    m = np.asarray(channel, dtype=np.float64)
    if m.max() - m.min() == 0:
        raise DegenerateMap("constant heatmap channel has no peak")
    iy, ix = np.unravel_index(int(np.argmax(m)), m.shape)
    y0, y1 = max(0, iy - 1), min(m.shape[0], iy + 2)
    x0, x1 = max(0, ix - 1), min(m.shape[1], ix + 2)
    win = m[y0:y1, x0:x1]
    wgt = win - win.min()
    s = wgt.sum()
    if s <= 0:
        return float(ix), float(iy)
    Y, X = np.mgrid[y0:y1, x0:x1]
    return float((wgt * X).sum() / s), float((wgt * Y).sum() / s)


def decode_points(maps: np.ndarray) -> np.ndarray:
    """Sub-pixel peaks of a (K, h, w) heatmap stack as a (K, 2) xy array."""
    return np.array([decode_peak(m) for m in maps], dtype=np.float64)


def decode_heatmaps(
    maps: HeatmapSet,
    spacing_mm_per_px: float = 1.0,
    frame: Frame = Frame.SLICE,
) -> RecistMeasurement:
    """Recover the four endpoints from a heatmap set.

    If the decoded "short" segment comes out longer than the "long" one
    (possible on noisy predictions of near-circular lesions), the two axes
    are swapped so the measurement invariant holds.
    """
    pts = decode_points(maps.maps)
    la, lb, sa, sb = (Point2(float(x), float(y)) for x, y in pts)
    if la.dist(lb) < sa.dist(sb):
        la, lb, sa, sb = sa, sb, la, lb
    return RecistMeasurement(
        long_a=la, long_b=lb, short_a=sa, short_b=sb,
        spacing_mm_per_px=spacing_mm_per_px, frame=frame,
    )


# ---------------------------------------------------------------------------
# LOI transform


def plan_loi(
    recist: RecistMeasurement,
    box: tuple[float, float, float, float],
    mask_centroid: Point2,
) -> LoiTransform:
    """Plan the rotate/crop/resize that maps a lesion to the LOI frame.

    The rotation sends the long axis horizontal; the square crop is centered
    on the mask centroid with side two times the box's long side.
    """
    x0, y0, x1, y1 = box
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise DegenerateBox(f"box {box} has non-positive extent")
    dx = recist.long_b.x - recist.long_a.x
    dy = recist.long_b.y - recist.long_a.y
    return LoiTransform(
        rotation_rad=-math.atan2(dy, dx),
        crop_center=mask_centroid,
        crop_width_px=2.0 * max(bw, bh),
    )


def _loi_matrices(t: LoiTransform) -> tuple[np.ndarray, np.ndarray, float]:
    c, s = math.cos(t.rotation_rad), math.sin(t.rotation_rad)
    rot = np.array([[c, -s], [s, c]])
    return rot, rot.T, t.scale


def apply_loi(
    t: LoiTransform,
    image: np.ndarray | None = None,
    points: np.ndarray | None = None,
    order: int = 1,
):
    """Map an image and/or (N, 2) xy points from slice frame to LOI frame.

    Image resampling is bilinear (``order=1``) with zero padding outside the
    slice; the point path is exact affine. Returns whichever of
    (image, points) was given, in that order.
    """
    rot, _, scale = _loi_matrices(t)
    n_out = t.output_size[1]
    half = t.crop_width_px / 2.0
    center = t.crop_center.as_array()
    out = []
    if image is not None:
        jj, ii = np.meshgrid(np.arange(n_out), np.arange(t.output_size[0]))
        # LOI pixel center -> rotated-frame offset -> slice coords
        rx = (jj + 0.5) / scale - half
        ry = (ii + 0.5) / scale - half
        src = np.einsum("ij,jhw->ihw", rot.T, np.stack([rx, ry]))
        src_x = src[0] + center[0]
        src_y = src[1] + center[1]
        warped = ndimage.map_coordinates(
            np.asarray(image, dtype=np.float64), [src_y, src_x],
            order=order, mode="constant", cval=0.0,
        )
        out.append(warped.astype(np.float32))
    if points is not None:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r = (pts - center[None, :]) @ rot.T  # row-vector form of r = R (p - c)
        out.append((r + half) * scale - 0.5)
    if not out:
        raise ValueError("give an image, points, or both")
    return out[0] if len(out) == 1 else tuple(out)


def invert_loi(
    t: LoiTransform,
    image: np.ndarray | None = None,
    points: np.ndarray | None = None,
    output_shape: tuple[int, int] | None = None,
    order: int = 1,
):
    """Inverse of :func:`apply_loi`; ``output_shape`` is the slice (H, W)."""
    rot, rot_inv, scale = _loi_matrices(t)
    half = t.crop_width_px / 2.0
    center = t.crop_center.as_array()
    out = []
    if image is not None:
        if output_shape is None:
            raise ValueError("output_shape required to invert an image")
        h, w = output_shape
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        d = np.stack([jj - center[0], ii - center[1]]).astype(np.float64)
        r = np.einsum("ij,jhw->ihw", rot, d)
        src_x = (r[0] + half) * scale - 0.5
        src_y = (r[1] + half) * scale - 0.5
        warped = ndimage.map_coordinates(
            np.asarray(image, dtype=np.float64), [src_y, src_x],
            order=order, mode="constant", cval=0.0,
        )
        out.append(warped.astype(np.float32))
    if points is not None:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r = (pts + 0.5) / scale - half
        out.append(r @ rot_inv.T + center[None, :])
    if not out:
        raise ValueError("give an image, points, or both")
    return out[0] if len(out) == 1 else tuple(out)


# ---------------------------------------------------------------------------
# Contours


def mask_to_contour(mask: np.ndarray) -> list[np.ndarray]:
    """Closed marching-squares boundary loops of a binary mask.

    Returns a list of (K, 2) float arrays of (x, y) vertices at the 0.5
    iso-level. Loops touching the image edge are closed by padding.
    """
    fg = _foreground(mask).astype(np.float64)
    if not fg.any():
        return []
    padded = np.pad(fg, 1)
    loops = _skmeasure.find_contours(padded, level=0.5)
    out = []
    for loop in loops:
        xy = loop[:, ::-1] - 1.0  # (row, col) -> (x, y), undo pad
        if not np.allclose(xy[0], xy[-1]):
            xy = np.vstack([xy, xy[0]])
        out.append(xy)
    return out


def contour_area(loop: np.ndarray) -> float:
    """Shoelace area of a closed (K, 2) polygon."""
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def mask_centroid(mask: np.ndarray) -> Point2:
    """Foreground centroid in (x, y) pixel coordinates."""
    fg = _foreground(mask)
    if not fg.any():
        raise EmptyMask("cannot take centroid of empty mask")
    ys, xs = np.nonzero(fg)
    return Point2(float(xs.mean()), float(ys.mean()))
