"""Shared helpers for tests: independent oracles and mask generators."""

import numpy as np
from scipy import ndimage


def random_blob_mask(rng, size=64, min_pixels=12):
    """Single-component random blob via thresholded smooth noise."""
    for _ in range(100):
        noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(3, 7))
        mask = noise > np.quantile(noise, rng.uniform(0.75, 0.92))
        lab, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(2, 2))
        if n == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=range(1, n + 1))
        mask = lab == (1 + int(np.argmax(sizes)))
        if mask.sum() >= min_pixels:
            return mask
    raise RuntimeError("failed to sample a blob mask")


def brute_force_long_axis(mask):
    """O(B^2) all-pairs scan over 4-connected boundary pixels.

    Independent oracle for the long-axis length: no hull, no calipers.
    """
    fg = mask > 0
    interior = ndimage.binary_erosion(fg, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    ys, xs = np.nonzero(fg & ~interior)
    pts = np.stack([xs, ys], axis=1).astype(np.int64)
    best = 0
    for i in range(len(pts)):
        d2 = ((pts[i + 1:] - pts[i]) ** 2).sum(axis=1)
        if len(d2):
            best = max(best, int(d2.max()))
    return float(np.sqrt(best))


def disk_mask(size, cx, cy, r):
    Y, X = np.mgrid[0:size, 0:size]
    return (X - cx) ** 2 + (Y - cy) ** 2 <= r**2


def ellipse_mask(size, cx, cy, a, b, theta=0.0):
    Y, X = np.mgrid[0:size, 0:size]
    dx, dy = X - cx, Y - cy
    xr = dx * np.cos(theta) + dy * np.sin(theta)
    yr = -dx * np.sin(theta) + dy * np.cos(theta)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
