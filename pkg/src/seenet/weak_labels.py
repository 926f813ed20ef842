"""Weak supervision from RECIST annotations.

Pseudo lesion masks are grown from the annotation geometry with a seeded
graph cut: the annotation quadrilateral (eroded) is hard foreground, the
dilated quadrilateral bounding box bounds the unknown region, and everything
else is hard background. Intensity likelihoods come from a two-component
Gaussian mixture per side, refit over a fixed number of cut iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow
from skimage.draw import polygon as _draw_polygon

from .errors import DegenerateRecist, EmptyLabel, OutOfBounds, ShapeMismatch
from .geometry import Point2, RecistMeasurement

BACKGROUND = 0
LESION = 1
UNCERTAIN = 255

CLICK_DILATION_PX = 5.0


@dataclass(frozen=True)
class PseudoMaskConfig:
    """Seeding geometry and graph-cut parameters for pseudo masks."""

    quad_erode_frac: float = 0.2     # of short-axis length
    probable_dilate_frac: float = 0.5  # of long-axis length
    iterations: int = 5
    gmm_components: int = 2
    smoothness: float = 50.0         # n-link weight scale (gamma)
    bg_ring_px: int = 12             # hard-background margin around the unknown box
    capacity_scale: int = 64         # float->int capacity quantization


DEFAULT_PSEUDO_CONFIG = PseudoMaskConfig()


@dataclass(frozen=True)
class LesionLabel:
    """Per-pixel classes over {background=0, lesion=1, uncertain=255}."""

    classes: np.ndarray  # uint8 H x W
    source: str  # "pseudo_grabcut" | "refined"

    @property
    def lesion(self) -> np.ndarray:
        return self.classes == LESION

    @property
    def uncertain(self) -> np.ndarray:
        return self.classes == UNCERTAIN

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


# ---------------------------------------------------------------------------
# Gaussian mixture (1D, fixed component count, deterministic init)


def _fit_gmm(values: np.ndarray, n_components: int, iters: int = 12):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot fit mixture on empty sample")
    qs = np.linspace(20, 80, n_components)
    mu = np.percentile(v, qs)
    mu += 1e-3 * np.arange(n_components)  # break exact ties
    var = np.full(n_components, max(v.var() / n_components, 1.0))
    w = np.full(n_components, 1.0 / n_components)
    for _ in range(iters):
        log_p = (
            -0.5 * ((v[:, None] - mu) ** 2 / var + np.log(2 * np.pi * var))
            + np.log(w)
        )
        log_norm = np.logaddexp.reduce(log_p, axis=1, keepdims=True)
        r = np.exp(log_p - log_norm)
        nk = r.sum(axis=0) + 1e-9
        w = nk / v.size
        mu = (r * v[:, None]).sum(axis=0) / nk
        var = (r * (v[:, None] - mu) ** 2).sum(axis=0) / nk
        var = np.maximum(var, 0.25)
    return w, mu, var


def _gmm_neg_log_likelihood(values: np.ndarray, params) -> np.ndarray:
    w, mu, var = params
    v = np.asarray(values, dtype=np.float64).ravel()
    log_p = (
        -0.5 * ((v[:, None] - mu) ** 2 / var + np.log(2 * np.pi * var))
        + np.log(w)
    )
    return -np.logaddexp.reduce(log_p, axis=1)


# ---------------------------------------------------------------------------
# Graph cut on a window


def _min_cut_labels(
    intensities: np.ndarray,
    sure_fg: np.ndarray,
    sure_bg: np.ndarray,
    data_fg: np.ndarray,
    data_bg: np.ndarray,
    cfg: PseudoMaskConfig,
) -> np.ndarray:
    """Binary fg labels over a window via s-t min cut.

    Node p pays ``data_bg[p]`` when labeled background and ``data_fg[p]`` when
    labeled foreground; 4-neighbor links pay a contrast-weighted smoothness
    cost. Hard seeds get effectively infinite terminal links.
    """
    h, w = intensities.shape
    n = h * w
    src, snk = n, n + 1
    scale = cfg.capacity_scale
    inf = np.int64(2**30)

    idx = np.arange(n).reshape(h, w)
    flat = intensities.astype(np.float64).ravel()

    rows, cols, caps = [], [], []

    # n-links (both directions), contrast-sensitive
    pairs = []
    pairs.append((idx[:, :-1].ravel(), idx[:, 1:].ravel()))
    pairs.append((idx[:-1, :].ravel(), idx[1:, :].ravel()))
    diffs = np.concatenate([(flat[a] - flat[b]) ** 2 for a, b in pairs])
    beta = 1.0 / max(2.0 * diffs.mean(), 1e-6)
    for a, b in pairs:
        wgt = cfg.smoothness * np.exp(-beta * (flat[a] - flat[b]) ** 2)
        cap = np.maximum(1, np.rint(wgt * scale).astype(np.int64))
        rows.extend([a, b])
        cols.extend([b, a])
        caps.extend([cap, cap])

    # t-links: source->p (cost of background label), p->sink (cost of foreground)
    to_src = np.rint(np.clip(data_bg, 0, 30) * scale).astype(np.int64)
    to_snk = np.rint(np.clip(data_fg, 0, 30) * scale).astype(np.int64)
    fg_flat = sure_fg.ravel()
    bg_flat = sure_bg.ravel()
    to_src[fg_flat] = inf
    to_snk[fg_flat] = 0
    to_snk[bg_flat] = inf
    to_src[bg_flat] = 0

    all_nodes = np.arange(n)
    rows.append(np.full(n, src))
    cols.append(all_nodes)
    caps.append(to_src)
    rows.append(all_nodes)
    cols.append(np.full(n, snk))
    caps.append(to_snk)

    graph = csr_matrix(
        (np.concatenate(caps), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n + 2, n + 2), dtype=np.int64,
    )
    graph = graph.astype(np.int32)
    res = maximum_flow(graph, src, snk)
    residual = graph - res.flow
    residual.data = np.maximum(residual.data, 0)
    residual.eliminate_zeros()
    reachable = breadth_first_order(residual, src, directed=True, return_predecessors=False)
    labels = np.zeros(n + 2, dtype=bool)
    labels[reachable] = True
    return labels[:n].reshape(h, w)


# ---------------------------------------------------------------------------
# Public operations


def _quad_mask(recist: RecistMeasurement, shape: tuple[int, int]) -> np.ndarray:
    pts = recist.endpoints()[[0, 2, 1, 3]]  # long_a, short_a, long_b, short_b
    rr, cc = _draw_polygon(pts[:, 1], pts[:, 0], shape=shape)
    quad = np.zeros(shape, dtype=bool)
    quad[rr, cc] = True
    return quad


def pseudo_mask_from_recist(
    slice_img: np.ndarray,
    recist: RecistMeasurement,
    config: PseudoMaskConfig = DEFAULT_PSEUDO_CONFIG,
) -> LesionLabel:
    """Grow a pseudo lesion mask around a RECIST annotation.

    Raises DegenerateRecist when the long axis is under 3 px and OutOfBounds
    when an endpoint falls outside the slice.
    """
    img = np.asarray(slice_img, dtype=np.float64)
    h, w = img.shape
    if recist.long_px < 3.0:
        raise DegenerateRecist(f"long axis {recist.long_px:.2f}px < 3px")
    pts = recist.endpoints()
    if (pts[:, 0] < 0).any() or (pts[:, 0] > w - 1).any() or \
       (pts[:, 1] < 0).any() or (pts[:, 1] > h - 1).any():
        raise OutOfBounds("RECIST endpoints must lie inside the slice")

    quad = _quad_mask(recist, (h, w))
    if not quad.any():  # extremely thin annotation: fall back to endpoint pixels
        quad[np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1),
             np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)] = True

    erode_r = config.quad_erode_frac * recist.short_px
    edt = ndimage.distance_transform_edt(quad)
    sure_fg_full = edt > erode_r
    if not sure_fg_full.any():
        iy, ix = np.unravel_index(int(np.argmax(edt)), edt.shape)
        sure_fg_full = np.zeros_like(quad)
        sure_fg_full[iy, ix] = True

    grow = config.probable_dilate_frac * recist.long_px
    qys, qxs = np.nonzero(quad)
    px0 = max(0, int(math.floor(qxs.min() - grow)))
    px1 = min(w, int(math.ceil(qxs.max() + 1 + grow)))
    py0 = max(0, int(math.floor(qys.min() - grow)))
    py1 = min(h, int(math.ceil(qys.max() + 1 + grow)))

    # working window: unknown box plus a hard-background ring
    wx0, wx1 = max(0, px0 - config.bg_ring_px), min(w, px1 + config.bg_ring_px)
    wy0, wy1 = max(0, py0 - config.bg_ring_px), min(h, py1 + config.bg_ring_px)
    win = img[wy0:wy1, wx0:wx1]
    sure_fg = sure_fg_full[wy0:wy1, wx0:wx1]
    unknown_box = np.zeros(win.shape, dtype=bool)
    unknown_box[py0 - wy0:py1 - wy0, px0 - wx0:px1 - wx0] = True
    sure_bg = ~unknown_box

    fg_px = win[sure_fg]
    if fg_px.size < 5:
        fg_px = win[quad[wy0:wy1, wx0:wx1]]
    bg_px = win[sure_bg]
    if bg_px.size < 5:
        bg_px = win[~quad[wy0:wy1, wx0:wx1]]

    fg_labels = sure_fg.copy()
    for _ in range(config.iterations):
        fg_model = _fit_gmm(fg_px, config.gmm_components)
        bg_model = _fit_gmm(bg_px, config.gmm_components)
        data_fg = _gmm_neg_log_likelihood(win, fg_model)  # cost of fg label
        data_bg = _gmm_neg_log_likelihood(win, bg_model)  # cost of bg label
        new_fg = _min_cut_labels(win, sure_fg, sure_bg, data_fg, data_bg, config)
        new_fg |= sure_fg
        changed = bool((new_fg ^ fg_labels).any())
        fg_labels = new_fg
        fg_px = win[fg_labels] if fg_labels.any() else fg_px
        bg_px = win[~fg_labels] if (~fg_labels).any() else bg_px
        if not changed:
            break

    classes = np.zeros((h, w), dtype=np.uint8)
    classes[wy0:wy1, wx0:wx1][fg_labels] = LESION
    classes[sure_fg_full] = LESION
    return LesionLabel(classes=classes, source="pseudo_grabcut")


def refine_labels(pred_mask: np.ndarray, pseudo: LesionLabel) -> LesionLabel:
    """Agreement labeling for the refinement stage.

    Pixels where the prediction and pseudo mask agree on lesion stay lesion;
    disagreements (and pixels already uncertain) become uncertain; the rest is
    background.
    """
    pred = np.asarray(pred_mask) > 0
    if pred.shape != pseudo.classes.shape:
        raise ShapeMismatch(f"{pred.shape} vs {pseudo.classes.shape}")
    p_lesion = pseudo.lesion
    classes = np.zeros(pred.shape, dtype=np.uint8)
    classes[pred & p_lesion] = LESION
    classes[pred ^ p_lesion] = UNCERTAIN
    classes[pseudo.uncertain] = UNCERTAIN
    return LesionLabel(classes=classes, source="refined")


def click_region(label: LesionLabel, radius: float = CLICK_DILATION_PX) -> np.ndarray:
    """Lesion class dilated by a Euclidean disk of ``radius`` pixels."""
    lesion = label.lesion
    if not lesion.any():
        raise EmptyLabel("no lesion pixels to sample a click from")
    return ndimage.distance_transform_edt(~lesion) <= radius


def sample_click(pseudo: LesionLabel, rng_seed: int) -> Point2:
    """Uniform click over the 5-px-dilated lesion region; seed-deterministic."""
    region = click_region(pseudo)
    ys, xs = np.nonzero(region)
    rng = np.random.default_rng(rng_seed)
    k = int(rng.integers(len(xs)))
    return Point2(float(xs[k]), float(ys[k]))
