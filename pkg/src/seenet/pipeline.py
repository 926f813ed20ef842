"""Two-stage orchestration: training loops, LOI construction, and the
click-to-measurement inference path."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from scipy import ndimage

from . import __version__
from .data import Dataset
from .errors import DegenerateMap, EmptyDataset, MissingStage1, NoCandidate
from .geometry import (
    Frame,
    LoiTransform,
    Point2,
    RecistMeasurement,
    apply_loi,
    decode_points,
    gaussian_maps,
    invert_loi,
    make_click_guidance,
    mask_centroid,
    plan_loi,
)
from .nets import (
    Candidate,
    Detector,
    NetConfig,
    Refiner,
    Stage1Outputs,
    box_iou_matrix,
    clip_boxes,
    decode_boxes,
    detector_forward,
    encode_boxes,
    load_checkpoint,
    make_anchors,
    refiner_forward,
    save_checkpoint,
    loss_stage1,
    loss_stage2,
)
from .weak_labels import LesionLabel, pseudo_mask_from_recist, sample_click
from .evaluation import write_metrics_csv

log = logging.getLogger(__name__)

LOI_SIZE = Refiner.INPUT_SIZE


@dataclass(frozen=True)
class TrainConfig:
    """Training/inference configuration; epoch counts scale together while
    keeping the decay-point ratios fixed."""

    seed: int = 0
    width_factor: float = 1.0
    stage1_epochs: int = 8
    stage1_lr: float = 0.004
    stage1_batch: int = 8
    stage2_epochs: int = 150
    stage2_lr: float = 0.01
    stage2_batch: int = 16
    momentum: float = 0.9
    epochs_scale: float = 1.0
    aug_scale: tuple[float, float] = (0.8, 1.2)
    aug_rotate_deg: float = 15.0
    aug_translate_px: float = 16.0
    click_sigma: float = 5.0
    click_dropout: float = 0.5
    # desk-scale optimizer detail: the keypoint-heatmap terms are means over
    # full maps, so their gradients are orders of magnitude below the other
    # terms at short schedules; the head-only lr multiplier compensates
    # without touching the loss definition.
    recist_lr_mult_stage1: float = 16.0
    recist_lr_mult_stage2: float = 64.0
    score_thresh: float = 0.05
    use_adjusted_loi: bool = True
    rpn_pos_iou: float = 0.6
    rpn_neg_iou: float = 0.3
    rpn_samples: int = 48
    roi_samples: int = 16
    roi_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5

    def net_config(self) -> NetConfig:
        return NetConfig(width_factor=self.width_factor)

    def scaled_epochs(self, stage: int) -> int:
        base = self.stage1_epochs if stage == 1 else self.stage2_epochs
        return max(1, int(round(base * self.epochs_scale)))


def lr_stage1(epoch: int, base_lr: float = 0.004, total_epochs: int = 8) -> float:
    """Piecewise-constant schedule: x0.1 after 1/2 and 3/4 of the run."""
    d1 = math.floor(total_epochs * 0.5)
    d2 = math.floor(total_epochs * 0.75)
    if epoch < d1:
        return base_lr
    if epoch < d2:
        return base_lr * 0.1
    return base_lr * 0.01


def lr_stage2(epoch: int, base_lr: float = 0.01, total_epochs: int = 150) -> float:
    """Piecewise-constant schedule: x0.1 after every third of the run."""
    third = total_epochs / 3.0
    k = min(2, int(epoch // third))
    return base_lr * (0.1**k)


def config_to_yaml(cfg: TrainConfig, path):
    Path(path).write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))


def config_from_yaml(path) -> TrainConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    for k, v in raw.items():
        if isinstance(v, list):
            raw[k] = tuple(v)
    return TrainConfig(**raw)


def write_manifest(out_dir, cfg: TrainConfig, extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = yaml.safe_dump(asdict(cfg), sort_keys=True)
    manifest = {
        "config_hash": hashlib.sha1(blob.encode()).hexdigest(),
        "seed": cfg.seed,
        "code_version": __version__,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    config_to_yaml(cfg, out / "config.yaml")


# ---------------------------------------------------------------------------
# Augmentation (similarity: uniform scale + rotation + translation)


def random_similarity(rng, shape, cfg: TrainConfig):
    s = rng.uniform(*cfg.aug_scale)
    ang = math.radians(rng.uniform(-cfg.aug_rotate_deg, cfg.aug_rotate_deg))
    tx = rng.uniform(-cfg.aug_translate_px, cfg.aug_translate_px)
    ty = rng.uniform(-cfg.aug_translate_px, cfg.aug_translate_px)
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rot = s * np.array([[math.cos(ang), -math.sin(ang)],
                        [math.sin(ang), math.cos(ang)]])
    offset = c + np.array([tx, ty]) - rot @ c
    return rot, offset


def warp_points(pts: np.ndarray, rot: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return np.atleast_2d(pts) @ rot.T + offset[None, :]


def warp_image(img: np.ndarray, rot: np.ndarray, offset: np.ndarray, order: int = 1):
    """Forward-warp an image under p' = rot @ p + offset (p as xy)."""
    h, w = img.shape
    inv = np.linalg.inv(rot)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    d = np.stack([jj - offset[0], ii - offset[1]]).astype(np.float64)
    src = np.einsum("ij,jhw->ihw", inv, d)
    return ndimage.map_coordinates(
        np.asarray(img, dtype=np.float64), [src[1], src[0]],
        order=order, mode="constant", cval=0.0).astype(np.float32)


def _sgd_with_head_boost(model, head, base_lr, momentum, head_mult):
    head_params = set(map(id, head.parameters()))
    rest = [p for p in model.parameters() if id(p) not in head_params]
    groups = [
        {"params": rest, "lr": base_lr, "lr_scale": 1.0},
        {"params": list(head.parameters()), "lr": base_lr * head_mult,
         "lr_scale": head_mult},
    ]
    return torch.optim.SGD(groups, lr=base_lr, momentum=momentum)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


# ---------------------------------------------------------------------------
# Stage-1 target assembly


def _sample_balanced(pos_mask: torch.Tensor, neg_mask: torch.Tensor,
                     n_total: int, pos_fraction: float, rng) -> torch.Tensor:
    pos_idx = torch.nonzero(pos_mask).flatten()
    neg_idx = torch.nonzero(neg_mask).flatten()
    n_pos = min(len(pos_idx), int(round(n_total * pos_fraction)))
    n_neg = min(len(neg_idx), n_total - n_pos)
    if len(pos_idx) > n_pos:
        pos_idx = pos_idx[torch.from_numpy(
            rng.choice(len(pos_idx), size=n_pos, replace=False))]
    if len(neg_idx) > n_neg:
        neg_idx = neg_idx[torch.from_numpy(
            rng.choice(len(neg_idx), size=n_neg, replace=False))]
    return pos_idx, neg_idx


def _rpn_loss_single(model, obj, deltas, gt_boxes, cfg: TrainConfig, rng):
    a = len(model.config.anchor_aspects)
    _, _, fh, fw = obj.shape
    anchors = make_anchors(fh, fw, model.config, obj.device)
    obj_flat = obj.permute(0, 2, 3, 1).reshape(-1)
    deltas_flat = deltas.permute(0, 2, 3, 1).reshape(-1, 4)
    if len(gt_boxes) == 0:
        neg = torch.ones(len(anchors), dtype=torch.bool)
        pos_idx = torch.empty(0, dtype=torch.long)
        _, neg_idx = _sample_balanced(~neg, neg, cfg.rpn_samples, 0.5, rng)
        logits = obj_flat[neg_idx]
        return F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits))
    iou = box_iou_matrix(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    pos = best_iou >= cfg.rpn_pos_iou
    pos[iou.argmax(dim=0)] = True  # best anchor per gt is always positive
    neg = (best_iou < cfg.rpn_neg_iou) & ~pos
    pos_idx, neg_idx = _sample_balanced(pos, neg, cfg.rpn_samples, 0.5, rng)
    sel = torch.cat([pos_idx, neg_idx])
    labels = torch.zeros(len(sel))
    labels[: len(pos_idx)] = 1.0
    cls = F.binary_cross_entropy_with_logits(obj_flat[sel], labels)
    if len(pos_idx):
        tgt = encode_boxes(anchors[pos_idx], gt_boxes[best_gt[pos_idx]])
        box = F.smooth_l1_loss(deltas_flat[pos_idx], tgt)
    else:
        box = obj.new_zeros(())
    return cls + box


def roi_to_grid_points(points: np.ndarray, box, grid: int) -> np.ndarray:
    """Map slice-frame xy points into the head grid of a candidate box."""
    x0, y0, x1, y1 = box
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = (pts[:, 0] - x0) / max(x1 - x0, 1e-6) * grid - 0.5
    v = (pts[:, 1] - y0) / max(y1 - y0, 1e-6) * grid - 0.5
    return np.stack([u, v], axis=1)


def grid_points_to_slice(points: np.ndarray, box, grid: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = (pts[:, 0] + 0.5) / grid * (x1 - x0) + x0
    y = (pts[:, 1] + 0.5) / grid * (y1 - y0) + y0
    return np.stack([x, y], axis=1)


def paste_roi(values: np.ndarray, box, out_shape) -> np.ndarray:
    """Paste a head-grid map (e.g. 28x28 probabilities) into the slice frame."""
    h, w = out_shape
    g = values.shape[0]
    x0, y0, x1, y1 = box
    out = np.zeros((h, w), dtype=np.float32)
    cx0 = max(0, int(math.ceil(x0)))
    cx1 = min(w - 1, int(math.floor(x1)))
    cy0 = max(0, int(math.ceil(y0)))
    cy1 = min(h - 1, int(math.floor(y1)))
    if cx1 < cx0 or cy1 < cy0:
        return out
    xs = np.arange(cx0, cx1 + 1)
    ys = np.arange(cy0, cy1 + 1)
    u = (xs - x0) / max(x1 - x0, 1e-6) * g - 0.5
    v = (ys - y0) / max(y1 - y0, 1e-6) * g - 0.5
    U, V = np.meshgrid(u, v)
    vals = ndimage.map_coordinates(values.astype(np.float64), [V, U],
                                   order=1, mode="nearest")
    out[cy0:cy1 + 1, cx0:cx1 + 1] = vals
    return out


def _roi_head_targets(model, feat_i, proposals, gt_boxes, gt_masks_t, gt_endpoints,
                      cfg: TrainConfig, rng):
    """Sample ROIs for one image and build all head targets."""
    head = model.config.head_size
    rois = torch.cat([proposals, gt_boxes]) if len(gt_boxes) else proposals
    if len(rois) == 0:
        return None
    if len(gt_boxes):
        iou = box_iou_matrix(rois, gt_boxes)
        best_iou, best_gt = iou.max(dim=1)
    else:
        best_iou = torch.zeros(len(rois))
        best_gt = torch.zeros(len(rois), dtype=torch.long)
    pos = best_iou >= cfg.roi_pos_iou
    neg = ~pos
    pos_idx, neg_idx = _sample_balanced(pos, neg, cfg.roi_samples,
                                        cfg.roi_pos_fraction, rng)
    sel = torch.cat([pos_idx, neg_idx])
    rois_sel = rois[sel]
    cls_targets = torch.zeros(len(sel), dtype=torch.long)
    cls_targets[: len(pos_idx)] = 1
    pos_in_sel = torch.arange(len(pos_idx))
    box_targets = None
    mask_targets = None
    recist_targets = None
    if len(pos_idx):
        matched = best_gt[pos_idx]
        box_targets = encode_boxes(rois[pos_idx], gt_boxes[matched])
        # mask targets: crop each matched pseudo mask to its ROI at head size
        from torchvision.ops import roi_align

        crops = []
        for k, roi in zip(matched.tolist(), rois[pos_idx]):
            crops.append(roi_align(gt_masks_t[k][None, None], [roi[None] + 0.5],
                                   head, spatial_scale=1.0, aligned=True)[0, 0])
        mask_targets = torch.stack(crops)
        maps = []
        for k, roi in zip(matched.tolist(), rois[pos_idx]):
            pts = roi_to_grid_points(gt_endpoints[k], tuple(roi.tolist()), head)
            maps.append(gaussian_maps(pts, (head, head),
                                      model.config.heatmap_sigma_detector))
        recist_targets = torch.from_numpy(np.stack(maps))
    return rois_sel, cls_targets, pos_in_sel, box_targets, mask_targets, recist_targets


# ---------------------------------------------------------------------------
# Stage 1 training


def _clicks_and_input(image, pseudo_masks, cfg: TrainConfig, rng, lesion_idx=None):
    """Build the 3-channel training input; may drop the click entirely."""
    h, w = image.shape
    if rng.random() < cfg.click_dropout or not pseudo_masks:
        zero = np.zeros((h, w), dtype=np.float32)
        return np.stack([image, zero, zero], axis=-1), None
    k = lesion_idx if lesion_idx is not None else int(rng.integers(len(pseudo_masks)))
    classes = (pseudo_masks[k] > 0).astype(np.uint8)
    label = LesionLabel(classes=classes, source="pseudo_grabcut")
    click = sample_click(label, rng_seed=int(rng.integers(2**31)))
    g = make_click_guidance((h, w), click, sigma_c=cfg.click_sigma)
    return np.stack([image, g.click_image, g.distance_image], axis=-1), click


def build_pseudo_labels(dataset: Dataset) -> list[list[np.ndarray]]:
    """Pseudo lesion masks per sample per record (the stage-1 mask targets)."""
    out = []
    for s in dataset.samples:
        masks = []
        for r in s.records:
            label = pseudo_mask_from_recist(s.image, r.recist())
            masks.append(label.lesion)
        out.append(masks)
    return out


def train_stage1(dataset: Dataset, cfg: TrainConfig, out_dir,
                 pseudo_labels=None, max_steps: int | None = None) -> Path:
    """Train the detector with SGD under the scaled decay schedule."""
    if len(dataset) == 0:
        raise EmptyDataset("stage-1 training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = Detector(cfg.net_config())
    model.train()
    opt = _sgd_with_head_boost(model, model.recist_head, cfg.stage1_lr,
                               cfg.momentum, cfg.recist_lr_mult_stage1)
    total_epochs = cfg.scaled_epochs(1)
    if pseudo_labels is None:
        log.info("building pseudo masks for %d samples", len(dataset))
        pseudo_labels = build_pseudo_labels(dataset)

    rows = []
    step = 0
    first_step_loss = None
    for epoch in range(total_epochs):
        lr = lr_stage1(epoch, cfg.stage1_lr, total_epochs)
        _set_lr(opt, lr)
        order_rng = np.random.default_rng((cfg.seed, 1, epoch))
        order = order_rng.permutation(len(dataset))
        sums: dict[str, float] = {}
        n_steps = 0
        for b0 in range(0, len(order), cfg.stage1_batch):
            idxs = order[b0: b0 + cfg.stage1_batch]
            loss, parts = _stage1_step(model, dataset, pseudo_labels, idxs,
                                       cfg, epoch)
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            if first_step_loss is None:
                first_step_loss = float(loss.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        row = {"epoch": epoch, "lr": lr,
               **{f"loss_{k}": v / max(n_steps, 1) for k, v in sums.items()}}
        if epoch == 0:
            row["first_step_loss"] = first_step_loss
        rows.append(row)
        log.info("stage1 epoch %d/%d lr=%.2e loss=%.4f", epoch + 1, total_epochs,
                 lr, row.get("loss_total", float("nan")))
        if max_steps is not None and step >= max_steps:
            break
    write_metrics_csv(out / "metrics_stage1.csv", rows)
    ckpt = out / "stage1.ckpt"
    save_checkpoint(ckpt, stage=1, model=model, config=cfg.net_config(),
                    epoch=total_epochs,
                    schedule={"lr": lr, "total_epochs": total_epochs},
                    extra={"train_config": asdict(cfg)})
    return ckpt


def _stage1_step(model, dataset, pseudo_labels, idxs, cfg, epoch):
    inputs, per_image = [], []
    for i in idxs:
        s = dataset.samples[int(i)]
        rng = np.random.default_rng((cfg.seed, 1, epoch, int(i)))
        rot, offset = random_similarity(rng, s.image.shape, cfg)
        img = warp_image(s.image, rot, offset, order=1)
        masks, endpoints = [], []
        for r, pm in zip(s.records, pseudo_labels[int(i)]):
            wm = warp_image(pm.astype(np.float64), rot, offset, order=0) > 0.5
            if wm.sum() < 10:
                continue
            masks.append(wm)
            endpoints.append(warp_points(np.array(r.coords).reshape(4, 2), rot, offset))
        if not masks:
            continue
        inp, _ = _clicks_and_input(img, masks, cfg, rng)
        inputs.append(inp)
        gt_boxes = []
        for m in masks:
            ys, xs = np.nonzero(m)
            gt_boxes.append([xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5])
        per_image.append({
            "gt_boxes": torch.tensor(gt_boxes, dtype=torch.float32),
            "masks_t": [torch.from_numpy(m.astype(np.float32)) for m in masks],
            "endpoints": endpoints,
            "rng": rng,
        })
    if not inputs:
        return None, {}
    x = torch.from_numpy(np.stack(inputs)).permute(0, 3, 1, 2).contiguous()
    h, w = inputs[0].shape[:2]
    feat4, feat8 = model.features(x)
    obj, deltas = model.rpn(feat8)
    proposals = model.propose(obj, deltas, (h, w))

    rpn_total = x.new_zeros(())
    rois_list, cls_list, pos_lists = [], [], []
    box_t, mask_t, recist_t = [], [], []
    offset_r = 0
    for bi, info in enumerate(per_image):
        rpn_total = rpn_total + _rpn_loss_single(
            model, obj[bi:bi + 1], deltas[bi:bi + 1], info["gt_boxes"], cfg, info["rng"])
        tgt = _roi_head_targets(model, None, proposals[bi], info["gt_boxes"],
                                info["masks_t"], info["endpoints"], cfg, info["rng"])
        if tgt is None:
            continue
        rois_sel, cls_targets, pos_in_sel, bt, mt, rt = tgt
        rois_list.append(rois_sel)
        cls_list.append(cls_targets)
        pos_lists.append(pos_in_sel + offset_r)
        offset_r += len(rois_sel)
        if bt is not None:
            box_t.append(bt)
            mask_t.append(mt)
            recist_t.append(rt)
    if not rois_list:
        return None, {}
    cls_logits, box_deltas = model.head_box(feat4, rois_list)
    pos_index = torch.cat(pos_lists) if pos_lists else torch.empty(0, dtype=torch.long)
    # positive ROIs per image, in the same order as pos_index
    pos_per_image = []
    for rois_sel, cls_targets in zip(rois_list, cls_list):
        n_pos = int((cls_targets == 1).sum())
        pos_per_image.append(rois_sel[:n_pos])
    mask_logits, recist_maps = model.head_pixels(feat4, pos_per_image)
    out = Stage1Outputs(
        cls_logits=cls_logits,
        box_deltas=box_deltas,
        mask_logits=mask_logits,
        recist_maps=recist_maps,
        cls_targets=torch.cat(cls_list),
        box_targets=torch.cat(box_t) if box_t else torch.empty(0, 4),
        pos_index=pos_index,
        mask_targets=torch.cat(mask_t) if mask_t else torch.empty(0, 28, 28),
        recist_targets=torch.cat(recist_t) if recist_t else torch.empty(0, 4, 28, 28),
    )
    head_loss, parts = loss_stage1(out)
    rpn_loss = rpn_total / max(len(per_image), 1)
    total = head_loss + rpn_loss
    parts = dict(parts)
    parts["rpn"] = float(rpn_loss.detach())
    parts["total"] = float(total.detach())
    return total, parts


# ---------------------------------------------------------------------------
# LOI construction (stage-1 outputs -> stage-2 inputs)


@dataclass
class LoiSample:
    loi_image: np.ndarray  # (256, 256) float32
    click_xy: np.ndarray  # (2,)
    label: LesionLabel  # refined, LOI frame
    endpoints: np.ndarray  # (4, 2) annotation endpoints, LOI frame


def select_candidate(candidates: list[Candidate], click: Point2,
                     score_thresh: float) -> Candidate:
    """Pick the candidate for a click: highest score among boxes containing
    the click, else nearest box center among boxes whose surroundings (box
    grown by its own extent) still cover the click."""
    scored = [c for c in candidates if c.score >= score_thresh]
    containing = [c for c in scored if _box_contains(c.box, click)]
    if containing:
        return max(containing, key=lambda c: c.score)
    near = [c for c in scored if _box_contains(_grow_box(c.box), click)]
    if not near:
        raise NoCandidate(f"no candidate with score >= {score_thresh} near "
                          f"({click.x:.1f}, {click.y:.1f})")
    return min(near, key=lambda c: _center_dist(c.box, click))


def _box_contains(box, p: Point2) -> bool:
    x0, y0, x1, y1 = box
    return x0 <= p.x <= x1 and y0 <= p.y <= y1


def _grow_box(box):
    x0, y0, x1, y1 = box
    g = max(x1 - x0, y1 - y0)
    return (x0 - g, y0 - g, x1 + g, y1 + g)


def _center_dist(box, p: Point2) -> float:
    return math.hypot((box[0] + box[2]) / 2 - p.x, (box[1] + box[3]) / 2 - p.y)


def measurement_from_endpoints(pts: np.ndarray, spacing: float,
                               frame: Frame) -> RecistMeasurement:
    """Build a measurement from raw endpoints, swapping axes if needed."""
    pts = np.asarray(pts, dtype=np.float64)
    if np.linalg.norm(pts[0] - pts[1]) < np.linalg.norm(pts[2] - pts[3]):
        pts = pts[[2, 3, 0, 1]]
    return RecistMeasurement(
        long_a=Point2(*pts[0]), long_b=Point2(*pts[1]),
        short_a=Point2(*pts[2]), short_b=Point2(*pts[3]),
        spacing_mm_per_px=spacing, frame=frame,
    )


def measurement_from_box(box, spacing: float, frame: Frame) -> RecistMeasurement:
    """Degenerate-prediction fallback: axes from the box geometry alone."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    pts = np.array([[x0, cy], [x1, cy], [cx, y0], [cx, y1]])
    return measurement_from_endpoints(pts, spacing, frame)


def _initial_from_candidate(cand: Candidate, shape, spacing: float):
    """Stage-1 mask (slice frame) and measurement decoded from a candidate."""
    prob = 1.0 / (1.0 + np.exp(-cand.mask_logits))
    mask = paste_roi(prob, cand.box, shape) > 0.5
    try:
        pts_grid = decode_points(cand.recist_heatmaps)
        pts = grid_points_to_slice(pts_grid, cand.box, cand.recist_heatmaps.shape[-1])
        recist = measurement_from_endpoints(pts, spacing, Frame.SLICE)
    except DegenerateMap:  # flat channel: fall back to box geometry
        recist = measurement_from_box(cand.box, spacing, Frame.SLICE)
    return mask, recist


def plan_candidate_loi(cand: Candidate, initial_mask: np.ndarray,
                       initial_recist: RecistMeasurement,
                       use_adjusted_loi: bool) -> LoiTransform:
    centroid = (mask_centroid(initial_mask) if initial_mask.any()
                else Point2((cand.box[0] + cand.box[2]) / 2,
                            (cand.box[1] + cand.box[3]) / 2))
    t = plan_loi(initial_recist, cand.box, centroid)
    if not use_adjusted_loi:  # raw crop variant: no rotation
        t = LoiTransform(rotation_rad=0.0, crop_center=t.crop_center,
                         crop_width_px=t.crop_width_px, output_size=t.output_size)
    return t


def _loi_input(slice_img, t: LoiTransform, click: Point2, cfg: TrainConfig):
    loi_img = apply_loi(t, image=slice_img)
    c = apply_loi(t, points=np.array([[click.x, click.y]]))[0]
    cx = float(np.clip(c[0], 0, LOI_SIZE - 1))
    cy = float(np.clip(c[1], 0, LOI_SIZE - 1))
    g = make_click_guidance((LOI_SIZE, LOI_SIZE), Point2(cx, cy), sigma_c=cfg.click_sigma)
    return np.stack([loi_img, g.click_image, g.distance_image], axis=-1), np.array([cx, cy])


def build_loi_samples(dataset: Dataset, detector: Detector, cfg: TrainConfig,
                      pseudo_labels=None,
                      max_per_sample: int | None = None) -> list[LoiSample]:
    """Run stage 1 over a dataset and assemble refiner training samples.

    ``max_per_sample`` caps the lesions used per slice (desk-scale epochs
    stay affordable while every slice still contributes).
    """
    from .weak_labels import refine_labels

    if pseudo_labels is None:
        pseudo_labels = build_pseudo_labels(dataset)
    out: list[LoiSample] = []
    skipped = 0
    for i, s in enumerate(dataset.samples):
        pairs = list(zip(s.records, pseudo_labels[i]))[:max_per_sample]
        for k, (r, pmask) in enumerate(pairs):
            rng = np.random.default_rng((cfg.seed, 2, i, k))
            label = LesionLabel(classes=pmask.astype(np.uint8), source="pseudo_grabcut")
            click = sample_click(label, rng_seed=int(rng.integers(2**31)))
            g = make_click_guidance(s.image.shape, click, sigma_c=cfg.click_sigma)
            inp = np.stack([s.image, g.click_image, g.distance_image], axis=-1)
            det = detector_forward(detector, inp, score_thresh=cfg.score_thresh)
            try:
                cand = select_candidate(det.candidates, click, cfg.score_thresh)
            except NoCandidate:
                skipped += 1
                continue
            initial_mask, initial_recist = _initial_from_candidate(
                cand, s.image.shape, s.spacing_mm_per_px)
            t = plan_candidate_loi(cand, initial_mask, initial_recist,
                                   cfg.use_adjusted_loi)
            loi3, click_xy = _loi_input(s.image, t, click, cfg)
            pseudo_label = LesionLabel(classes=pmask.astype(np.uint8),
                                       source="pseudo_grabcut")
            refined = refine_labels(initial_mask, pseudo_label)
            classes_loi = apply_loi(t, image=refined.classes.astype(np.float64),
                                    order=0).astype(np.uint8)
            endpoints = apply_loi(t, points=np.array(r.coords).reshape(4, 2))
            out.append(LoiSample(
                loi_image=loi3[..., 0],
                click_xy=click_xy,
                label=LesionLabel(classes=classes_loi, source="refined"),
                endpoints=endpoints,
            ))
    if skipped:
        log.info("LOI construction skipped %d/%d lesions with no stage-1 candidate",
                 skipped, skipped + len(out))
    return out


# ---------------------------------------------------------------------------
# Stage 2 training


def train_stage2(dataset: Dataset, stage1_ckpt, cfg: TrainConfig, out_dir,
                 pseudo_labels=None, loi_samples=None,
                 max_steps: int | None = None,
                 loi_per_sample: int | None = None) -> Path:
    """Train the refiner on LOIs built from stage-1 predictions."""
    if len(dataset) == 0:
        raise EmptyDataset("stage-2 training set is empty")
    if loi_samples is None:
        if stage1_ckpt is None or not Path(stage1_ckpt).exists():
            raise MissingStage1(f"stage-1 checkpoint not found: {stage1_ckpt}")
        detector, _ = load_checkpoint(stage1_ckpt)
        loi_samples = build_loi_samples(dataset, detector, cfg, pseudo_labels,
                                        max_per_sample=loi_per_sample)
    if not loi_samples:
        raise EmptyDataset("no usable LOI samples from stage 1")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed + 1)
    model = Refiner(cfg.net_config())
    model.train()
    opt = _sgd_with_head_boost(model, torch.nn.ModuleList([model.recist_ctx, model.recist_out]),
                               cfg.stage2_lr, cfg.momentum, cfg.recist_lr_mult_stage2)
    total_epochs = cfg.scaled_epochs(2)
    sigma = cfg.net_config().heatmap_sigma_refiner

    rows = []
    step = 0
    first_step_loss = None
    for epoch in range(total_epochs):
        lr = lr_stage2(epoch, cfg.stage2_lr, total_epochs)
        _set_lr(opt, lr)
        order = np.random.default_rng((cfg.seed, 3, epoch)).permutation(len(loi_samples))
        sums: dict[str, float] = {}
        n_steps = 0
        for b0 in range(0, len(order), cfg.stage2_batch):
            idxs = order[b0: b0 + cfg.stage2_batch]
            batch = [_augment_loi(loi_samples[int(j)], cfg, epoch, int(j)) for j in idxs]
            x = torch.from_numpy(np.stack([b[0] for b in batch])).permute(0, 3, 1, 2).contiguous()
            labels = [b[1] for b in batch]
            targets = torch.from_numpy(np.stack(
                [gaussian_maps(b[2], (LOI_SIZE, LOI_SIZE), sigma) for b in batch]))
            prob, maps = model(x)
            loss, parts = loss_stage2(prob, maps, labels, targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if first_step_loss is None:
                first_step_loss = float(loss.detach())
            parts["total"] = float(loss.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        row = {"epoch": epoch, "lr": lr,
               **{f"loss_{k}": v / max(n_steps, 1) for k, v in sums.items()}}
        if epoch == 0:
            row["first_step_loss"] = first_step_loss
        rows.append(row)
        log.info("stage2 epoch %d/%d lr=%.2e loss=%.4f", epoch + 1, total_epochs,
                 lr, row.get("loss_total", float("nan")))
        if max_steps is not None and step >= max_steps:
            break
    write_metrics_csv(out / "metrics_stage2.csv", rows)
    ckpt = out / "stage2.ckpt"
    save_checkpoint(ckpt, stage=2, model=model, config=cfg.net_config(),
                    epoch=total_epochs,
                    schedule={"lr": lr, "total_epochs": total_epochs},
                    extra={"train_config": asdict(cfg)})
    return ckpt


def _augment_loi(sample: LoiSample, cfg: TrainConfig, epoch: int, idx: int):
    rng = np.random.default_rng((cfg.seed, 3, epoch, idx))
    rot, offset = random_similarity(rng, sample.loi_image.shape, cfg)
    img = warp_image(sample.loi_image, rot, offset, order=1)
    classes = warp_image(sample.label.classes.astype(np.float64), rot, offset,
                         order=0).astype(np.uint8)
    endpoints = warp_points(sample.endpoints, rot, offset)
    click = warp_points(sample.click_xy, rot, offset)[0]
    cx = float(np.clip(click[0], 0, LOI_SIZE - 1))
    cy = float(np.clip(click[1], 0, LOI_SIZE - 1))
    g = make_click_guidance((LOI_SIZE, LOI_SIZE), Point2(cx, cy), sigma_c=cfg.click_sigma)
    x = np.stack([img, g.click_image, g.distance_image], axis=-1)
    label = LesionLabel(classes=classes, source="refined")
    return x, label, endpoints


# ---------------------------------------------------------------------------
# Inference


@dataclass
class MeasureResult:
    mask: np.ndarray
    recist: RecistMeasurement
    initial_mask: np.ndarray
    initial_recist: RecistMeasurement
    candidate_score: float
    candidate_box: tuple[float, float, float, float]
    loi_transform: LoiTransform
    timing_ms: float = 0.0


def measure(slice_img: np.ndarray, spacing: float, click: Point2,
            detector: Detector, refiner: Refiner,
            cfg: TrainConfig = TrainConfig()) -> MeasureResult:
    """One click in, final segmentation + measurement (slice frame, mm) out."""
    t0 = time.perf_counter()
    img = np.asarray(slice_img, dtype=np.float32)
    g = make_click_guidance(img.shape, click, sigma_c=cfg.click_sigma)
    inp = np.stack([img, g.click_image, g.distance_image], axis=-1)
    det = detector_forward(detector, inp, score_thresh=cfg.score_thresh)
    cand = select_candidate(det.candidates, click, cfg.score_thresh)
    initial_mask, initial_recist = _initial_from_candidate(cand, img.shape, spacing)
    t = plan_candidate_loi(cand, initial_mask, initial_recist, cfg.use_adjusted_loi)
    loi3, _ = _loi_input(img, t, click, cfg)
    ref = refiner_forward(refiner, loi3)
    prob_slice = invert_loi(t, image=ref.mask_prob, output_shape=img.shape)
    final_mask = prob_slice > 0.5
    try:
        pts_loi = decode_points(ref.recist_heatmaps)
        pts = invert_loi(t, points=pts_loi)
        final_recist = measurement_from_endpoints(pts, spacing, Frame.SLICE)
    except DegenerateMap:  # flat refiner channel: keep the stage-1 estimate
        log.warning("refiner produced a flat heatmap channel; keeping the "
                    "stage-1 measurement")
        final_recist = initial_recist
    ms = (time.perf_counter() - t0) * 1000.0
    return MeasureResult(
        mask=final_mask, recist=final_recist,
        initial_mask=initial_mask, initial_recist=initial_recist,
        candidate_score=cand.score, candidate_box=cand.box,
        loi_transform=t, timing_ms=ms,
    )


def detect_all(slice_img: np.ndarray, detector: Detector,
               max_candidates: int = 64) -> list[tuple[float, tuple]]:
    """Click-free detection over zeroed guidance channels, sorted by score."""
    img = np.asarray(slice_img, dtype=np.float32)
    zero = np.zeros_like(img)
    inp = np.stack([img, zero, zero], axis=-1)
    det = detector_forward(detector, inp, max_candidates=max_candidates,
                           score_thresh=0.0)
    return [(c.score, c.box) for c in det.candidates]
