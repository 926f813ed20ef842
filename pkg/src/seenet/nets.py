"""Networks for the two-stage pipeline.

Stage 1 ("detector"): a region-proposal detector over the 3-channel input
[slice, click image, distance image] with three per-candidate heads: box
score/regression, a 28x28 mask head, and a 28x28 four-channel keypoint
heatmap head (a duplicate of the mask head with 4 output channels).

Stage 2 ("refiner"): an encoder/decoder over the 256x256 LOI crop with a
dilated-convolution pyramid at the junction and skip connections, producing
a full-size mask probability map and four 256x256 keypoint heatmaps.

Both are width-scalable for desk-scale training via NetConfig.width_factor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms, roi_align

from .errors import AllUncertain, BadShape, MissingTargets
from .weak_labels import UNCERTAIN, LesionLabel

CKPT_FORMAT = "seenet-ckpt-v1"


@dataclass(frozen=True)
class NetConfig:
    width_factor: float = 1.0
    backbone_channels: tuple[int, ...] = (64, 128, 256, 512, 1024)
    aspp_channels: int = 256
    aspp_dilations: tuple[int, ...] = (1, 4, 8, 12)
    decoder_channels: tuple[int, ...] = (512, 256, 128, 64)
    first_conv_stride: int = 1
    heatmap_sigma_detector: float = 1.0
    heatmap_sigma_refiner: float = 3.0
    # detection plumbing
    feature_stride: int = 8
    anchor_scale: float = 24.0
    anchor_aspects: tuple[float, ...] = (0.5, 1.0, 2.0)
    proposal_count: int = 64
    proposal_nms_iou: float = 0.7
    # inference NMS is tighter than usual: duplicate boxes of one lesion
    # otherwise compete under the click-selection rule
    detection_nms_iou: float = 0.3
    roi_size: int = 14
    head_size: int = 28

    def __post_init__(self):
        if not (0 < self.width_factor <= 1):
            raise ValueError("width factor must be in (0, 1]")
        if list(self.aspp_dilations) != sorted(set(self.aspp_dilations)):
            raise ValueError("dilations must be strictly increasing")

    def ch(self, base: int) -> int:
        return max(4, int(round(base * self.width_factor)))


def _bn(c):
    return nn.BatchNorm2d(c)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = _bn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _bn(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _bn(cout))

    def forward(self, x):
        identity = x if self.short is None else self.short(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    # contiguous() matters: strided channels-last views from numpy trip a
    # heap-corruption bug in this torch build's CPU backward kernels
    return (x / 127.5 - 1.0).contiguous()


# ---------------------------------------------------------------------------
# Box utilities (all coordinates use pixel-center convention)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    rw = (ref[:, 2] - ref[:, 0]).clamp(min=1e-3)
    rh = (ref[:, 3] - ref[:, 1]).clamp(min=1e-3)
    rcx = (ref[:, 0] + ref[:, 2]) / 2
    rcy = (ref[:, 1] + ref[:, 3]) / 2
    gw = (gt[:, 2] - gt[:, 0]).clamp(min=1e-3)
    gh = (gt[:, 3] - gt[:, 1]).clamp(min=1e-3)
    gcx = (gt[:, 0] + gt[:, 2]) / 2
    gcy = (gt[:, 1] + gt[:, 3]) / 2
    return torch.stack([
        (gcx - rcx) / rw, (gcy - rcy) / rh, torch.log(gw / rw), torch.log(gh / rh),
    ], dim=1)


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    rw = (ref[:, 2] - ref[:, 0]).clamp(min=1e-3)
    rh = (ref[:, 3] - ref[:, 1]).clamp(min=1e-3)
    rcx = (ref[:, 0] + ref[:, 2]) / 2
    rcy = (ref[:, 1] + ref[:, 3]) / 2
    dw = deltas[:, 2].clamp(max=math.log(4.0))
    dh = deltas[:, 3].clamp(max=math.log(4.0))
    cx = rcx + deltas[:, 0] * rw
    cy = rcy + deltas[:, 1] * rh
    w = rw * torch.exp(dw)
    h = rh * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    h, w = hw
    return torch.stack([
        boxes[:, 0].clamp(-0.5, w - 0.5), boxes[:, 1].clamp(-0.5, h - 0.5),
        boxes[:, 2].clamp(-0.5, w - 0.5), boxes[:, 3].clamp(-0.5, h - 0.5),
    ], dim=1)


def make_anchors(fh: int, fw: int, cfg: NetConfig, device) -> torch.Tensor:
    """Single-scale anchors at each feature cell, one per aspect ratio."""
    stride = cfg.feature_stride
    cx = (torch.arange(fw, device=device, dtype=torch.float32) + 0.5) * stride - 0.5
    cy = (torch.arange(fh, device=device, dtype=torch.float32) + 0.5) * stride - 0.5
    sides = []
    for ar in cfg.anchor_aspects:  # ar = h/w
        w = cfg.anchor_scale / math.sqrt(ar)
        h = cfg.anchor_scale * math.sqrt(ar)
        sides.append((w, h))
    grid_y, grid_x = torch.meshgrid(cy, cx, indexing="ij")
    out = []
    for w, h in sides:
        out.append(torch.stack([
            grid_x - w / 2, grid_y - h / 2, grid_x + w / 2, grid_y + h / 2,
        ], dim=-1))
    # (fh, fw, A, 4) -> (fh*fw*A, 4), anchor index fastest over aspects
    return torch.stack(out, dim=2).reshape(-1, 4)


def to_corner(boxes: torch.Tensor) -> torch.Tensor:
    """Pixel-center boxes -> torchvision corner-origin boxes."""
    return boxes + 0.5


# ---------------------------------------------------------------------------
# Detector


@dataclass
class Candidate:
    score: float
    box: tuple[float, float, float, float]
    mask_logits: np.ndarray  # (28, 28)
    recist_heatmaps: np.ndarray  # (4, 28, 28)


@dataclass
class DetectorOutput:
    candidates: list[Candidate]
    image_shape: tuple[int, int]

    def __post_init__(self):
        self.candidates.sort(key=lambda c: -c.score)


class Detector(nn.Module):
    """Proposal-based detector with box, mask, and keypoint-heatmap heads."""

    ROI_STRIDE = 4  # ROI heads read finer features than the proposal head

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        c0, c1, c2 = (config.ch(c) for c in config.backbone_channels[:3])
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, 2, 1, bias=False), _bn(c0), nn.ReLU(inplace=True))
        self.layer1 = ResBlock(c0, c1, stride=2)
        self.layer2 = ResBlock(c1, c2, stride=2)
        self.layer3 = ResBlock(c2, c2, stride=1)
        self.feat_channels = c2
        # stride-4 tap for the per-candidate heads (28x28 endpoint maps need
        # finer spatial support than the stride-8 proposal features)
        self.head_tap = nn.Sequential(nn.Conv2d(c1, c2, 3, 1, 1), nn.ReLU(inplace=True))

        a = len(config.anchor_aspects)
        self.rpn_conv = nn.Conv2d(c2, c2, 3, 1, 1)
        self.rpn_obj = nn.Conv2d(c2, a, 1)
        self.rpn_delta = nn.Conv2d(c2, 4 * a, 1)

        fc_dim = config.ch(256)
        self.box_conv = nn.Sequential(nn.Conv2d(c2, c2, 3, 1, 1), nn.ReLU(inplace=True))
        self.box_fc = nn.Sequential(
            nn.Linear(c2 * config.roi_size**2, fc_dim), nn.ReLU(inplace=True))
        self.cls_out = nn.Linear(fc_dim, 2)
        self.box_out = nn.Linear(fc_dim, 4)

        hm = config.ch(256)
        self.mask_head = self._make_pixel_head(hm, 1)
        self.recist_head = self._make_pixel_head(hm, 4)

    def _make_pixel_head(self, hm: int, out_ch: int) -> nn.Sequential:
        c2 = self.feat_channels
        return nn.Sequential(
            nn.Conv2d(c2, hm, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(hm, hm, 3, 1, 1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(hm, hm, 2, 2), nn.ReLU(inplace=True),
            nn.Conv2d(hm, out_ch, 1),
        )

    # -- stages

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (stride-4 head features, stride-8 proposal features)."""
        s4 = self.layer1(self.stem(_normalize(x)))
        s8 = self.layer3(self.layer2(s4))
        return self.head_tap(s4), s8

    def rpn(self, feat: torch.Tensor):
        t = F.relu(self.rpn_conv(feat))
        return self.rpn_obj(t), self.rpn_delta(t)

    def propose(self, obj: torch.Tensor, deltas: torch.Tensor, image_hw,
                pre_nms: int = 256) -> list[torch.Tensor]:
        """Decode top anchors into per-image proposal boxes (detached)."""
        cfg = self.config
        b, a, fh, fw = obj.shape
        anchors = make_anchors(fh, fw, cfg, obj.device)
        # (B, A, fh, fw) -> (B, fh*fw*A) matching anchor layout
        obj_flat = obj.permute(0, 2, 3, 1).reshape(b, -1)
        deltas_flat = deltas.permute(0, 2, 3, 1).reshape(b, -1, 4)
        out = []
        for i in range(b):
            scores = obj_flat[i].detach()
            k = min(pre_nms, scores.numel())
            top = torch.topk(scores, k).indices
            boxes = decode_boxes(anchors[top], deltas_flat[i][top].detach())
            boxes = clip_boxes(boxes, image_hw)
            wh_ok = ((boxes[:, 2] - boxes[:, 0]) >= 2) & ((boxes[:, 3] - boxes[:, 1]) >= 2)
            boxes, s = boxes[wh_ok], scores[top][wh_ok]
            keep = nms(to_corner(boxes), s, cfg.proposal_nms_iou)[: cfg.proposal_count]
            out.append(boxes[keep])
        return out

    def _roi_feats(self, feat: torch.Tensor, rois: list[torch.Tensor]) -> torch.Tensor:
        return roi_align(
            feat, [to_corner(r) for r in rois], self.config.roi_size,
            spatial_scale=1.0 / self.ROI_STRIDE, sampling_ratio=2, aligned=True,
        )

    def head_box(self, feat, rois):
        r = self.box_conv(self._roi_feats(feat, rois))
        r = self.box_fc(r.flatten(1))
        return self.cls_out(r), self.box_out(r)

    def head_pixels(self, feat, rois):
        r = self._roi_feats(feat, rois)
        return self.mask_head(r), self.recist_head(r)


def pad_to_stride(image_hw3: np.ndarray, stride: int) -> np.ndarray:
    h, w = image_hw3.shape[:2]
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return image_hw3
    return np.pad(image_hw3, ((0, ph), (0, pw), (0, 0)))


def detector_forward(
    model: Detector,
    image_hw3: np.ndarray,
    max_candidates: int = 32,
    score_thresh: float = 0.0,
) -> DetectorOutput:
    """Run the detector over one 3-channel image, candidates sorted by score.

    Zeroed guidance channels run the same graph in click-free detection mode.
    """
    img = np.asarray(image_hw3, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise BadShape(f"expected HxWx3 input, got {img.shape}")
    h, w = img.shape[:2]
    padded = pad_to_stride(img, model.config.feature_stride * 2)
    x = torch.from_numpy(padded).permute(2, 0, 1)[None].contiguous()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feat4, feat8 = model.features(x)
            obj, deltas = model.rpn(feat8)
            proposals = model.propose(obj, deltas, (h, w))[0]
            if len(proposals) == 0:
                return DetectorOutput(candidates=[], image_shape=(h, w))
            cls_logits, box_deltas = model.head_box(feat4, [proposals])
            probs = F.softmax(cls_logits, dim=1)[:, 1]
            boxes = clip_boxes(decode_boxes(proposals, box_deltas), (h, w))
            ok = probs >= score_thresh
            boxes, probs = boxes[ok], probs[ok]
            if len(boxes) == 0:
                return DetectorOutput(candidates=[], image_shape=(h, w))
            keep = nms(to_corner(boxes), probs, model.config.detection_nms_iou)[:max_candidates]
            boxes, probs = boxes[keep], probs[keep]
            mask_logits, recist_maps = model.head_pixels(feat4, [boxes])
        cands = [
            Candidate(
                score=float(probs[i]),
                box=tuple(float(v) for v in boxes[i]),
                mask_logits=mask_logits[i, 0].numpy(),
                recist_heatmaps=recist_maps[i].numpy(),
            )
            for i in range(len(boxes))
        ]
    finally:
        model.train(was_training)
    return DetectorOutput(candidates=cands, image_shape=(h, w))


# ---------------------------------------------------------------------------
# Refiner


@dataclass
class RefinerOutput:
    mask_prob: np.ndarray  # (256, 256) in [0, 1]
    recist_heatmaps: np.ndarray  # (4, 256, 256)


class DilatedPyramid(nn.Module):
    """Parallel dilated 3x3 branches, concatenated."""

    def __init__(self, cin, branch_ch, dilations):
        super().__init__()
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(cin, branch_ch, 3, 1, padding=d, dilation=d, bias=False),
                _bn(branch_ch), nn.ReLU(inplace=True),
            )
            for d in dilations
        ])

    def forward(self, x):
        return torch.cat([b(x) for b in self.branches], dim=1)


class UpBlock(nn.Module):
    """Linear 2x upsample, skip concat, two residual blocks."""

    def __init__(self, cin, skip_ch, cout):
        super().__init__()
        self.block1 = ResBlock(cin + skip_ch, cout)
        self.block2 = ResBlock(cout, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        return self.block2(self.block1(x))


class Refiner(nn.Module):
    """Full-size refinement net: 5-stage residual encoder (first stride 1),
    dilated pyramid junction, 4 upsampling blocks with skips, 2-branch output."""

    INPUT_SIZE = 256

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        e = [config.ch(c) for c in config.backbone_channels[:5]]
        self.enc1 = nn.Sequential(
            nn.Conv2d(3, e[0], 3, config.first_conv_stride, 1, bias=False),
            _bn(e[0]), nn.ReLU(inplace=True), ResBlock(e[0], e[0]),
        )
        self.enc2 = ResBlock(e[0], e[1], stride=2)
        self.enc3 = ResBlock(e[1], e[2], stride=2)
        self.enc4 = ResBlock(e[2], e[3], stride=2)
        self.enc5 = ResBlock(e[3], e[4], stride=2)

        aspp_ch = config.ch(config.aspp_channels)
        self.junction = DilatedPyramid(e[4], aspp_ch, config.aspp_dilations)
        d = [config.ch(c) for c in config.decoder_channels]
        jout = aspp_ch * len(config.aspp_dilations)
        self.up1 = UpBlock(jout, e[3], d[0])
        self.up2 = UpBlock(d[0], e[2], d[1])
        self.up3 = UpBlock(d[1], e[1], d[2])
        self.up4 = UpBlock(d[2], e[0], d[3])
        self.mask_out = nn.Sequential(
            nn.Conv2d(d[3], d[3], 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(d[3], 1, 1))
        # keypoint branch: endpoint bumps are a global-geometry prediction, so
        # this branch mixes coarse decoder context back into the full-res map
        # (a 3x3-only head cannot see past a few pixels)
        self.recist_ctx = nn.Conv2d(d[1], d[3], 1)
        self.recist_out = nn.Sequential(
            nn.Conv2d(2 * d[3], d[3], 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(d[3], 4, 1))

    def forward(self, x: torch.Tensor):
        """x: (B, 3, 256, 256) raw-intensity input; returns (mask_prob, heatmaps)."""
        if x.shape[-2:] != (self.INPUT_SIZE, self.INPUT_SIZE) or x.shape[1] != 3:
            raise BadShape(f"refiner expects (B,3,256,256), got {tuple(x.shape)}")
        x = _normalize(x)
        s1 = self.enc1(x)
        s2 = self.enc2(s1)
        s3 = self.enc3(s2)
        s4 = self.enc4(s3)
        s5 = self.enc5(s4)
        z = self.junction(s5)
        z = self.up1(z, s4)
        z2 = self.up2(z, s3)
        z = self.up3(z2, s2)
        z = self.up4(z, s1)
        ctx = F.interpolate(self.recist_ctx(z2), scale_factor=4, mode="bilinear",
                            align_corners=False)
        heat = self.recist_out(torch.cat([z, ctx], dim=1))
        return torch.sigmoid(self.mask_out(z)), heat


def refiner_forward(model: Refiner, loi_hw3: np.ndarray) -> RefinerOutput:
    """Run the refiner over one 256x256x3 LOI input."""
    arr = np.asarray(loi_hw3, dtype=np.float32)
    if arr.shape != (Refiner.INPUT_SIZE, Refiner.INPUT_SIZE, 3):
        raise BadShape(f"expected (256,256,3), got {arr.shape}")
    x = torch.from_numpy(arr).permute(2, 0, 1)[None].contiguous()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            prob, maps = model(x)
    finally:
        model.train(was_training)
    return RefinerOutput(mask_prob=prob[0, 0].numpy(), recist_heatmaps=maps[0].numpy())


# ---------------------------------------------------------------------------
# Losses


@dataclass
class Stage1Outputs:
    """Per-sampled-ROI predictions and matched targets for the stage-1 loss."""

    cls_logits: torch.Tensor  # (R, 2)
    box_deltas: torch.Tensor  # (R, 4)
    mask_logits: torch.Tensor  # (P, 1, 28, 28)
    recist_maps: torch.Tensor  # (P, 4, 28, 28)
    cls_targets: torch.Tensor | None = None  # (R,) long
    box_targets: torch.Tensor | None = None  # (P, 4) for positive ROIs
    pos_index: torch.Tensor | None = None  # (P,) indices of positives in R
    mask_targets: torch.Tensor | None = None  # (P, 28, 28) in [0, 1]
    recist_targets: torch.Tensor | None = None  # (P, 4, 28, 28)


def loss_stage1(out: Stage1Outputs):
    """Multi-task stage-1 loss: cls + box + mask + recist (unweighted sum).

    cls: cross-entropy over all sampled ROIs; box: smooth-L1 on positives;
    mask: per-pixel binary cross-entropy on 28x28 crops; recist: MSE on the
    4x28x28 heatmaps.
    """
    if out.cls_targets is None or out.mask_targets is None or out.recist_targets is None:
        raise MissingTargets("stage-1 loss needs cls/mask/recist targets")
    zero = out.cls_logits.new_zeros(())
    cls = F.cross_entropy(out.cls_logits, out.cls_targets)
    if out.pos_index is not None and len(out.pos_index) > 0:
        if out.box_targets is None:
            raise MissingTargets("positive ROIs present but no box targets")
        box = F.smooth_l1_loss(out.box_deltas[out.pos_index], out.box_targets)
        mask = F.binary_cross_entropy_with_logits(out.mask_logits[:, 0], out.mask_targets)
        recist = F.mse_loss(out.recist_maps, out.recist_targets)
    else:
        box, mask, recist = zero, zero, zero
    total = cls + box + mask + recist
    parts = {"cls": float(cls.detach()), "box": float(box.detach()),
             "mask": float(mask.detach()), "recist": float(recist.detach())}
    return total, parts


def _stack_labels(labels) -> torch.Tensor:
    if isinstance(labels, LesionLabel):
        labels = [labels]
    return torch.from_numpy(np.stack([l.classes for l in labels]))


def loss_stage2(mask_prob: torch.Tensor, recist_maps: torch.Tensor,
                labels, target_heatmaps: torch.Tensor):
    """Stage-2 loss: mask MSE over certain pixels only, plus heatmap MSE.

    ``labels`` is one LesionLabel (or a list for a batch) whose uncertain
    pixels are excluded from the mask term entirely.
    """
    classes = _stack_labels(labels).to(mask_prob.device)
    if mask_prob.dim() == 4:
        mask_prob = mask_prob[:, 0]
    certain = classes != UNCERTAIN
    n_certain = int(certain.sum())
    if n_certain == 0:
        raise AllUncertain("no certain pixels contribute to the mask loss")
    target = (classes == 1).to(mask_prob.dtype)
    diff2 = (mask_prob - target) ** 2
    mask = (diff2 * certain).sum() / n_certain
    recist = F.mse_loss(recist_maps, target_heatmaps.to(recist_maps.dtype))
    total = mask + recist
    return total, {"mask": float(mask.detach()), "recist": float(recist.detach())}


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, *, stage: int, model: nn.Module, config: NetConfig,
                    epoch: int = 0, optimizer=None, schedule: dict | None = None,
                    extra: dict | None = None):
    payload = {
        "format": CKPT_FORMAT,
        "stage": stage,
        "config": asdict(config),
        "model": model.state_dict(),
        "epoch": epoch,
        "schedule": schedule or {},
        "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Load a checkpoint and rebuild the right network for its stage."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg_d = dict(payload["config"])
    for k, v in cfg_d.items():
        if isinstance(v, list):
            cfg_d[k] = tuple(v)
    config = NetConfig(**cfg_d)
    model = Detector(config) if payload["stage"] == 1 else Refiner(config)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload
