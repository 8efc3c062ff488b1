"""Ground-truth encoding (segmentation, PIF, PAF) and the three-term loss.

Keypoints are entity bottom-left corners, expressed in field-cell units
(field cell ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .chargrid import cell_span
from .funsd_io import LABELS, Entity, FormDocument
from .net import FieldMaps

logger = logging.getLogger(__name__)

# segmentation classes: 0 background, then entity labels in LABELS order
CLASS_INDEX = {label: i + 1 for i, label in enumerate(LABELS)}
QUESTION = CLASS_INDEX["question"]
ANSWER = CLASS_INDEX["answer"]
B_MIN = 1e-3


@dataclass(frozen=True)
class GridGeometry:
    """Char-grid size, page pixels per cell and cells per field cell."""

    height: int
    width: int
    scale: float
    field_stride: int = 4

    @property
    def field_height(self) -> int:
        return -(-self.height // self.field_stride)

    @property
    def field_width(self) -> int:
        return -(-self.width // self.field_stride)

    @property
    def field_scale(self) -> float:
        """Page pixels per field cell."""
        return self.scale * self.field_stride


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1e-2
    lambda3: float = 1e-2


@dataclass
class PifTarget:
    conf: np.ndarray  # K x Hf x Wf
    vec: np.ndarray  # K x 2 x Hf x Wf
    sigma: np.ndarray  # K x Hf x Wf
    mask: np.ndarray  # K x Hf x Wf bool


@dataclass
class PafTarget:
    conf: np.ndarray  # L x Hf x Wf
    vec1: np.ndarray  # L x 2 x Hf x Wf, offset to the question keypoint
    vec2: np.ndarray  # L x 2 x Hf x Wf, offset to the answer keypoint
    mask: np.ndarray  # L x Hf x Wf bool


@dataclass
class TargetFields:
    seg_mask: np.ndarray  # H x W int64
    key_mask: np.ndarray  # H x W int64 (1 on question cells)
    pif: PifTarget
    paf: PafTarget


def entity_keypoint(entity: Entity, geom: GridGeometry) -> tuple[float, float]:
    """Bottom-left corner in field units, clamped to the field extent."""
    x = entity.box[0] / geom.field_scale
    y = entity.box[3] / geom.field_scale
    cx = min(max(x, 0.0), float(geom.field_width))
    cy = min(max(y, 0.0), float(geom.field_height))
    if (cx, cy) != (x, y):
        logger.warning("entity %d keypoint (%.2f, %.2f) outside field; clamped", entity.id, x, y)
    return cx, cy


def encode_seg_mask(form: FormDocument, geom: GridGeometry) -> np.ndarray:
    """Per-cell class index; smaller entities are painted over larger ones."""
    mask = np.zeros((geom.height, geom.width), dtype=np.int64)
    area = lambda e: (e.box[2] - e.box[0]) * (e.box[3] - e.box[1])
    order = sorted(range(len(form.entities)), key=lambda i: -area(form.entities[i]))
    for i in order:
        e = form.entities[i]
        if e.box[2] <= e.box[0] or e.box[3] <= e.box[1]:
            continue
        r0, r1 = cell_span(e.box[1] / geom.scale, e.box[3] / geom.scale, geom.height)
        c0, c1 = cell_span(e.box[0] / geom.scale, e.box[2] / geom.scale, geom.width)
        mask[r0:r1, c0:c1] = CLASS_INDEX[e.label]
    return mask


def _disc_cells(x: float, y: float, r: float, hf: int, wf: int):
    """Field cells whose centers lie within ``r`` of (x, y), with offsets."""
    i0, i1 = max(int(math.floor(y - r - 0.5)), 0), min(int(math.ceil(y + r - 0.5)) + 1, hf)
    j0, j1 = max(int(math.floor(x - r - 0.5)), 0), min(int(math.ceil(x + r - 0.5)) + 1, wf)
    for i in range(i0, i1):
        for j in range(j0, j1):
            dx, dy = x - (j + 0.5), y - (i + 0.5)
            d = math.hypot(dx, dy)
            if d <= r:
                yield i, j, dx, dy, d


def encode_pif_targets(
    form: FormDocument, geom: GridGeometry, radius: float = 1.0, n_classes: int = 4
) -> PifTarget:
    if radius < 1:
        raise ValueError("radius must be >= 1 field cell")
    hf, wf = geom.field_height, geom.field_width
    conf = np.zeros((n_classes, hf, wf), dtype=np.float32)
    vec = np.zeros((n_classes, 2, hf, wf), dtype=np.float32)
    sigma = np.zeros((n_classes, hf, wf), dtype=np.float32)
    best = np.full((n_classes, hf, wf), np.inf)
    for e in form.entities:
        k = CLASS_INDEX[e.label] - 1
        x, y = entity_keypoint(e, geom)
        s = (e.box[3] - e.box[1]) / geom.field_scale
        for i, j, dx, dy, d in _disc_cells(x, y, radius, hf, wf):
            if d < best[k, i, j]:
                best[k, i, j] = d
                conf[k, i, j] = 1.0
                vec[k, :, i, j] = (dx, dy)
                sigma[k, i, j] = s
    return PifTarget(conf, vec, sigma, conf > 0)


def encode_paf_targets(form: FormDocument, geom: GridGeometry, radius: float = 1.0) -> PafTarget:
    """Single link type (question -> answer); at contested cells the link with
    the nearer endpoint wins, then the nearer other endpoint."""
    if radius < 1:
        raise ValueError("radius must be >= 1 field cell")
    hf, wf = geom.field_height, geom.field_width
    conf = np.zeros((1, hf, wf), dtype=np.float32)
    vec1 = np.zeros((1, 2, hf, wf), dtype=np.float32)
    vec2 = np.zeros((1, 2, hf, wf), dtype=np.float32)
    best: dict[tuple[int, int], tuple[float, float]] = {}
    for q_id, a_id in form.links:
        qx, qy = entity_keypoint(form.entity(q_id), geom)
        ax, ay = entity_keypoint(form.entity(a_id), geom)
        cells = {}
        for px, py in ((qx, qy), (ax, ay)):
            for i, j, _, _, _ in _disc_cells(px, py, radius, hf, wf):
                cells[(i, j)] = None
        for i, j in cells:
            cx, cy = j + 0.5, i + 0.5
            dq, da = math.hypot(qx - cx, qy - cy), math.hypot(ax - cx, ay - cy)
            key = (min(dq, da), max(dq, da))
            if (i, j) in best and best[(i, j)] <= key:
                continue
            best[(i, j)] = key
            conf[0, i, j] = 1.0
            vec1[0, :, i, j] = (qx - cx, qy - cy)
            vec2[0, :, i, j] = (ax - cx, ay - cy)
    return PafTarget(conf, vec1, vec2, conf > 0)


def encode_targets(
    form: FormDocument, geom: GridGeometry, radius: float = 1.0, n_keypoint_classes: int = 4
) -> TargetFields:
    seg = encode_seg_mask(form, geom)
    return TargetFields(
        seg_mask=seg,
        key_mask=(seg == QUESTION).astype(np.int64),
        pif=encode_pif_targets(form, geom, radius, n_keypoint_classes),
        paf=encode_paf_targets(form, geom, radius),
    )


@dataclass
class TargetBatch:
    seg_mask: torch.Tensor  # N x H x W
    key_mask: torch.Tensor
    pif_conf: torch.Tensor  # N x K x Hf x Wf
    pif_vec: torch.Tensor  # N x K x 2 x Hf x Wf
    pif_sigma: torch.Tensor
    pif_mask: torch.Tensor
    paf_conf: torch.Tensor  # N x L x Hf x Wf
    paf_vec1: torch.Tensor
    paf_vec2: torch.Tensor
    paf_mask: torch.Tensor


def collate_targets(targets: list[TargetFields], dtype=torch.float32) -> TargetBatch:
    """Stack per-form targets; all must share the same grid size."""

    def st(get, tp=dtype):
        return torch.as_tensor(np.stack([get(t) for t in targets])).to(tp)

    return TargetBatch(
        seg_mask=st(lambda t: t.seg_mask, torch.int64),
        key_mask=st(lambda t: t.key_mask, torch.int64),
        pif_conf=st(lambda t: t.pif.conf),
        pif_vec=st(lambda t: t.pif.vec),
        pif_sigma=st(lambda t: t.pif.sigma),
        pif_mask=st(lambda t: t.pif.mask, torch.bool),
        paf_conf=st(lambda t: t.paf.conf),
        paf_vec1=st(lambda t: t.paf.vec1),
        paf_vec2=st(lambda t: t.paf.vec2),
        paf_mask=st(lambda t: t.paf.mask, torch.bool),
    )


class LossError(FloatingPointError):
    pass


def spread(raw: torch.Tensor) -> torch.Tensor:
    """Positive spread from a raw head output, clamped at ``B_MIN``."""
    return torch.clamp(F.softplus(raw), min=B_MIN)


def laplace(target: torch.Tensor, mu: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise Laplace negative log-likelihood ``|t - mu| / b + log(2b)``."""
    return (target - mu).abs() / b + torch.log(2 * b)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = mask.sum()
    if n == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / n


def pif_loss(pif: torch.Tensor, t: TargetBatch) -> torch.Tensor:
    conf = F.binary_cross_entropy_with_logits(pif[:, :, 0], t.pif_conf)
    m = t.pif_mask.to(pif.dtype)
    b = spread(pif[:, :, 3])
    lap = laplace(t.pif_vec[:, :, 0], pif[:, :, 1], b) + laplace(t.pif_vec[:, :, 1], pif[:, :, 2], b)
    lap = _masked_mean(lap, m) / 2  # mean over (cell, component)
    scale = _masked_mean((F.softplus(pif[:, :, 4]) - t.pif_sigma).abs(), m)
    return conf + lap + scale


def paf_loss(paf: torch.Tensor, t: TargetBatch) -> torch.Tensor:
    conf = F.binary_cross_entropy_with_logits(paf[:, :, 0], t.paf_conf)
    m = t.paf_mask.to(paf.dtype)
    b1, b2 = spread(paf[:, :, 3]), spread(paf[:, :, 6])
    lap = (
        laplace(t.paf_vec1[:, :, 0], paf[:, :, 1], b1)
        + laplace(t.paf_vec1[:, :, 1], paf[:, :, 2], b1)
        + laplace(t.paf_vec2[:, :, 0], paf[:, :, 4], b2)
        + laplace(t.paf_vec2[:, :, 1], paf[:, :, 5], b2)
    )
    return conf + _masked_mean(lap, m) / 4


def ce_loss(pred: FieldMaps, t: TargetBatch) -> torch.Tensor:
    return F.cross_entropy(pred.seg_full, t.seg_mask) + F.cross_entropy(pred.seg_key, t.key_mask)


def total_loss(
    pred: FieldMaps, target: TargetBatch, w: LossWeights = LossWeights()
) -> tuple[torch.Tensor, dict[str, float]]:
    """``lambda1 * CE + lambda2 * PIF + lambda3 * PAF`` and its breakdown."""
    if pred.seg_full.shape[-2:] != target.seg_mask.shape[-2:] or pred.pif.shape[-2:] != target.pif_conf.shape[-2:]:
        raise ValueError("prediction and target shapes disagree")
    terms = {"ce": ce_loss(pred, target), "pif": pif_loss(pred.pif, target), "paf": paf_loss(pred.paf, target)}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise LossError(f"non-finite {name} loss")
    total = w.lambda1 * terms["ce"] + w.lambda2 * terms["pif"] + w.lambda3 * terms["paf"]
    breakdown = {k: v.detach().item() for k, v in terms.items()}
    breakdown["total"] = total.detach().item()
    return total, breakdown
