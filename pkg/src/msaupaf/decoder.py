"""Greedy decoding of predicted fields into entities and question -> answer links."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from .funsd_io import LABELS, Entity, FormDocument
from .targets import ANSWER, QUESTION, GridGeometry, TargetFields

HIRES = 4  # high-resolution bins per field cell for vote accumulation
LOGIT = 12.0  # magnitude used when turning targets into field logits


def sigmoid(x):
    return special.expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20, y, np.log(np.expm1(np.maximum(y, 1e-6))))


@dataclass(frozen=True)
class DecodeConfig:
    keypoint_threshold: float = 0.3
    link_threshold: float = 0.3
    vote_threshold: float = 0.1
    min_area: int = 3
    assign_radius: float = 0.0  # page pixels; 0 -> 2x median text height
    target_median_height: float = 3


@dataclass(frozen=True)
class Keypoint:
    cls: int  # keypoint class (entity label index, 0-based)
    x: float  # field-cell units
    y: float
    score: float
    sigma: float


@dataclass(frozen=True)
class DecodedEntity:
    id: int
    label: str
    box: tuple[int, int, int, int]
    score: float


@dataclass
class DecodedForm:
    entities: list[DecodedEntity] = field(default_factory=list)
    links: list[tuple[int, int, float]] = field(default_factory=list)
    diagnostics: dict[str, int] = field(default_factory=dict)

    def to_form_document(self, page_width: int, page_height: int) -> FormDocument:
        per = {e.id: [] for e in self.entities}
        pairs = [(q, a) for q, a, _ in self.links]
        for q, a in pairs:
            per[q].append((q, a))
            per[a].append((q, a))
        ents = tuple(Entity(e.id, e.label, e.box, links=tuple(per[e.id])) for e in self.entities)
        return FormDocument(page_width, page_height, ents, tuple(pairs))

    def to_dict(self, page_width: int, page_height: int) -> dict:
        per = {e.id: [] for e in self.entities}
        for q, a, _ in self.links:
            per[q].append([q, a])
            per[a].append([q, a])
        return {
            "page_width": page_width,
            "page_height": page_height,
            "form": [
                {
                    "id": e.id,
                    "label": e.label,
                    "box": list(e.box),
                    "text": "",
                    "words": [],
                    "linking": per[e.id],
                    "score": round(e.score, 6),
                }
                for e in self.entities
            ],
            "link_scores": [[q, a, round(s, 6)] for q, a, s in self.links],
        }

    def to_json(self, page_width: int, page_height: int) -> bytes:
        return json.dumps(self.to_dict(page_width, page_height), indent=1).encode("utf-8")


# ---------------------------------------------------------------------------
# keypoints


def _splat(votes: np.ndarray, hf: int, wf: int) -> np.ndarray:
    """Accumulate (x, y, c) votes with a separable tent of half-width 0.5 cell."""
    hr, wr = hf * HIRES, wf * HIRES
    out = np.zeros((hr, wr))
    if not len(votes):
        return out
    radius = HIRES / 2
    span = int(np.ceil(radius))
    ux = votes[:, 0] * HIRES - 0.5
    uy = votes[:, 1] * HIRES - 0.5
    bx, by = np.round(ux).astype(int), np.round(uy).astype(int)
    for oy in range(-span, span + 1):
        for ox in range(-span, span + 1):
            px, py = bx + ox, by + oy
            wgt = np.clip(1 - np.abs(px - ux) / radius, 0, None) * np.clip(1 - np.abs(py - uy) / radius, 0, None)
            ok = (px >= 0) & (px < wr) & (py >= 0) & (py < hr) & (wgt > 0)
            np.add.at(out, (py[ok], px[ok]), votes[ok, 2] * wgt[ok])
    return out


def extract_keypoints(
    pif: np.ndarray, score_threshold: float = 0.3, nms: bool = True, vote_threshold: float = 0.1
) -> list[Keypoint]:
    """Keypoints from a raw ``K x 5 x Hf x Wf`` PIF field.

    Each cell whose squashed confidence reaches ``vote_threshold`` votes at
    its offset-refined position; votes are accumulated in a high-resolution
    map whose local maxima (clipped to 1) are candidate scores.  A candidate's
    position and scale are the confidence-weighted means of the votes within
    half a cell of its peak.  Greedy NMS suppresses same-class candidates
    within ``max(sigma, 1)`` cells of an accepted one.
    """
    if not 0 < score_threshold < 1:
        raise ValueError("score_threshold must be in (0, 1)")
    n_cls, _, hf, wf = pif.shape
    ii, jj = np.mgrid[0:hf, 0:wf]
    found: list[tuple[float, int, int, Keypoint]] = []
    for k in range(n_cls):
        c = sigmoid(pif[k, 0])
        sel = c >= vote_threshold
        if not sel.any():
            continue
        vx = jj[sel] + 0.5 + pif[k, 1][sel]
        vy = ii[sel] + 0.5 + pif[k, 2][sel]
        vs = softplus(pif[k, 4][sel])
        vc = c[sel]
        votes = np.stack([vx, vy, vc], axis=1)
        mass = _splat(votes, hf, wf)
        score_map = np.minimum(mass, 1.0)
        peaks = (mass == ndimage.maximum_filter(mass, size=3, mode="constant")) & (
            score_map >= score_threshold
        )
        for pi, pj in zip(*np.nonzero(peaks)):
            px, py = (pj + 0.5) / HIRES, (pi + 0.5) / HIRES
            near = np.hypot(vx - px, vy - py) <= 0.5
            if not near.any():
                continue
            w = vc[near]
            x = float(np.clip(np.sum(w * vx[near]) / w.sum(), 0, wf))
            y = float(np.clip(np.sum(w * vy[near]) / w.sum(), 0, hf))
            s = float(np.sum(w * vs[near]) / w.sum())
            found.append((float(score_map[pi, pj]), int(pi), int(pj), Keypoint(k, x, y, float(score_map[pi, pj]), s)))

    found.sort(key=lambda t: (-t[0], t[1], t[2], t[3].cls))
    accepted: list[Keypoint] = []
    for _, _, _, kp in found:
        if nms and any(
            a.cls == kp.cls and np.hypot(a.x - kp.x, a.y - kp.y) <= max(a.sigma, 1.0) for a in accepted
        ):
            continue
        accepted.append(kp)
    return accepted


# ---------------------------------------------------------------------------
# association


def associate(
    paf: np.ndarray, keypoints: Sequence[Keypoint], score_threshold: float = 0.3
) -> list[tuple[Keypoint, Keypoint, float]]:
    """Greedy question -> answer pairing from a raw ``1 x 7 x Hf x Wf`` PAF.

    Every answer keypoint is used at most once; questions may repeat.
    """
    qs = [kp for kp in keypoints if kp.cls == QUESTION - 1]
    ans = [kp for kp in keypoints if kp.cls == ANSWER - 1]
    if not qs or not ans:
        return []
    q_xy = np.array([(k.x, k.y) for k in qs])
    a_xy = np.array([(k.x, k.y) for k in ans])
    q_rad = np.array([max(k.sigma, 2.0) for k in qs])
    a_rad = np.array([max(k.sigma, 2.0) for k in ans])

    c = sigmoid(paf[0, 0])
    ii, jj = np.nonzero(c > score_threshold)
    best: dict[tuple[int, int], float] = {}
    for i, j in zip(ii, jj):
        e1 = np.array([j + 0.5 + paf[0, 1, i, j], i + 0.5 + paf[0, 2, i, j]])
        e2 = np.array([j + 0.5 + paf[0, 4, i, j], i + 0.5 + paf[0, 5, i, j]])
        dq = np.hypot(*(q_xy - e1).T)
        da = np.hypot(*(a_xy - e2).T)
        qi, ai = int(np.argmin(dq)), int(np.argmin(da))
        if dq[qi] > q_rad[qi] or da[ai] > a_rad[ai]:
            continue
        s = float(c[i, j]) * qs[qi].score * ans[ai].score
        if s > best.get((qi, ai), -1.0):
            best[(qi, ai)] = s

    used: set[int] = set()
    out = []
    for (qi, ai), s in sorted(best.items(), key=lambda kv: (-kv[1], kv[0])):
        if ai in used:
            continue
        used.add(ai)
        out.append((qs[qi], ans[ai], s))
    return out


# ---------------------------------------------------------------------------
# entities


def entities_from_segmentation(
    seg_full: np.ndarray, geom: GridGeometry, min_area: int = 3
) -> list[tuple[str, tuple[int, int, int, int], float]]:
    """4-connected components of the argmax class map as labeled page boxes."""
    prob = np.exp(seg_full - seg_full.max(axis=0, keepdims=True))
    prob /= prob.sum(axis=0, keepdims=True)
    cls_map = np.argmax(seg_full, axis=0)
    structure = ndimage.generate_binary_structure(2, 1)
    out = []
    for ci, label in enumerate(LABELS, start=1):
        comp, n = ndimage.label(cls_map == ci, structure=structure)
        if not n:
            continue
        slices = ndimage.find_objects(comp)
        for lab, sl in enumerate(slices, start=1):
            member = comp[sl] == lab
            if member.sum() < min_area:
                continue
            r0, r1 = sl[0].start, sl[0].stop
            c0, c1 = sl[1].start, sl[1].stop
            box = tuple(int(round(v * geom.scale)) for v in (c0, r0, c1, r1))
            score = float(prob[ci][sl][member].mean())
            out.append((label, box, score))
    # row-major reading order
    out.sort(key=lambda t: (t[1][1], t[1][0], LABELS.index(t[0])))
    return out


def assemble(
    boxes: Sequence[tuple[str, tuple[int, int, int, int], float]],
    keypoint_links: Sequence[tuple[Keypoint, Keypoint, float]],
    geom: GridGeometry,
    assign_radius: float | None = None,
    target_median_height: float = 3,
) -> DecodedForm:
    """Attach link endpoints to the class-matching box with the nearest
    bottom-left corner (page pixels) within ``assign_radius``."""
    if assign_radius is None or assign_radius <= 0:
        assign_radius = 2 * target_median_height * geom.scale
    entities = [DecodedEntity(i, label, box, score) for i, (label, box, score) in enumerate(boxes)]
    corners = {
        label: [(e.id, e.box[0], e.box[3]) for e in entities if e.label == label] for label in LABELS
    }

    def assign(kp: Keypoint) -> int | None:
        label = LABELS[kp.cls]
        x, y = kp.x * geom.field_scale, kp.y * geom.field_scale
        best, best_d = None, assign_radius
        for eid, bx, by in corners[label]:
            d = float(np.hypot(bx - x, by - y))
            if d <= best_d and (best is None or d < best_d or eid < best):
                best, best_d = eid, d
        return best

    pairs: dict[tuple[int, int], float] = {}
    dropped = 0
    for q, a, s in keypoint_links:
        qe, ae = assign(q), assign(a)
        if qe is None or ae is None:
            dropped += 1
            continue
        if s > pairs.get((qe, ae), -1.0):
            pairs[(qe, ae)] = s
    links, used = [], set()
    for (qe, ae), s in sorted(pairs.items(), key=lambda kv: (-kv[1], kv[0])):
        if ae in used:
            dropped += 1
            continue
        used.add(ae)
        links.append((qe, ae, s))
    links.sort(key=lambda t: (t[0], t[1]))
    return DecodedForm(entities, links, {"dropped_links": dropped})


def decode(fields, geom: GridGeometry, cfg: DecodeConfig = DecodeConfig()) -> DecodedForm:
    """Full decode of one sample's fields (numpy arrays or tensors)."""
    seg_full, pif, paf = (np.asarray(_np(t), dtype=np.float64) for t in (fields.seg_full, fields.pif, fields.paf))
    boxes = entities_from_segmentation(seg_full, geom, cfg.min_area)
    kps = extract_keypoints(pif, cfg.keypoint_threshold, vote_threshold=cfg.vote_threshold)
    links = associate(paf, kps, cfg.link_threshold)
    out = assemble(boxes, links, geom, cfg.assign_radius, cfg.target_median_height)
    out.diagnostics["keypoints"] = len(kps)
    out.diagnostics["keypoint_links"] = len(links)
    return out


def _np(t):
    return t.detach().cpu().numpy() if hasattr(t, "detach") else t


@dataclass
class ArrayFields:
    seg_key: np.ndarray
    seg_full: np.ndarray
    pif: np.ndarray
    paf: np.ndarray


def fields_from_targets(t: TargetFields, n_classes: int = 5) -> ArrayFields:
    """Raw-logit fields that decode to exactly the encoded targets."""
    h, w = t.seg_mask.shape
    seg = np.full((n_classes, h, w), -LOGIT)
    seg[t.seg_mask, np.arange(h)[:, None], np.arange(w)[None, :]] = LOGIT
    key = np.full((2, h, w), -LOGIT)
    key[t.key_mask, np.arange(h)[:, None], np.arange(w)[None, :]] = LOGIT

    k, hf, wf = t.pif.conf.shape
    pif = np.zeros((k, 5, hf, wf))
    pif[:, 0] = np.where(t.pif.mask, LOGIT, -LOGIT)
    pif[:, 1:3] = t.pif.vec
    pif[:, 3] = softplus_inv(1.0)
    pif[:, 4] = softplus_inv(np.maximum(t.pif.sigma, 1e-3))

    n_links = t.paf.conf.shape[0]
    paf = np.zeros((n_links, 7, hf, wf))
    paf[:, 0] = np.where(t.paf.mask, LOGIT, -LOGIT)
    paf[:, 1:3] = t.paf.vec1
    paf[:, 4:6] = t.paf.vec2
    paf[:, 3] = paf[:, 6] = softplus_inv(1.0)
    return ArrayFields(key, seg, pif, paf)
