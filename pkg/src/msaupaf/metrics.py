"""Box-level labeling F1 at an IoU threshold and pair-level linking F1."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .funsd_io import LABELS, FormDocument


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1(self.precision, self.recall)

    def __iadd__(self, other: "PRF") -> "PRF":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


@dataclass
class LabelingResult:
    overall: PRF
    per_class: dict[str, PRF]
    matches: list[tuple[int, int, float]]  # (pred id, gt id, iou)

    @property
    def entity_map(self) -> dict[int, int]:
        return {p: g for p, g, _ in self.matches}


def match_and_score_labeling(
    pred: FormDocument, gt: FormDocument, threshold: float = 0.8, class_agnostic_matching: bool = False
) -> LabelingResult:
    """Greedy one-to-one matching in descending IoU order.

    By default only same-class pairs may match.  With
    ``class_agnostic_matching`` boxes match on IoU alone and a match counts
    as correct only when the labels agree.
    """
    cands = []
    for p in pred.entities:
        for g in gt.entities:
            if not class_agnostic_matching and p.label != g.label:
                continue
            v = iou(p.box, g.box)
            if v >= threshold and v > 0:
                cands.append((v, p.id, g.id))
    # ties resolved by ids so the result is independent of input order
    cands.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches = []
    for v, pid, gid in cands:
        if pid in used_p or gid in used_g:
            continue
        used_p.add(pid)
        used_g.add(gid)
        matches.append((pid, gid, v))

    plabel = {e.id: e.label for e in pred.entities}
    glabel = {e.id: e.label for e in gt.entities}
    per_class = {k: PRF() for k in LABELS}
    correct = [(p, g, v) for p, g, v in matches if plabel[p] == glabel[g]]
    hit_p = {p for p, _, _ in correct}
    hit_g = {g for _, g, _ in correct}
    for g, lab in glabel.items():
        if g in hit_g:
            per_class[lab].tp += 1
        else:
            per_class[lab].fn += 1
    for p, lab in plabel.items():
        if p not in hit_p:
            per_class[lab].fp += 1
    overall = PRF()
    for v in per_class.values():
        overall += v
    return LabelingResult(overall, per_class, correct)


def score_linking(
    pred_links: Iterable[Sequence[int]],
    gt_links: Iterable[Sequence[int]],
    entity_map: dict[int, int],
) -> PRF:
    """Pair-level counts; predicted ids are mapped to ground-truth ids."""
    gt = {(int(q), int(a)) for q, a, *_ in gt_links}
    mapped = set()
    unmapped = 0
    for q, a, *_ in pred_links:
        if q in entity_map and a in entity_map:
            mapped.add((entity_map[q], entity_map[a]))
        else:
            unmapped += 1
    tp = len(mapped & gt)
    return PRF(tp=tp, fp=len(mapped - gt) + unmapped, fn=len(gt) - tp)


@dataclass
class EvalReport:
    labeling: PRF = field(default_factory=PRF)
    per_class: dict[str, PRF] = field(default_factory=lambda: {k: PRF() for k in LABELS})
    linking: PRF = field(default_factory=PRF)
    n_forms: int = 0
    matches: dict[str, list] = field(default_factory=dict)

    def add(self, name: str, lab: LabelingResult, link: PRF) -> None:
        self.labeling += lab.overall
        for k, v in lab.per_class.items():
            self.per_class[k] += v
        self.linking += link
        self.n_forms += 1
        self.matches[name] = lab.matches

    def kv_lines(self) -> list[str]:
        out = [f"forms={self.n_forms}"]
        for name, prf in [("labeling", self.labeling)] + [
            (f"labeling.{k}", v) for k, v in self.per_class.items()
        ] + [("linking", self.linking)]:
            out.append(
                f"{name}.precision={prf.precision:.6f} {name}.recall={prf.recall:.6f} "
                f"{name}.f1={prf.f1:.6f} {name}.tp={prf.tp} {name}.fp={prf.fp} {name}.fn={prf.fn}"
            )
        return out

    def table(self) -> str:
        rows = [("labeling", self.labeling)] + [(f"  {k}", v) for k, v in self.per_class.items()]
        rows.append(("linking", self.linking))
        lines = [f"{'task':<12}{'P':>8}{'R':>8}{'F1':>8}{'TP':>7}{'FP':>7}{'FN':>7}"]
        for name, p in rows:
            lines.append(
                f"{name:<12}{p.precision:>8.4f}{p.recall:>8.4f}{p.f1:>8.4f}{p.tp:>7}{p.fp:>7}{p.fn:>7}"
            )
        return "\n".join(lines)


def evaluate_form(
    pred: FormDocument, gt: FormDocument, threshold: float = 0.8, class_agnostic_matching: bool = False
) -> tuple[LabelingResult, PRF]:
    lab = match_and_score_labeling(pred, gt, threshold, class_agnostic_matching)
    return lab, score_linking(pred.links, gt.links, lab.entity_map)


def evaluate(
    pairs: Iterable[tuple[str, FormDocument, FormDocument]],
    threshold: float = 0.8,
    class_agnostic_matching: bool = False,
) -> EvalReport:
    """Micro-averaged report over ``(name, pred, gt)`` triples."""
    report = EvalReport()
    for name, pred, gt in pairs:
        lab, link = evaluate_form(pred, gt, threshold, class_agnostic_matching)
        report.add(name, lab, link)
    return report
