"""FUNSD-format annotation parsing, writing and corpus statistics.

A FUNSD annotation is a JSON document with a top-level ``"form"`` array.
Each element carries ``id``, ``label``, ``box`` ``[x1, y1, x2, y2]``,
``text``, ``words`` (``{"text", "box"}`` objects) and ``linking`` (``[id, id]``
pairs).  Links appear once per participating entity and in either order, so
they are normalized here into unique directed question -> answer pairs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

LABELS = ("header", "question", "answer", "other")

Box = tuple[int, int, int, int]


class ParseError(ValueError):
    """Malformed annotation document."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    """Well-formed JSON that violates the document model."""

    def __init__(self, message: str, pairs: Sequence[tuple[int, int]] = ()):
        detail = f": {list(pairs)}" if pairs else ""
        super().__init__(message + detail)
        self.pairs = list(pairs)


@dataclass(frozen=True)
class WordBox:
    text: str
    box: Box


@dataclass(frozen=True)
class Entity:
    id: int
    label: str
    box: Box
    text: str = ""
    words: tuple[WordBox, ...] = ()
    links: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class LinkReport:
    """Links dropped while normalizing to question -> answer pairs."""

    rejected: tuple[tuple[int, int], ...] = ()
    duplicates: int = 0
    dropped_words: int = 0


@dataclass(frozen=True)
class FormDocument:
    page_width: int
    page_height: int
    entities: tuple[Entity, ...] = ()
    links: tuple[tuple[int, int], ...] = ()
    report: LinkReport = field(default_factory=LinkReport, compare=False)

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise KeyError(entity_id)

    @property
    def words(self) -> list[WordBox]:
        return [w for e in self.entities for w in e.words]


@dataclass(frozen=True)
class CorpusStats:
    n_forms: int = 0
    n_words: int = 0
    n_entities: int = 0
    n_relations: int = 0
    per_class: dict[str, int] = field(default_factory=lambda: {k: 0 for k in LABELS})
    n_rejected_links: int = 0
    n_duplicate_links: int = 0
    n_dropped_words: int = 0

    def rows(self) -> list[tuple[str, int]]:
        out = [
            ("forms", self.n_forms),
            ("words", self.n_words),
            ("entities", self.n_entities),
            ("relations", self.n_relations),
        ]
        out += [(f"class.{k}", self.per_class[k]) for k in LABELS]
        out.append(("rejected_links", self.n_rejected_links))
        out.append(("duplicate_links", self.n_duplicate_links))
        out.append(("dropped_words", self.n_dropped_words))
        return out


def _clamp_box(box: Sequence[float], width: int, height: int) -> Box:
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    return (
        min(max(x1, 0), width),
        min(max(y1, 0), height),
        min(max(x2, 0), width),
        min(max(y2, 0), height),
    )


def _check_box(raw, where: str) -> list[float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{where}: box must be [x1, y1, x2, y2], got {raw!r}")
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: non-numeric box {raw!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"{where}: non-finite box {raw!r}")
    return vals


def _normalize_links(
    raw_pairs: Iterable[tuple[int, int]], labels: dict[int, str]
) -> tuple[list[tuple[int, int]], list[tuple[int, int]], int]:
    """Orient pairs question -> answer, deduplicate, keep first-seen order."""
    dangling = sorted({p for p in raw_pairs if p[0] not in labels or p[1] not in labels})
    if dangling:
        raise ValidationError("links reference unknown entity ids", dangling)
    kept: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    rejected: list[tuple[int, int]] = []
    rejected_seen: set[frozenset] = set()
    duplicates = 0
    for a, b in raw_pairs:
        if labels[a] == "question" and labels[b] == "answer":
            pair = (a, b)
        elif labels[b] == "question" and labels[a] == "answer":
            pair = (b, a)
        else:
            key = frozenset((a, b))
            if key not in rejected_seen:
                rejected_seen.add(key)
                rejected.append((a, b))
            continue
        if pair in seen:
            duplicates += 1
            continue
        seen.add(pair)
        kept.append(pair)
    return kept, rejected, duplicates


def form_from_dict(doc: dict) -> FormDocument:
    """Build a validated FormDocument from decoded FUNSD JSON."""
    if not isinstance(doc, dict) or not isinstance(doc.get("form"), list):
        raise ValidationError('annotation must be an object with a "form" array')
    items = doc["form"]
    raw_boxes = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ValidationError(f"form[{i}] is not an object")
        raw_boxes.append(_check_box(item.get("box"), f"form[{i}]"))
        for j, w in enumerate(item.get("words") or []):
            raw_boxes.append(_check_box(w.get("box"), f"form[{i}].words[{j}]"))

    # FUNSD files do not record the page size; fall back to the box extent.
    width = doc.get("page_width")
    height = doc.get("page_height")
    if width is None:
        width = max((int(math.ceil(max(b[0], b[2]))) for b in raw_boxes), default=0)
    if height is None:
        height = max((int(math.ceil(max(b[1], b[3]))) for b in raw_boxes), default=0)
    width, height = int(width), int(height)

    entities: list[dict] = []
    ids: set[int] = set()
    raw_pairs: list[tuple[int, int]] = []
    dropped_words = 0
    for i, item in enumerate(items):
        try:
            eid = int(item["id"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"form[{i}]: missing or invalid id") from None
        if eid < 0:
            raise ValidationError(f"form[{i}]: negative id {eid}")
        if eid in ids:
            raise ValidationError(f"duplicate entity id {eid}")
        ids.add(eid)
        label = item.get("label")
        if label not in LABELS:
            raise ValidationError(f"entity {eid}: unknown label {label!r}")
        words = []
        for w in item.get("words") or []:
            text = str(w.get("text", "")).strip()
            wbox = _clamp_box(_check_box(w.get("box"), f"entity {eid} word"), width, height)
            if not text:
                dropped_words += 1
                continue
            if wbox[2] <= wbox[0] or wbox[3] <= wbox[1]:
                logger.warning("entity %d: dropping zero-area word %r", eid, text)
                dropped_words += 1
                continue
            words.append(WordBox(text, wbox))
        box = _clamp_box(item["box"], width, height)
        if words:
            # entity box must cover its words
            box = (
                min([box[0]] + [w.box[0] for w in words]),
                min([box[1]] + [w.box[1] for w in words]),
                max([box[2]] + [w.box[2] for w in words]),
                max([box[3]] + [w.box[3] for w in words]),
            )
        for pair in item.get("linking") or []:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ValidationError(f"entity {eid}: malformed link {pair!r}")
            raw_pairs.append((int(pair[0]), int(pair[1])))
        entities.append(
            dict(id=eid, label=label, box=box, text=str(item.get("text", "")), words=tuple(words))
        )

    labels = {e["id"]: e["label"] for e in entities}
    links, rejected, duplicates = _normalize_links(raw_pairs, labels)
    if rejected:
        logger.debug("rejected %d non question->answer links", len(rejected))
    per_entity: dict[int, list[tuple[int, int]]] = {i: [] for i in labels}
    for q, a in links:
        per_entity[q].append((q, a))
        per_entity[a].append((q, a))
    return FormDocument(
        page_width=width,
        page_height=height,
        entities=tuple(Entity(links=tuple(per_entity[e["id"]]), **e) for e in entities),
        links=tuple(links),
        report=LinkReport(tuple(rejected), duplicates, dropped_words),
    )


def parse_form(raw: bytes | str) -> FormDocument:
    """Parse one FUNSD annotation document.

    Raises ParseError (with byte offset) for malformed JSON and
    ValidationError for documents that break the model, e.g. dangling link ids.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise ParseError("invalid UTF-8", exc.start) from None
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(exc.msg, offset) from None
    return form_from_dict(doc)


def form_to_dict(form: FormDocument) -> dict:
    items = []
    for e in form.entities:
        items.append(
            {
                "id": e.id,
                "label": e.label,
                "box": list(e.box),
                "text": e.text,
                "words": [{"text": w.text, "box": list(w.box)} for w in e.words],
                "linking": [list(p) for p in e.links],
            }
        )
    return {"page_width": form.page_width, "page_height": form.page_height, "form": items}


def serialize_form(form: FormDocument) -> bytes:
    return json.dumps(form_to_dict(form), indent=1, ensure_ascii=False).encode("utf-8")


def load_form(path: str | Path) -> FormDocument:
    return parse_form(Path(path).read_bytes())


def write_form(form: FormDocument, path: str | Path) -> None:
    Path(path).write_bytes(serialize_form(form))


def load_split(directory: str | Path) -> list[tuple[str, FormDocument]]:
    """Load every ``*.json`` annotation in a directory, sorted by file name.

    Accepts either the annotation directory itself or a FUNSD split root that
    contains an ``annotations/`` subdirectory.
    """
    directory = Path(directory)
    if (directory / "annotations").is_dir():
        directory = directory / "annotations"
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    return [(p.stem, load_form(p)) for p in sorted(directory.glob("*.json"))]


def dataset_stats(forms: Iterable[FormDocument]) -> CorpusStats:
    per_class = {k: 0 for k in LABELS}
    n_forms = n_words = n_rel = n_rej = n_dup = n_drop = 0
    for form in forms:
        n_forms += 1
        n_rel += len(form.links)
        n_rej += len(form.report.rejected)
        n_dup += form.report.duplicates
        n_drop += form.report.dropped_words
        for e in form.entities:
            per_class[e.label] += 1
            n_words += len(e.words)
    return CorpusStats(
        n_forms=n_forms,
        n_words=n_words,
        n_entities=sum(per_class.values()),
        n_relations=n_rel,
        per_class=per_class,
        n_rejected_links=n_rej,
        n_duplicate_links=n_dup,
        n_dropped_words=n_drop,
    )
