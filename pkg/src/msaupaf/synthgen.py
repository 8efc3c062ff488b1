"""Deterministic synthetic forms with exact labels and links.

Everything is laid out on a 4-pixel lattice with 12-pixel text lines and one
character per lattice cell, so at the default char-grid scale (median text
height of 3 cells) every box edge falls on a cell boundary.

``easy`` forms guarantee that each answer's nearest question (by box center)
is its own key.  ``hard`` forms add short unlinked decoy questions right next
to some answers, which breaks that property on purpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import heuristic_link
from .funsd_io import FormDocument, form_from_dict, write_form

logger = logging.getLogger(__name__)

UNIT = 4  # page pixels per lattice cell
TEXT_H = 3  # text height in cells
MARGIN = 2
FIRST_ROW = 9
PITCH = 8
GAP = 3  # cells between a question and its answer

HEADERS = [
    "RESEARCH PROPOSAL", "ORDER FORM", "FAX TRANSMITTAL", "TEST REPORT", "EXPENSE CLAIM",
    "PRODUCT SURVEY", "BUDGET REVIEW", "MEMORANDUM", "PURCHASE ORDER", "PROJECT SUMMARY",
]
QUESTION_WORDS = [
    "NAME", "DATE", "PHONE", "FAX", "ADDRESS", "CITY", "STATE", "ZIP", "TITLE", "BRAND",
    "CODE", "TOTAL", "ACCOUNT", "REPORT", "NUMBER", "SIGNED", "DEPT", "PROJECT", "AMOUNT",
    "CONTACT", "STATUS", "BUDGET", "VENDOR", "SAMPLE", "REGION", "ITEM", "MARKET",
]
SURNAMES = ["SMITH", "JONES", "BROWN", "DAVIS", "MILLER", "WILSON", "MOORE", "TAYLOR", "LEE", "WHITE"]
OTHER_WORDS = [
    "please", "return", "this", "form", "to", "the", "office", "by", "end", "of", "month",
    "confidential", "page", "copy", "for", "records", "only", "see", "attached", "notes",
]
DECOYS = ["ID:", "NO:", "REF:", "TEL:"]


@dataclass(frozen=True)
class SynthSpec:
    n_forms: int = 10
    page_width: int = 512
    page_height: int = 512
    rows: int = 12
    columns: int = 2
    fan_out: float = 0.2
    distractor_rate: float = 0.2
    mode: str = "easy"
    decoy_rate: float = 0.5  # hard mode only

    def __post_init__(self):
        if self.mode not in ("easy", "hard"):
            raise ValueError("mode must be 'easy' or 'hard'")
        if min(self.n_forms, self.page_width, self.page_height, self.rows, self.columns) <= 0:
            raise ValueError("spec values must be positive")
        for p in (self.fan_out, self.distractor_rate, self.decoy_rate):
            if not 0 <= p <= 1:
                raise ValueError("rates must be in [0, 1]")


class _Builder:
    def __init__(self):
        self.items: list[dict] = []

    def line(self, label: str, text: str, x: int, y: int) -> int:
        words, cx = [], x
        for w in text.split():
            words.append({"text": w, "box": [cx * UNIT, y * UNIT, (cx + len(w)) * UNIT, (y + TEXT_H) * UNIT]})
            cx += len(w) + 1
        eid = len(self.items)
        self.items.append(
            {
                "id": eid,
                "label": label,
                "box": [x * UNIT, y * UNIT, (cx - 1) * UNIT, (y + TEXT_H) * UNIT],
                "text": text,
                "words": words,
                "linking": [],
            }
        )
        return eid

    def link(self, q: int, a: int) -> None:
        self.items[q]["linking"].append([q, a])
        self.items[a]["linking"].append([q, a])


def _question(rng, lo: int, hi: int) -> str:
    for _ in range(200):
        n = 1 + int(rng.integers(2))
        words = [QUESTION_WORDS[int(rng.integers(len(QUESTION_WORDS)))] for _ in range(n)]
        text = " ".join(words) + ":"
        if lo <= len(text) <= hi:
            return text
    return "NAME:" if lo <= 5 <= hi else "X" * (lo - 1) + ":"


def _answer(rng, hi: int) -> str:
    for _ in range(200):
        kind = int(rng.integers(4))
        if kind == 0:
            text = "".join(str(int(d)) for d in rng.integers(0, 10, size=int(rng.integers(3, 9))))
        elif kind == 1:
            m, d, y = rng.integers(1, 13), rng.integers(1, 29), rng.integers(80, 100)
            text = f"{m:02d}/{d:02d}/{y:02d}"
        elif kind == 2:
            text = f"{chr(65 + int(rng.integers(26)))}. {SURNAMES[int(rng.integers(len(SURNAMES)))]}"
        else:
            text = f"${int(rng.integers(10, 5000))}.{int(rng.integers(100)):02d}"
        if len(text) <= hi:
            return text
    return "0"


def _other(rng, hi: int) -> str:
    n = 2 + int(rng.integers(3))
    words = [OTHER_WORDS[int(rng.integers(len(OTHER_WORDS)))] for _ in range(n)]
    text = " ".join(words)
    while len(text) > hi and " " in text:
        text = text.rsplit(" ", 1)[0]
    return text[:hi]


def _layout(rng, spec: SynthSpec) -> dict:
    width_c = spec.page_width // UNIT
    height_c = spec.page_height // UNIT
    max_rows = max((height_c - MARGIN - TEXT_H - FIRST_ROW) // PITCH + 1, 0)
    rows = spec.rows
    if rows > max_rows:
        logger.warning("layout overflow: %d rows requested, %d fit", rows, max_rows)
        rows = max_rows
    columns = spec.columns
    colw = (width_c - 2 * MARGIN) // columns
    while columns > 1 and colw < 34:
        columns -= 1
        colw = (width_c - 2 * MARGIN) // columns
        logger.warning("layout overflow: reducing to %d columns", columns)

    easy = spec.mode == "easy"
    q_lo, q_hi = (10, 14) if easy else (8, 16)
    a_hi = 12 if easy else 20
    avail = colw - 2
    b = _Builder()
    b.line("header", HEADERS[int(rng.integers(len(HEADERS)))], MARGIN, 2)

    blocked: set[tuple[int, int]] = set()
    for r in range(rows):
        y = FIRST_ROW + r * PITCH
        for c in range(columns):
            if (r, c) in blocked:
                continue
            x = MARGIN + c * colw
            if rng.random() < spec.distractor_rate:
                b.line("other", _other(rng, avail), x, y)
                continue
            q_text = _question(rng, q_lo, min(q_hi, avail - GAP - 1))
            a_text = _answer(rng, min(a_hi, avail - len(q_text) - GAP))
            q = b.line("question", q_text, x, y)
            ax = x + len(q_text) + GAP
            a = b.line("answer", a_text, ax, y)
            b.link(q, a)
            fan = rng.random() < spec.fan_out
            if fan and r + 1 < rows:
                a2 = b.line("answer", _answer(rng, min(a_hi, avail - len(q_text) - GAP)), ax, y + PITCH)
                b.link(q, a2)
                blocked.add((r + 1, c))
                if easy:
                    blocked.add((r + 2, c))
            if not easy and rng.random() < spec.decoy_rate:
                dx = ax + len(a_text) + GAP
                decoy = DECOYS[int(rng.integers(len(DECOYS)))]
                if dx + len(decoy) <= x + avail and len(decoy) < len(q_text):
                    b.line("question", decoy, dx, y)
    return {"page_width": spec.page_width, "page_height": spec.page_height, "form": b.items}


def _heuristic_ok(form: FormDocument) -> bool:
    return set(heuristic_link(form.entities)) == set(form.links)


def generate_form(seed: int, index: int, spec: SynthSpec, max_attempts: int = 50) -> FormDocument:
    rng = np.random.default_rng([seed, index])
    for _ in range(max_attempts):
        form = form_from_dict(_layout(rng, spec))
        ok = _heuristic_ok(form)
        if spec.mode == "easy" and ok:
            return form
        if spec.mode == "hard" and (not ok or not form.links):
            return form
    raise RuntimeError(f"could not satisfy {spec.mode}-mode geometry for form {index}")


def generate(seed: int, spec: SynthSpec) -> list[FormDocument]:
    return [generate_form(seed, i, spec) for i in range(spec.n_forms)]


def write_corpus(forms: list[FormDocument], out_dir: str | Path, prefix: str = "synth") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, form in enumerate(forms):
        p = out_dir / f"{prefix}_{i:04d}.json"
        write_form(form, p)
        paths.append(p)
    return paths
