import json

import pytest
import torch

from msaupaf.funsd_io import parse_form
from msaupaf.targets import GridGeometry, collate_targets, encode_targets


def make_doc(items, **page):
    doc = {"form": items}
    doc.update(page)
    return json.dumps(doc).encode()


def entity(eid, label, box, words=None, linking=(), text="x"):
    if words is None:
        words = [{"text": text, "box": list(box)}]
    return {"id": eid, "label": label, "box": list(box), "text": text, "words": words, "linking": [list(p) for p in linking]}


@pytest.fixture
def qa_form():
    raw = make_doc(
        [
            entity(0, "question", (10, 10, 50, 22), linking=[(0, 1)], text="NAME:"),
            entity(1, "answer", (60, 10, 90, 22), linking=[(0, 1)], text="SMITH"),
        ],
        page_width=100,
        page_height=40,
    )
    return parse_form(raw)


def tiny_problem(n_char):
    """16 x 16 float64 input batch and targets for end-to-end gradient checks."""
    items = [
        entity(0, "question", (8, 8, 40, 20), linking=[(0, 1)], text="NO:"),
        entity(1, "answer", (44, 8, 60, 20), linking=[(0, 1)], text="42"),
        entity(2, "header", (8, 36, 56, 48), text="FORM"),
    ]
    form = parse_form(make_doc(items, page_width=64, page_height=64))
    geom = GridGeometry(16, 16, 4.0, 4)
    target = collate_targets([encode_targets(form, geom)], dtype=torch.float64)
    x = torch.zeros(1, n_char + 1, 16, 16, dtype=torch.float64)
    x[:, 0] = 1
    x[0, 0, 2:5, 2:10] = 0
    x[0, 3, 2:5, 2:10] = 1
    return x, target


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, from the tests' recorded verdicts."""
    lines = {}
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            for key, value in getattr(rep, "user_properties", ()):
                if key == "criterion":
                    n, text = value.split("|", 1)
                    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
                    lines[int(n)] = f"CRITERION {int(n):>2} {status}  {text}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
