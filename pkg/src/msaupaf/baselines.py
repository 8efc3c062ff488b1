"""Nearest-question heuristic linker."""

from __future__ import annotations

import math
from typing import Iterable

from .funsd_io import Entity


def _center(box):
    return ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)


def box_distance(a, b, metric: str = "center") -> float:
    if metric == "center":
        (ax, ay), (bx, by) = _center(a), _center(b)
        return math.hypot(ax - bx, ay - by)
    if metric == "nearest-edge":
        dx = max(0, max(a[0], b[0]) - min(a[2], b[2]))
        dy = max(0, max(a[1], b[1]) - min(a[3], b[3]))
        return math.hypot(dx, dy)
    raise ValueError(f"unknown distance metric {metric!r}")


def heuristic_link(entities: Iterable[Entity], metric: str = "center") -> list[tuple[int, int]]:
    """Link every answer to its nearest question (ties: lower id)."""
    entities = list(entities)
    questions = sorted((e for e in entities if e.label == "question"), key=lambda e: e.id)
    if not questions:
        return []
    out = []
    for a in entities:
        if a.label != "answer":
            continue
        q = min(questions, key=lambda q: (box_distance(a.box, q.box, metric), q.id))
        out.append((q.id, a.id))
    return out
