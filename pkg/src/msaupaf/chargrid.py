"""Character vocabulary, char-grid rasterization and box-level augmentation."""

from __future__ import annotations

import dataclasses
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .funsd_io import Entity, FormDocument, WordBox

CGRD_MAGIC = b"CGRD"


@dataclass(frozen=True)
class CharVocab:
    """Characters in index order; index 0 is background."""

    chars: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocabulary characters must be unique")
        object.__setattr__(self, "_index", {c: i + 1 for i, c in enumerate(self.chars)})

    def __len__(self) -> int:
        return len(self.chars)

    @property
    def n_char(self) -> int:
        return len(self.chars)

    def index(self, ch: str) -> int:
        """Vocabulary index of ``ch`` after case folding, 0 when unknown."""
        return self._index.get(ch.upper(), 0)

    def to_text(self) -> str:
        return "".join(self.chars)

    @classmethod
    def from_text(cls, text: str) -> "CharVocab":
        return cls(tuple(text))


def build_vocab(corpus: Iterable[FormDocument], n: int = 90) -> CharVocab:
    """The ``n`` most frequent (upper-cased) characters of all word texts.

    Ties are broken by ascending code point.
    """
    if n < 1:
        raise ValueError("vocabulary size must be >= 1")
    counts: Counter[str] = Counter()
    for form in corpus:
        for w in form.words:
            counts.update(ch for ch in w.text.upper() if not ch.isspace())
    if not counts:
        raise ValueError("corpus contains no characters")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], ord(kv[0])))
    return CharVocab(tuple(ch for ch, _ in ranked[:n]))


@dataclass(frozen=True)
class CharGrid:
    cells: np.ndarray  # (H, W) uint16
    n_char: int
    scale: float = 1.0  # page pixels per cell

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    def to_bytes(self) -> bytes:
        head = CGRD_MAGIC + struct.pack("<III", self.height, self.width, self.n_char)
        return head + np.ascontiguousarray(self.cells, dtype="<u2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, scale: float = 1.0) -> "CharGrid":
        if data[:4] != CGRD_MAGIC:
            raise ValueError("not a CGRD char-grid")
        h, w, n_char = struct.unpack("<III", data[4:16])
        body = data[16:]
        if len(body) != 2 * h * w:
            raise ValueError(f"CGRD payload has {len(body)} bytes, expected {2 * h * w}")
        cells = np.frombuffer(body, dtype="<u2").reshape(h, w).astype(np.uint16)
        if cells.size and int(cells.max()) > n_char:
            raise ValueError("cell index exceeds N_char")
        return cls(cells, n_char, scale)


def median_word_height(form: FormDocument) -> float:
    heights = [w.box[3] - w.box[1] for w in form.words]
    if not heights:
        raise ValueError("form has no words")
    return float(np.median(heights))


def cell_scale(form: FormDocument, target_median_height: float = 3) -> float:
    """Page pixels per grid cell so the median word height spans the target."""
    if target_median_height < 1:
        raise ValueError("target_median_height must be >= 1")
    scale = median_word_height(form) / target_median_height
    if scale <= 0:
        raise ValueError("degenerate scale: median word height is zero")
    return scale


def cell_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Cells whose centers fall in [lo, hi), at least one, clipped to [0, limit)."""
    a = math.ceil(lo - 0.5)
    b = math.ceil(hi - 0.5)
    if b <= a:
        a = min(max(int(math.floor((lo + hi) / 2)), 0), max(limit - 1, 0))
        b = a + 1
    return max(a, 0), min(b, limit)


def grid_shape(form: FormDocument, scale: float) -> tuple[int, int]:
    h = int(math.ceil(form.page_height / scale - 1e-9))
    w = int(math.ceil(form.page_width / scale - 1e-9))
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate grid {h}x{w} at scale {scale}")
    return h, w


def rasterize(form: FormDocument, vocab: CharVocab, target_median_height: float = 3) -> CharGrid:
    """Render word characters into a char-grid.

    Each word box is cut into ``len(text)`` equal horizontal slots; a cell
    takes the character of the slot containing its center.  Later words
    overwrite earlier ones.
    """
    scale = cell_scale(form, target_median_height)
    h, w = grid_shape(form, scale)
    cells = np.zeros((h, w), dtype=np.uint16)
    for word in form.words:
        x1, y1, x2, y2 = (v / scale for v in word.box)
        r0, r1 = cell_span(y1, y2, h)
        c0, c1 = cell_span(x1, x2, w)
        if r0 >= r1 or c0 >= c1:
            continue
        text = word.text
        idx = np.array([vocab.index(ch) for ch in text], dtype=np.uint16)
        slot = (x2 - x1) / len(text)
        centers = np.arange(c0, c1) + 0.5
        k = np.clip(np.floor((centers - x1) / slot).astype(int), 0, len(text) - 1)
        cells[r0:r1, c0:c1] = idx[k][None, :]
    return CharGrid(cells, vocab.n_char, scale)


def one_hot(grid: CharGrid) -> np.ndarray:
    """(N_char + 1, H, W) float32 indicator stack; channel 0 is background."""
    eye = np.eye(grid.n_char + 1, dtype=np.float32)
    return np.ascontiguousarray(np.moveaxis(eye[grid.cells.astype(np.int64)], -1, 0))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Box-level augmentation; shifts and pads are in grid cells.

    The random stream is consumed in a fixed order: one uniform draw per
    character (plus one integer draw for each replacement), then a (dx, dy)
    integer pair per entity, then the affine parameters, then the four pads.
    """

    p_char_replace: float = 0.0
    replacement_chars: str = ""
    max_shift: int = 0
    rotation_deg: float = 0.0
    shear: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    pad_range: tuple[int, int] = (0, 0)
    target_median_height: float = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_char_replace <= 1.0:
            raise ValueError("p_char_replace must be in [0, 1]")
        if self.p_char_replace > 0 and not self.replacement_chars:
            raise ValueError("character replacement needs replacement_chars")
        if self.max_shift < 0 or min(self.pad_range) < 0 or self.pad_range[0] > self.pad_range[1]:
            raise ValueError("shift and pad ranges must be non-negative")
        if min(self.scale_range) <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError("invalid scale_range")

    def with_seed(self, seed: int) -> "AugmentConfig":
        return dataclasses.replace(self, seed=seed)


def _shift(box, dx, dy):
    return (box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy)


def _affine_box(box, m: np.ndarray, center: np.ndarray):
    xs = [box[0], box[2], box[2], box[0]]
    ys = [box[1], box[1], box[3], box[3]]
    pts = np.stack([xs, ys]).astype(float) - center[:, None]
    out = m @ pts + center[:, None]
    return (
        int(round(out[0].min())),
        int(round(out[1].min())),
        int(round(out[0].max())),
        int(round(out[1].max())),
    )


def _clip(box, width, height):
    x1, y1, x2, y2 = box
    return (
        min(max(x1, 0), width),
        min(max(y1, 0), height),
        min(max(x2, 0), width),
        min(max(y2, 0), height),
    )


def augment(form: FormDocument, cfg: AugmentConfig) -> FormDocument:
    """Character replacement, entity shift, global affine, then padding.

    Labels and links are carried through unchanged.
    """
    rng = np.random.default_rng(cfg.seed)
    pixels_per_cell = cell_scale(form, cfg.target_median_height) if form.words else 1.0
    repl = cfg.replacement_chars

    entities: list[Entity] = []
    for e in form.entities:
        words = []
        for w in e.words:
            chars = list(w.text)
            for i in range(len(chars)):
                if rng.random() < cfg.p_char_replace:
                    chars[i] = repl[int(rng.integers(len(repl)))]
            words.append(WordBox("".join(chars), w.box))
        entities.append(dataclasses.replace(e, words=tuple(words)))

    if cfg.max_shift > 0:
        shifted = []
        for e in entities:
            dx, dy = (int(v) * pixels_per_cell for v in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
            dx, dy = int(round(dx)), int(round(dy))
            shifted.append(
                dataclasses.replace(
                    e,
                    box=_shift(e.box, dx, dy),
                    words=tuple(WordBox(w.text, _shift(w.box, dx, dy)) for w in e.words),
                )
            )
        entities = shifted

    identity = cfg.rotation_deg == 0 and cfg.shear == 0 and cfg.scale_range == (1.0, 1.0)
    if not identity:
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        sh = rng.uniform(-cfg.shear, cfg.shear)
        s = rng.uniform(*cfg.scale_range)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        m = s * rot @ np.array([[1.0, sh], [0.0, 1.0]])
        center = np.array([form.page_width / 2, form.page_height / 2])
        entities = [
            dataclasses.replace(
                e,
                box=_affine_box(e.box, m, center),
                words=tuple(WordBox(w.text, _affine_box(w.box, m, center)) for w in e.words),
            )
            for e in entities
        ]

    width, height = form.page_width, form.page_height
    if cfg.pad_range != (0, 0):
        left, top, right, bottom = (
            int(round(int(v) * pixels_per_cell))
            for v in rng.integers(cfg.pad_range[0], cfg.pad_range[1] + 1, size=4)
        )
        entities = [
            dataclasses.replace(
                e,
                box=_shift(e.box, left, top),
                words=tuple(WordBox(w.text, _shift(w.box, left, top)) for w in e.words),
            )
            for e in entities
        ]
        width += left + right
        height += top + bottom

    def on_page(b):
        return b[2] > 0 and b[3] > 0 and b[0] < width and b[1] < height

    if entities and not any(on_page(e.box) for e in entities):
        raise ValueError("augmentation moved every entity off the page")
    out = []
    for e in entities:
        words = tuple(
            WordBox(w.text, _clip(w.box, width, height))
            for w in e.words
            if on_page(w.box)
        )
        words = tuple(w for w in words if w.box[2] > w.box[0] and w.box[3] > w.box[1])
        out.append(dataclasses.replace(e, box=_clip(e.box, width, height), words=words))
    return dataclasses.replace(form, page_width=width, page_height=height, entities=tuple(out))

