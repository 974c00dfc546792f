"""Deterministic synthetic multi-label images of coloured glyphs.

Each class is one (shape, colour) glyph out of a 4 x 6 alphabet.  An image
holds k distinct classes, k uniform in 1..max_labels, each drawn once in its
own grid cell at a random size and offset, so every labelled glyph is fully
visible.  Every sample has its own RNG stream keyed by (seed, split, index).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.9, 0.9),
}
COLOR_NAMES = tuple(COLORS)
SPLITS = ("train", "val", "test")

MAGIC = b"POQD"
VERSION = 1


def glyph_alphabet() -> List[Tuple[int, int]]:
    """All 24 (shape, colour) pairs; the first 12 pair shape k%4 with colour k%6."""
    first = [(k % 4, k % 6) for k in range(12)]
    rest = [(s, c) for s in range(4) for c in range(6) if (s, c) not in first]
    return first + rest


ALPHABET = glyph_alphabet()


def class_name(k: int) -> str:
    s, c = ALPHABET[k]
    return f"{COLOR_NAMES[c]}-{SHAPES[s]}"


@dataclass
class DatasetSpec:
    num_classes: int = 12
    image_size: int = 32
    max_labels: int = 4
    train_size: int = 5000
    val_size: int = 1000
    test_size: int = 1000
    seed: int = 0
    cooccurrence_strength: float = 0.0
    cooccurrence_pairs: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        self.cooccurrence_pairs = tuple(tuple(int(v) for v in p) for p in self.cooccurrence_pairs)
        if not 1 <= self.num_classes <= len(ALPHABET):
            raise ConfigError(
                f"num_classes={self.num_classes} exceeds the glyph alphabet ({len(ALPHABET)})"
            )
        if not 1 <= self.max_labels <= self.num_classes:
            raise ConfigError(f"max_labels must be in 1..{self.num_classes}, got {self.max_labels}")
        if self.max_labels > 255:
            raise ConfigError("max_labels must fit in a byte")
        if self.cell_size < 6:
            raise ConfigError(
                f"image_size {self.image_size} too small for {self.max_labels} glyphs"
            )
        if not 0.0 <= self.cooccurrence_strength <= 1.0:
            raise ConfigError("cooccurrence_strength must be in [0, 1]")
        for a, b in self.cooccurrence_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ConfigError(f"invalid co-occurrence pair {(a, b)}")

    @property
    def cells_per_side(self) -> int:
        return math.ceil(math.sqrt(self.max_labels))

    @property
    def cell_size(self) -> int:
        return self.image_size // self.cells_per_side

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]


@dataclass(frozen=True)
class Glyph:
    cls: int
    top: int
    left: int
    size: int


@dataclass
class Split:
    images: np.ndarray
    labels: List[FrozenSet[int]]
    glyphs: List[Tuple[Glyph, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: DatasetSpec
    splits: Dict[str, Split]

    def __getitem__(self, split: str) -> Split:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; valid splits: {', '.join(SPLITS)}")
        return self.splits[split]


def _sample_labels(spec: DatasetSpec, rng: np.random.Generator) -> List[int]:
    c, m = spec.num_classes, spec.max_labels
    k = int(rng.integers(1, m + 1))
    chosen = [int(v) for v in rng.choice(c, size=k, replace=False)]
    for a, b in spec.cooccurrence_pairs:
        if a in chosen and b not in chosen and rng.random() < spec.cooccurrence_strength:
            if len(chosen) < m:
                chosen.append(b)
            elif m >= 2:
                others = [i for i, v in enumerate(chosen) if v != a]
                chosen[others[int(rng.integers(len(others)))]] = b
    return chosen


def _glyph_mask(shape: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = size / 2
    if SHAPES[shape] == "square":
        return np.ones((size, size), dtype=bool)
    if SHAPES[shape] == "circle":
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if SHAPES[shape] == "triangle":
        # apex at the top centre, base along the bottom edge
        return np.abs(xx - r) <= (yy / size) * r
    arm = max(1.0, size / 6)
    return (np.abs(yy - r) <= arm) | (np.abs(xx - r) <= arm)


def render_sample(spec: DatasetSpec, rng: np.random.Generator):
    """One image and its glyph list."""
    classes = _sample_labels(spec, rng)
    n, g, cell = spec.image_size, spec.cells_per_side, spec.cell_size
    base = rng.uniform(0.05, 0.2)
    img = np.clip(base + rng.normal(0.0, 0.03, size=(n, n, 3)), 0.0, 1.0)
    cells = rng.permutation(g * g)[:len(classes)]
    lo, hi = max(4, int(round(0.55 * cell))), max(4, int(round(0.9 * cell)))
    glyphs = []
    for cls, cell_index in zip(classes, cells):
        shape, color = ALPHABET[cls]
        size = int(rng.integers(lo, hi + 1))
        cy, cx = divmod(int(cell_index), g)
        top = cy * cell + int(rng.integers(0, cell - size + 1))
        left = cx * cell + int(rng.integers(0, cell - size + 1))
        rgb = np.clip(np.array(COLORS[COLOR_NAMES[color]]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
        mask = _glyph_mask(shape, size)
        region = img[top:top + size, left:left + size]
        region[mask] = rgb
        glyphs.append(Glyph(cls, top, left, size))
    return img.astype(np.float32), tuple(glyphs)


def labels_from_glyphs(glyphs: Sequence[Glyph]) -> FrozenSet[int]:
    return frozenset(g.cls for g in glyphs)


def generate_split(spec: DatasetSpec, split: str) -> Split:
    split_id = SPLITS.index(split)
    n = spec.split_size(split)
    images = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.float32)
    labels, glyphs = [], []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, split_id, i])
        images[i], gl = render_sample(spec, rng)
        glyphs.append(gl)
        labels.append(labels_from_glyphs(gl))
    return Split(images, labels, glyphs)


def generate(spec: DatasetSpec) -> Dataset:
    return Dataset(spec, {s: generate_split(spec, s) for s in SPLITS})


def class_frequencies(labels: Union[Split, Sequence[FrozenSet[int]]], num_classes: int) -> np.ndarray:
    if isinstance(labels, Split):
        labels = labels.labels
    counts = np.zeros(num_classes, dtype=np.int64)
    for ls in labels:
        for k in ls:
            counts[k] += 1
    return counts


def _count_moments(spec: DatasetSpec) -> Tuple[float, float]:
    ks = np.arange(1, spec.max_labels + 1, dtype=np.float64)
    return ks.mean(), (ks * (ks - 1)).mean()


def expected_marginal(spec: DatasetSpec, b: int) -> float:
    """P(b in labels) for a spec with at most one co-occurrence pair."""
    c, s = spec.num_classes, spec.cooccurrence_strength
    ek, ekk = _count_moments(spec)
    p_b = ek / c
    for a, bb in spec.cooccurrence_pairs:
        if bb == b and spec.max_labels >= 2:
            p_a_not_b = ek / c - ekk / (c * (c - 1))
            p_b += s * p_a_not_b
    return p_b


def expected_conditional(spec: DatasetSpec, a: int, b: int) -> float:
    """P(b in labels | a in labels) for a spec with at most one co-occurrence pair."""
    c = spec.num_classes
    ek, ekk = _count_moments(spec)
    base = (ekk / (c * (c - 1))) / (ek / c)
    if (a, b) in spec.cooccurrence_pairs and spec.max_labels >= 2:
        return base + (1 - base) * spec.cooccurrence_strength
    return base


# -- file format --------------------------------------------------------------
# b"POQD", u32 version, spec block, u64 sample count, then per sample:
# u8 label count, u8 labels (ascending), image_size^2 * 3 float32.
# Samples are the train, val and test splits concatenated in that order.

_SPEC_FMT = "<IIIQQQQd"


def _encode_spec(spec: DatasetSpec) -> bytes:
    head = struct.pack(_SPEC_FMT, spec.num_classes, spec.image_size, spec.max_labels,
                       spec.train_size, spec.val_size, spec.test_size, spec.seed,
                       spec.cooccurrence_strength)
    pairs = struct.pack("<I", len(spec.cooccurrence_pairs))
    pairs += b"".join(struct.pack("<BB", a, b) for a, b in spec.cooccurrence_pairs)
    return head + pairs


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    spec = ds.spec
    parts = [MAGIC, struct.pack("<I", VERSION), _encode_spec(spec)]
    total = sum(len(ds[s]) for s in SPLITS)
    parts.append(struct.pack("<Q", total))
    for s in SPLITS:
        split = ds[s]
        for img, ls in zip(split.images, split.labels):
            labels = sorted(ls)
            parts.append(struct.pack(f"<B{len(labels)}B", len(labels), *labels))
            parts.append(np.ascontiguousarray(img, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class DatasetFileError(ValueError):
    pass


def load_dataset(path: Union[str, Path]) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetFileError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise DatasetFileError("dataset file truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise DatasetFileError(f"dataset version {version}, this build reads {VERSION}")
    c, size, m, ntr, nva, nte, seed, strength = take(_SPEC_FMT)
    (npairs,) = take("<I")
    pairs = tuple(take("<BB") for _ in range(npairs))
    spec = DatasetSpec(c, size, m, ntr, nva, nte, seed, strength, pairs)
    (total,) = take("<Q")
    if total != ntr + nva + nte:
        raise DatasetFileError(f"sample count {total} does not match split sizes")
    n_px = size * size * 3
    splits = {}
    for s in SPLITS:
        n = spec.split_size(s)
        images = np.empty((n, size, size, 3), dtype=np.float32)
        labels = []
        for i in range(n):
            (k,) = take("<B")
            labels.append(frozenset(take(f"<{k}B")))
            if pos + 4 * n_px > len(buf):
                raise DatasetFileError("dataset file truncated")
            images[i] = np.frombuffer(buf, dtype="<f4", count=n_px, offset=pos).reshape(size, size, 3)
            pos += 4 * n_px
        splits[s] = Split(images, labels)
    if pos != len(buf):
        raise DatasetFileError(f"{len(buf) - pos} trailing bytes in dataset file")
    return Dataset(spec, splits)
