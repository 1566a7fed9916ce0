"""Plain value types shared by the geometry code and the brute-force oracle.

Nothing in here computes overlaps; it only holds data and validates shapes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

# Overlap extents at or below this many pixels along an axis count as touching,
# not overlapping.
DEGENERATE_EPS = 1e-9

DEFAULT_GRANULARITIES = (1, 2, 7, 14)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CropBox:
    """A view's crop in source-image pixels. ``hflip`` marks a mirrored view."""

    x: float
    y: float
    w: float
    h: float
    hflip: bool = False

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"crop must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def parse(cls, spec: str) -> "CropBox":
        """Parse ``"x,y,w,h[,flip]"``; flip accepts 0/1/true/false/flip."""
        parts = [p.strip() for p in spec.split(",")]
        if len(parts) not in (4, 5):
            raise ValueError(f"crop spec needs 4 or 5 fields: {spec!r}")
        x, y, w, h = (float(p) for p in parts[:4])
        flip = False
        if len(parts) == 5:
            token = parts[4].lower()
            if token in ("1", "true", "flip", "yes"):
                flip = True
            elif token not in ("0", "false", "noflip", "no", ""):
                raise ValueError(f"bad flip field {parts[4]!r}")
        return cls(x, y, w, h, flip)

    @property
    def area(self) -> float:
        return self.w * self.h

    def flipped(self) -> "CropBox":
        return CropBox(self.x, self.y, self.w, self.h, not self.hflip)


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("rect extents must be non-negative")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h


@dataclass(frozen=True)
class PatchGrid:
    """Patch grid of a view: ``U`` rows by ``V`` columns."""

    U: int = 14
    V: int = 14

    def __post_init__(self):
        if self.U <= 0 or self.V <= 0:
            raise ConfigurationError("grid dimensions must be positive")

    @classmethod
    def for_image(cls, image_side: int = 224, patch_size: int = 16) -> "PatchGrid":
        if image_side % patch_size:
            raise ConfigurationError(
                f"image side {image_side} not divisible by patch size {patch_size}")
        n = image_side // patch_size
        return cls(n, n)

    def cells(self, c: int) -> Tuple[int, int]:
        """Rows and columns of the grid at granularity ``c``."""
        check_granularity(self, c)
        return self.U // c, self.V // c


def check_granularity(grid: PatchGrid, c: int) -> None:
    if not isinstance(c, int) or c <= 0:
        raise ConfigurationError(f"granularity must be a positive integer, got {c!r}")
    if grid.U % c or grid.V % c:
        raise ConfigurationError(
            f"granularity {c} does not divide the {grid.U}x{grid.V} patch grid")


def validate_granularities(coefficients: Sequence[int], grid: PatchGrid) -> Tuple[int, ...]:
    coefficients = tuple(coefficients)
    if not coefficients:
        raise ConfigurationError("at least one granularity is required")
    if len(set(coefficients)) != len(coefficients):
        raise ConfigurationError(f"duplicate granularities in {coefficients}")
    if any(b <= a for a, b in zip(coefficients, coefficients[1:])):
        raise ConfigurationError(f"granularities must be strictly increasing: {coefficients}")
    for c in coefficients:
        check_granularity(grid, c)
    return coefficients


Cell = Tuple[int, int]
KeyWeight = Tuple[int, int, float]


@dataclass
class CorrespondenceTable:
    """Normalized overlap weights from view-1 query cells to view-2 key cells.

    ``entries`` holds only queries that overlap view 2; every other query of
    the ``rows`` x ``cols`` grid has ``has_overlap`` false.
    """

    c: int
    rows: int
    cols: int
    entries: Dict[Cell, List[KeyWeight]] = field(default_factory=dict)

    def has_overlap(self, k: int, l: int) -> bool:
        return (k, l) in self.entries

    def keys(self, k: int, l: int) -> List[KeyWeight]:
        return self.entries.get((k, l), [])

    def weight(self, k: int, l: int, s: int, t: int) -> float:
        for s_, t_, w in self.entries.get((k, l), ()):
            if s_ == s and t_ == t:
                return w
        return 0.0

    def queries(self) -> List[Cell]:
        return sorted(self.entries)

    def as_dict(self) -> Dict[Tuple[int, int, int, int], float]:
        return {(k, l, s, t): w
                for (k, l), keys in self.entries.items() for s, t, w in keys}

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> Iterator[str]:
        for k, l in self.queries():
            keys = [[s, t, float(f"{w:.17g}")] for s, t, w in sorted(self.entries[(k, l)])]
            yield json.dumps({"c": self.c, "k": k, "l": l, "keys": keys})

    @classmethod
    def from_jsonl(cls, lines: Sequence[str], rows: int, cols: int) -> "CorrespondenceTable":
        table = None
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            if table is None:
                table = cls(rec["c"], rows, cols)
            elif rec["c"] != table.c:
                raise ValueError("mixed granularities in one table")
            table.entries[(rec["k"], rec["l"])] = [(int(s), int(t), float(w))
                                                   for s, t, w in rec["keys"]]
        if table is None:
            raise ValueError("empty table stream")
        return table
