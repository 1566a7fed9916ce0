"""Patch geometry between two crops of one source image.

All coordinates are continuous source-image pixels. Cell indices passed in and
returned are *view* indices, i.e. what the network sees; for a horizontally
flipped view the column index is mirrored before touching source coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .types import (
    DEGENERATE_EPS,
    Cell,
    ConfigurationError,
    CorrespondenceTable,
    CropBox,
    PatchGrid,
    Rect,
    check_granularity,
)

__all__ = [
    "CropBox", "Rect", "PatchGrid", "CorrespondenceTable", "ConfigurationError",
    "IndexRanges", "EdgeRatios", "LocalizedCell", "NoOverlapError",
    "patch_footprint", "patch_rect", "overlap_region", "intersect",
    "overlap_index_ranges", "relative_overlap_score", "correspondence_weights",
    "relative_metric_weights", "correspondence_tables", "edge_ratios", "localize",
]


class NoOverlapError(ValueError):
    pass


def patch_footprint(crop: CropBox, grid: PatchGrid, c: int) -> Tuple[float, float]:
    """Width and height in source pixels of one granularity-``c`` cell."""
    check_granularity(grid, c)
    return c * crop.w / grid.V, c * crop.h / grid.U


def _content_col(crop: CropBox, l: int, cols: int) -> int:
    return cols - 1 - l if crop.hflip else l


def patch_rect(crop: CropBox, grid: PatchGrid, c: int, k: int, l: int) -> Rect:
    rows, cols = grid.cells(c)
    if not (0 <= k < rows and 0 <= l < cols):
        raise IndexError(f"cell ({k}, {l}) outside {rows}x{cols} grid at c={c}")
    wc, hc = patch_footprint(crop, grid, c)
    l = _content_col(crop, l, cols)
    return Rect(crop.x + l * wc, crop.y + k * hc, wc, hc)


def _axis_overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    d = min(a1, b1) - max(a0, b0)
    return d if d > DEGENERATE_EPS else 0.0


def intersect(r1, r2) -> Optional[Rect]:
    """Intersection of two rect-like objects; None when the area is zero."""
    ow = _axis_overlap(r1.x, r1.x + r1.w, r2.x, r2.x + r2.w)
    oh = _axis_overlap(r1.y, r1.y + r1.h, r2.y, r2.y + r2.h)
    if ow == 0.0 or oh == 0.0:
        return None
    return Rect(max(r1.x, r2.x), max(r1.y, r2.y), ow, oh)


def _overlap_area(r1: Rect, r2: Rect) -> float:
    return (_axis_overlap(r1.x, r1.right, r2.x, r2.right)
            * _axis_overlap(r1.y, r1.bottom, r2.y, r2.bottom))


def overlap_region(crop1: CropBox, crop2: CropBox) -> Optional[Rect]:
    return intersect(crop1, crop2)


def _clamp_range(lo: int, hi: int, n: int) -> Tuple[int, int]:
    return max(lo, 0), min(hi, n - 1)


def _mirror_range(r: Tuple[int, int], n: int) -> Tuple[int, int]:
    lo, hi = r
    if lo > hi:
        return r
    return n - 1 - hi, n - 1 - lo


def _span(start: float, extent: float, origin: float, step: float) -> Tuple[int, int]:
    # Closed index range of step-sized cells from `origin` touching [start, start+extent).
    # The upper ceil bound is exclusive, hence the -1.
    return (math.floor((start - origin) / step),
            math.ceil((start + extent - origin) / step) - 1)


EMPTY = (0, -1)


@dataclass(frozen=True)
class IndexRanges:
    """Candidate cell ranges for a crop pair at one granularity.

    ``k_range``/``l_range`` are the view-1 cells touching the overlap region;
    :meth:`keys_for` gives the view-2 rows/columns touching one query cell.
    All ranges are closed and clamped to the grid; ``(0, -1)`` is empty.
    """

    crop1: CropBox
    crop2: CropBox
    grid: PatchGrid
    c: int
    k_range: Tuple[int, int]
    l_range: Tuple[int, int]

    @property
    def empty(self) -> bool:
        return self.k_range[0] > self.k_range[1] or self.l_range[0] > self.l_range[1]

    def queries(self) -> List[Cell]:
        return [(k, l)
                for k in range(self.k_range[0], self.k_range[1] + 1)
                for l in range(self.l_range[0], self.l_range[1] + 1)]

    def keys_for(self, k: int, l: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        if self.empty:
            return EMPTY, EMPTY
        rows, cols = self.grid.cells(self.c)
        w1, h1 = patch_footprint(self.crop1, self.grid, self.c)
        w2, h2 = patch_footprint(self.crop2, self.grid, self.c)
        lc = _content_col(self.crop1, l, cols)
        s = _clamp_range(*_span(k * h1 + self.crop1.y, h1, self.crop2.y, h2), rows)
        t = _clamp_range(*_span(lc * w1 + self.crop1.x, w1, self.crop2.x, w2), cols)
        if self.crop2.hflip:
            t = _mirror_range(t, cols)
        return s, t


def overlap_index_ranges(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int) -> IndexRanges:
    rows, cols = grid.cells(c)
    region = overlap_region(crop1, crop2)
    if region is None:
        return IndexRanges(crop1, crop2, grid, c, EMPTY, EMPTY)
    w1, h1 = patch_footprint(crop1, grid, c)
    k = _clamp_range(*_span(region.y, region.h, crop1.y, h1), rows)
    l = _clamp_range(*_span(region.x, region.w, crop1.x, w1), cols)
    if crop1.hflip:
        l = _mirror_range(l, cols)
    return IndexRanges(crop1, crop2, grid, c, k, l)


def relative_overlap_score(rect1: Rect, rect2: Rect) -> float:
    """Intersection area over the summed areas of both rects."""
    total = rect1.area + rect2.area
    if total == 0:
        return 0.0
    return _overlap_area(rect1, rect2) / total


def _candidate_pairs(ranges: IndexRanges):
    for k, l in ranges.queries():
        (s0, s1), (t0, t1) = ranges.keys_for(k, l)
        yield (k, l), [(s, t) for s in range(s0, s1 + 1) for t in range(t0, t1 + 1)]


def _normalized_table(crop1, crop2, grid, c, score) -> CorrespondenceTable:
    rows, cols = grid.cells(c)
    table = CorrespondenceTable(c, rows, cols)
    ranges = overlap_index_ranges(crop1, crop2, grid, c)
    for (k, l), candidates in _candidate_pairs(ranges):
        r1 = patch_rect(crop1, grid, c, k, l)
        scored = []
        for s, t in candidates:
            v = score(r1, patch_rect(crop2, grid, c, s, t))
            if v > 0.0:
                scored.append((s, t, v))
        if not scored:
            continue
        total = math.fsum(v for _, _, v in scored)
        table.entries[(k, l)] = [(s, t, v / total) for s, t, v in scored]
    return table


def correspondence_weights(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int) -> CorrespondenceTable:
    """Overlap-area weights of every view-1 cell over the view-2 cells it touches."""
    return _normalized_table(crop1, crop2, grid, c, _overlap_area)


def relative_metric_weights(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int) -> CorrespondenceTable:
    """Same table built by normalizing :func:`relative_overlap_score` instead of raw areas.

    Key cells all have one size, so the denominators cancel and the result
    must match :func:`correspondence_weights`.
    """
    return _normalized_table(crop1, crop2, grid, c, relative_overlap_score)


@dataclass(frozen=True)
class EdgeRatios:
    """Overlap-area shares of view-1 cells inside one view-2 key cell.

    ``e_w`` runs left to right over the view-1 columns ``cols`` (taken at
    the top-most overlapping row), ``e_h`` top to bottom over ``rows`` (at
    the left-most overlapping column). Indices are source-order (unflipped)
    view-1 columns/rows.
    """

    e_w: List[float]
    e_h: List[float]
    cols: List[int]
    rows: List[int]


def _key_overlaps(crop1, crop2, grid, c, key):
    rows, cols = grid.cells(c)
    kr = patch_rect(crop2, grid, c, *key)
    w1, h1 = patch_footprint(crop1, grid, c)
    k0, k1 = _clamp_range(*_span(kr.y, kr.h, crop1.y, h1), rows)
    l0, l1 = _clamp_range(*_span(kr.x, kr.w, crop1.x, w1), cols)
    areas = {}
    for k in range(k0, k1 + 1):
        for lc in range(l0, l1 + 1):
            r1 = patch_rect(crop1, grid, c, k, _content_col(crop1, lc, cols))
            a = _overlap_area(r1, kr)
            if a > 0.0:
                areas[(k, lc)] = a
    return kr, areas


def edge_ratios(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int,
                key: Cell) -> EdgeRatios:
    _, areas = _key_overlaps(crop1, crop2, grid, c, key)
    if not areas:
        raise NoOverlapError(f"no overlap at key {key}")
    top = min(k for k, _ in areas)
    left = min(lc for _, lc in areas)
    cols = sorted(lc for k, lc in areas if k == top)
    rows = sorted(k for k, lc in areas if lc == left)
    row_areas = [areas[(top, lc)] for lc in cols]
    col_areas = [areas[(k, left)] for k in rows]
    sw, sh = math.fsum(row_areas), math.fsum(col_areas)
    return EdgeRatios([a / sw for a in row_areas], [a / sh for a in col_areas], cols, rows)


@dataclass(frozen=True)
class LocalizedCell:
    """Recovered vs. true top-left corner of one view-1 cell, in view-2 crop pixels."""

    k: int
    l: int
    x: float
    y: float
    true_x: float
    true_y: float
    valid_x: bool
    valid_y: bool

    @property
    def error_x(self) -> float:
        return abs(self.x - self.true_x)

    @property
    def error_y(self) -> float:
        return abs(self.y - self.true_y)


def localize(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int,
             key: Cell) -> List[LocalizedCell]:
    """Recover view-1 cell positions from area ratios inside one key cell.

    The recovered corner is the right (bottom) edge reached by the cumulative
    ratio, minus one view-1 cell width (height). That is only the true edge
    when the cell ends inside the key cell and view 1 spans the key cell along
    that axis, which ``valid_x``/``valid_y`` mark.
    Coordinates are relative to the unflipped view-2 crop.
    """
    ratios = edge_ratios(crop1, crop2, grid, c, key)
    rows, cols = grid.cells(c)
    w1, h1 = patch_footprint(crop1, grid, c)
    w2, h2 = patch_footprint(crop2, grid, c)
    u_key, v_key = key[0], _content_col(crop2, key[1], cols)

    xs, acc = [], 0.0
    for e in ratios.e_w:
        acc += e
        xs.append((v_key + acc) * w2 - w1)
    ys, acc = [], 0.0
    for e in ratios.e_h:
        acc += e
        ys.append((u_key + acc) * h2 - h1)

    kr = patch_rect(crop2, grid, c, *key)
    # Ratios only measure true offsets when view 1 spans the whole key cell
    # along that axis; otherwise they are stretched over a partial extent.
    spans_x = crop1.x <= kr.x + DEGENERATE_EPS and crop1.x + crop1.w >= kr.right - DEGENERATE_EPS
    spans_y = crop1.y <= kr.y + DEGENERATE_EPS and crop1.y + crop1.h >= kr.bottom - DEGENERATE_EPS
    out = []
    for i, k in enumerate(ratios.rows):
        for j, lc in enumerate(ratios.cols):
            l = _content_col(crop1, lc, cols)
            r1 = patch_rect(crop1, grid, c, k, l)
            out.append(LocalizedCell(
                k, l, xs[j], ys[i],
                r1.x - crop2.x, r1.y - crop2.y,
                spans_x and r1.right <= kr.right + DEGENERATE_EPS,
                spans_y and r1.bottom <= kr.bottom + DEGENERATE_EPS,
            ))
    return out


def correspondence_tables(crop1: CropBox, crop2: CropBox, grid: PatchGrid,
                          granularities) -> dict:
    """``{c: correspondence_weights(...)}`` for every granularity."""
    return {c: correspondence_weights(crop1, crop2, grid, c) for c in granularities}
