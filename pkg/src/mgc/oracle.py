"""Slow, independent reference implementations used by the test-suite.

Deliberately shares no code with :mod:`mgc.geometry` or :mod:`mgc.contrast`:
cell edges are rebuilt from ``linspace``-style fractions, overlaps come from
exhaustive all-pairs products, and the loss is an explicit loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .types import DEGENERATE_EPS, CorrespondenceTable, CropBox, PatchGrid, Rect


@dataclass(frozen=True)
class RasterSpec:
    cell: float = 0.25

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("raster cell must be positive")


def exact_overlap_area(r1: Rect, r2: Rect) -> float:
    dx = max(0.0, min(r1.x + r1.w, r2.x + r2.w) - max(r1.x, r2.x))
    dy = max(0.0, min(r1.y + r1.h, r2.y + r2.h) - max(r1.y, r2.y))
    return dx * dy


def raster_overlap_area(r1: Rect, r2: Rect, spec: RasterSpec = RasterSpec()) -> float:
    """Count raster sample points (cell centres) falling inside both rects."""
    d = spec.cell
    x0, x1 = min(r1.x, r2.x), max(r1.x + r1.w, r2.x + r2.w)
    y0, y1 = min(r1.y, r2.y), max(r1.y + r1.h, r2.y + r2.h)
    xs = (np.floor(x0 / d) + np.arange(int(math.ceil((x1 - x0) / d)) + 2) + 0.5) * d
    ys = (np.floor(y0 / d) + np.arange(int(math.ceil((y1 - y0) / d)) + 2) + 0.5) * d
    px, py = np.meshgrid(xs, ys)
    inside = np.ones_like(px, dtype=bool)
    for r in (r1, r2):
        inside &= (px >= r.x) & (px < r.x + r.w) & (py >= r.y) & (py < r.y + r.h)
    return float(inside.sum()) * d * d


def _edges(origin: float, extent: float, n: int, flip: bool) -> Tuple[np.ndarray, np.ndarray]:
    # Left/right edges of the n cells in view order.
    frac = np.arange(n + 1, dtype=np.float64) / n
    e = origin + extent * frac
    lo, hi = e[:-1], e[1:]
    if flip:
        lo, hi = lo[::-1], hi[::-1]
    return lo, hi


def _axis_matrix(lo1, hi1, lo2, hi2) -> np.ndarray:
    d = np.minimum(hi1[:, None], hi2[None, :]) - np.maximum(lo1[:, None], lo2[None, :])
    return np.where(d > DEGENERATE_EPS, d, 0.0)


def _cells(grid: PatchGrid, c: int) -> Tuple[int, int]:
    if grid.U % c or grid.V % c:
        raise ValueError(f"granularity {c} does not divide the grid")
    return grid.U // c, grid.V // c


def _table_from_areas(area: np.ndarray, c: int) -> CorrespondenceTable:
    # area[k, l, s, t]
    rows, cols = area.shape[0], area.shape[1]
    table = CorrespondenceTable(c, rows, cols)
    totals = area.sum(axis=(2, 3))
    for k in range(rows):
        for l in range(cols):
            if totals[k, l] <= 0:
                continue
            s_idx, t_idx = np.nonzero(area[k, l])
            table.entries[(k, l)] = [(int(s), int(t), float(area[k, l, s, t] / totals[k, l]))
                                     for s, t in zip(s_idx, t_idx)]
    return table


def overlap_area_tensor(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int) -> np.ndarray:
    """All-pairs exact overlap areas, shape (rows, cols, rows, cols), view indices."""
    rows, cols = _cells(grid, c)
    x1 = _edges(crop1.x, crop1.w, cols, crop1.hflip)
    y1 = _edges(crop1.y, crop1.h, rows, False)
    x2 = _edges(crop2.x, crop2.w, cols, crop2.hflip)
    y2 = _edges(crop2.y, crop2.h, rows, False)
    ox = _axis_matrix(*x1, *x2)  # (l, t)
    oy = _axis_matrix(*y1, *y2)  # (k, s)
    return oy[:, None, :, None] * ox[None, :, None, :]


def brute_correspondences(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int) -> CorrespondenceTable:
    return _table_from_areas(overlap_area_tensor(crop1, crop2, grid, c), c)


def _axis_counts(lo1, hi1, lo2, hi2, d: float) -> np.ndarray:
    # Sample points at raster-cell centres; count those inside both intervals.
    start = math.floor(min(lo1.min(), lo2.min()) / d)
    stop = math.ceil(max(hi1.max(), hi2.max()) / d)
    p = (np.arange(start, stop + 1, dtype=np.float64) + 0.5) * d
    in1 = (p[None, :] >= lo1[:, None]) & (p[None, :] < hi1[:, None])
    in2 = (p[None, :] >= lo2[:, None]) & (p[None, :] < hi2[:, None])
    return in1.astype(np.int64) @ in2.T.astype(np.int64)


def raster_correspondences(crop1: CropBox, crop2: CropBox, grid: PatchGrid, c: int,
                           spec: RasterSpec = RasterSpec()) -> CorrespondenceTable:
    """Correspondence table from sub-pixel raster counts.

    A point lies in a rectangle intersection iff its x lies in both x-intervals
    and its y in both y-intervals, so the 2-D count over the raster lattice is
    the product of the per-axis counts; that keeps this path fast without
    changing what is counted.
    """
    rows, cols = _cells(grid, c)
    cx = _axis_counts(*_edges(crop1.x, crop1.w, cols, crop1.hflip),
                      *_edges(crop2.x, crop2.w, cols, crop2.hflip), spec.cell)
    cy = _axis_counts(*_edges(crop1.y, crop1.h, rows, False),
                      *_edges(crop2.y, crop2.h, rows, False), spec.cell)
    area = (cy[:, None, :, None] * cx[None, :, None, :]).astype(np.float64) * spec.cell ** 2
    return _table_from_areas(area, c)


def max_table_diff(a: CorrespondenceTable, b: CorrespondenceTable) -> float:
    """Largest per-entry absolute weight difference; a missing entry counts as 0."""
    da, db = a.as_dict(), b.as_dict()
    worst = 0.0
    for key in da.keys() | db.keys():
        worst = max(worst, abs(da.get(key, 0.0) - db.get(key, 0.0)))
    return worst


# -- loss ---------------------------------------------------------------------

def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def reference_loss(queries: Sequence[Sequence[Tuple[np.ndarray, Mapping[int, float]]]],
                   keys: np.ndarray, tau: float) -> float:
    """Soft-target InfoNCE by explicit loops.

    ``queries[i]`` lists (q, {key_row: weight}) for image ``i``; ``keys`` holds
    every key vector of every image (the shared denominator).
    """
    n = len(queries)
    total = 0.0
    for per_image in queries:
        for q, targets in per_image:
            logits = [(_cos(q, z) / tau) for z in keys]
            m = max(logits)
            log_den = m + math.log(math.fsum(math.exp(v - m) for v in logits))
            for j, w in targets.items():
                total -= w * (logits[j] - log_den)
    return total / n


# -- finite differences -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: Tuple[int, int]
    worst_name: str
    checked: int
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: int = 0


class NonFiniteError(ArithmeticError):
    pass


def fd_gradient_check(loss_fn: Callable[[], float],
                      params: Sequence,
                      analytic: Sequence,
                      eps: float = 1e-5,
                      n_samples: int = 200,
                      rng: Optional[np.random.Generator] = None,
                      names: Optional[Sequence[str]] = None,
                      accept: Optional[Callable[[], bool]] = None,
                      order: int = 2,
                      floor: float = 1e-12) -> GradCheckReport:
    """Central-difference check of ``analytic`` gradients for in-place-mutable ``params``.

    ``params`` are numpy arrays or torch tensors (mutated and restored in place);
    ``analytic`` are matching gradient arrays. ``n_samples`` entries are drawn
    uniformly without replacement (all of them if fewer exist).

    ``accept`` is called after each perturbed evaluation; returning False marks
    the stencil as straddling a non-differentiable point (e.g. a ReLU kink),
    and the entry is replaced by another draw.

    ``order=4`` uses the five-point stencil
    (f(-2e) - 8 f(-e) + 8 f(e) - f(2e)) / 12e, whose O(e^4) truncation error
    allows a larger ``eps`` and so less rounding noise on large losses.

    Relative error is |a - n| / max(|a|, |n|, floor); ``floor`` turns the test
    into an absolute one for gradients too small to resolve relatively.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets_h = (1.0, -1.0) if order == 2 else (1.0, -1.0, 2.0, -2.0)
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = [np.asarray(_as_numpy(g), dtype=np.float64).reshape(-1) for g in analytic]
    sizes = np.array([int(np.prod(np.shape(_as_numpy(p)))) for p in params])
    total = int(sizes.sum())
    draws = np.arange(total) if total <= n_samples else rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]

    an, nu, where, skipped = [], [], [], 0
    for flat_idx in draws:
        if len(an) >= n_samples:
            break
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        ei = int(flat_idx - offsets[pi])
        view = _flat_view(params[pi])
        orig = float(view[ei])
        values, ok = [], True
        for h in offsets_h:
            view[ei] = orig + h * eps
            values.append(float(loss_fn()))
            ok = ok and (accept is None or accept())
        view[ei] = orig
        g = grads[pi][ei]
        if not (all(math.isfinite(v) for v in values) and math.isfinite(g)):
            raise NonFiniteError(f"non-finite value at {names[pi]}[{ei}]")
        if not ok:
            skipped += 1
            continue
        if order == 2:
            numeric = (values[0] - values[1]) / (2 * eps)
        else:
            numeric = (8 * (values[0] - values[1]) - (values[2] - values[3])) / (12 * eps)
        an.append(g)
        nu.append(numeric)
        where.append((pi, ei))

    an, nu = np.array(an), np.array(nu)
    rel = np.abs(an - nu) / np.maximum(np.maximum(np.abs(an), np.abs(nu)), floor)
    worst = int(np.argmax(rel)) if rel.size else 0
    wi = where[worst] if where else (0, 0)
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, wi, names[wi[0]] if where else "",
                           len(an), an, nu, skipped)


def _as_numpy(x):
    if hasattr(x, "detach"):
        return x.detach().cpu().numpy()
    return x


def _flat_view(p):
    if hasattr(p, "detach"):
        return p.data.view(-1)
    return p.reshape(-1)
