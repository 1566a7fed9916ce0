import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgc.geometry import (
    ConfigurationError,
    CropBox,
    NoOverlapError,
    PatchGrid,
    Rect,
    correspondence_weights,
    edge_ratios,
    localize,
    overlap_index_ranges,
    overlap_region,
    patch_footprint,
    patch_rect,
    relative_metric_weights,
    relative_overlap_score,
)
from mgc.oracle import brute_correspondences, max_table_diff, overlap_area_tensor

GRID = PatchGrid()
FULL = CropBox(0, 0, 224, 224)
SHIFT8 = CropBox(8, 0, 224, 224)
QUARTER = CropBox(0, 0, 112, 112)


@pytest.mark.parametrize("crop,c,expected", [
    (FULL, 1, (16, 16)),
    (FULL, 2, (32, 32)),
    (CropBox(10, 20, 112, 140), 1, (8, 10)),
])
def test_patch_footprint(crop, c, expected):
    assert patch_footprint(crop, GRID, c) == pytest.approx(expected, abs=1e-12)


def test_footprint_rejects_non_divisor():
    with pytest.raises(ConfigurationError):
        patch_footprint(FULL, GRID, 3)


def test_patch_rect_examples():
    assert patch_rect(FULL, GRID, 1, 0, 1) == Rect(16, 0, 16, 16)
    assert patch_rect(SHIFT8, GRID, 1, 0, 0) == Rect(8, 0, 16, 16)
    assert patch_rect(FULL.flipped(), GRID, 1, 0, 0) == Rect(208, 0, 16, 16)


def test_patch_rect_out_of_range():
    with pytest.raises(IndexError):
        patch_rect(FULL, GRID, 1, 14, 0)
    with pytest.raises(IndexError):
        patch_rect(FULL, GRID, 2, 0, -1)


def test_flipped_rect_matches_flipped_pixels():
    # Paint each source column with its index, flip the crop's pixels, and
    # check view cell (0, 0) sees the content of the mirrored source cell.
    src = np.tile(np.arange(224, dtype=float), (224, 1))
    view = src[:, ::-1]
    r = patch_rect(FULL.flipped(), GRID, 1, 0, 0)
    seen = view[0:16, 0:16]
    assert seen.min() == r.x and seen.max() == r.right - 1


def test_overlap_region_examples():
    assert overlap_region(FULL, SHIFT8) == Rect(8, 0, 216, 224)
    assert overlap_region(CropBox(0, 0, 100, 100), CropBox(100, 0, 50, 50)) is None
    assert overlap_region(FULL, QUARTER) == Rect(0, 0, 112, 112)


def _nonzero_keys(crop1, crop2, c, k, l):
    area = overlap_area_tensor(crop1, crop2, GRID, c)
    s, t = np.nonzero(area[k, l])
    return set(zip(s.tolist(), t.tolist()))


def test_index_ranges_examples():
    r = overlap_index_ranges(FULL, SHIFT8, GRID, 1)
    assert r.keys_for(0, 1) == ((0, 0), (0, 1))
    assert _nonzero_keys(FULL, SHIFT8, 1, 0, 1) == {(0, 0), (0, 1)}
    assert overlap_index_ranges(FULL, FULL, GRID, 1).keys_for(3, 5) == ((3, 3), (5, 5))
    r = overlap_index_ranges(FULL, QUARTER, GRID, 1)
    assert r.keys_for(0, 0) == ((0, 1), (0, 1))
    assert _nonzero_keys(FULL, QUARTER, 1, 0, 0) == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_index_ranges_empty_when_disjoint():
    r = overlap_index_ranges(CropBox(0, 0, 50, 50), CropBox(60, 60, 50, 50), GRID, 1)
    assert r.empty and r.queries() == []


def test_relative_overlap_score_examples():
    a = Rect(0, 0, 16, 16)
    assert relative_overlap_score(a, a) == 0.5
    assert relative_overlap_score(a, Rect(8, 0, 16, 16)) == 0.25
    assert relative_overlap_score(a, Rect(40, 40, 5, 5)) == 0.0


def test_correspondence_examples():
    for c in (1, 2, 7, 14):
        table = correspondence_weights(FULL, FULL, GRID, c)
        assert len(table) == (14 // c) ** 2
        for (k, l), keys in table.entries.items():
            assert keys == [(k, l, 1.0)]
    t = correspondence_weights(FULL, SHIFT8, GRID, 1)
    assert dict(((s, u), w) for s, u, w in t.keys(0, 1)) == pytest.approx({(0, 0): 0.5, (0, 1): 0.5}, abs=1e-12)
    t = correspondence_weights(FULL, QUARTER, GRID, 1)
    assert dict(((s, u), w) for s, u, w in t.keys(0, 0)) == pytest.approx(
        {(0, 0): 0.25, (0, 1): 0.25, (1, 0): 0.25, (1, 1): 0.25}, abs=1e-12)


def test_disjoint_crops_give_empty_table():
    t = correspondence_weights(CropBox(0, 0, 100, 100), CropBox(100, 0, 50, 50), GRID, 1)
    assert len(t) == 0 and not t.has_overlap(0, 0)


def test_jsonl_round_trip():
    t = correspondence_weights(FULL, CropBox(5.5, 3.25, 190, 201, True), GRID, 2)
    lines = list(t.to_jsonl())
    assert len(lines) == len(t)
    back = type(t).from_jsonl(lines, t.rows, t.cols)
    assert max_table_diff(t, back) == 0.0


def test_edge_ratio_examples():
    r = edge_ratios(FULL, SHIFT8, GRID, 1, (0, 0))
    assert r.e_w == pytest.approx([0.5, 0.5], abs=1e-12)
    r = edge_ratios(FULL, FULL, GRID, 1, (4, 9))
    assert r.e_w == [1.0] and r.e_h == [1.0]
    r = edge_ratios(FULL, QUARTER, GRID, 1, (0, 0))
    assert r.e_w == [1.0] and r.e_h == [1.0]


def test_edge_ratios_no_overlap():
    with pytest.raises(NoOverlapError):
        edge_ratios(CropBox(0, 0, 100, 100), CropBox(150, 150, 100, 100), GRID, 1, (0, 0))


def test_localize_examples():
    (only,) = localize(FULL, FULL, GRID, 1, (3, 5))
    assert only.x == pytest.approx(5 * 16) and only.valid_x and only.valid_y
    assert only.error_x == pytest.approx(0, abs=1e-9)

    cells = localize(FULL, SHIFT8, GRID, 1, (0, 0))
    by_col = {cell.l: cell for cell in cells}
    assert by_col[0].x == pytest.approx(-8) and by_col[0].valid_x
    assert by_col[0].true_x == pytest.approx(-8)
    assert by_col[1].x == pytest.approx(0) and not by_col[1].valid_x
    assert by_col[1].true_x == pytest.approx(8)

    (only,) = localize(FULL, QUARTER, GRID, 1, (0, 0))
    assert only.x == pytest.approx(-8) and not only.valid_x


# -- properties ------------------------------------------------------------------

coord = st.floats(0, 200, allow_nan=False)
size = st.floats(20, 256, allow_nan=False)
crops = st.builds(CropBox, coord, coord, size, size, st.booleans())
grans = st.sampled_from([1, 2, 7, 14])


@settings(max_examples=150, deadline=None)
@given(crops, crops, grans)
def test_matches_exact_oracle_and_normalizes(c1, c2, c):
    table = correspondence_weights(c1, c2, GRID, c)
    assert max_table_diff(table, brute_correspondences(c1, c2, GRID, c)) <= 1e-9
    for keys in table.entries.values():
        assert math.fsum(w for _, _, w in keys) == pytest.approx(1.0, abs=1e-9)
        assert all(0 < w <= 1 for _, _, w in keys)
        rows, cols = table.rows, table.cols
        assert all(0 <= s < rows and 0 <= t < cols for s, t, _ in keys)


@settings(max_examples=100, deadline=None)
@given(crops, crops, grans)
def test_relative_metric_route_agrees(c1, c2, c):
    a = correspondence_weights(c1, c2, GRID, c)
    b = relative_metric_weights(c1, c2, GRID, c)
    assert set(a.entries) == set(b.entries)
    assert max_table_diff(a, b) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(crops, grans)
def test_identical_crops_identity(crop, c):
    table = correspondence_weights(crop, crop, GRID, c)
    n = 14 // c
    assert len(table) == n * n
    assert all(keys == [(k, l, 1.0)] for (k, l), keys in table.entries.items())


@settings(max_examples=100, deadline=None)
@given(crops, crops, grans)
def test_flip_equivariance(c1, c2, c):
    a = correspondence_weights(c1, c2, GRID, c)
    b = correspondence_weights(c1, c2.flipped(), GRID, c)
    n = a.cols
    assert set(a.entries) == set(b.entries)
    for q in a.entries:
        wa = sorted((s, t, w) for s, t, w in a.keys(*q))
        wb = sorted((s, n - 1 - t, w) for s, t, w in b.keys(*q))
        assert wa == wb


@settings(max_examples=100, deadline=None)
@given(crops, crops, grans)
def test_range_soundness(c1, c2, c):
    ranges = overlap_index_ranges(c1, c2, GRID, c)
    table = correspondence_weights(c1, c2, GRID, c)
    k0, k1 = ranges.k_range
    l0, l1 = ranges.l_range
    for (k, l), keys in table.entries.items():
        assert k0 <= k <= k1 and l0 <= l <= l1
        (s0, s1), (t0, t1) = ranges.keys_for(k, l)
        assert all(s0 <= s <= s1 and t0 <= t <= t1 for s, t, _ in keys)


@settings(max_examples=100, deadline=None)
@given(crops, crops)
def test_granularity_consistency(c1, c2):
    fine = overlap_area_tensor(c1, c2, GRID, 1)
    coarse = correspondence_weights(c1, c2, GRID, 2)
    merged = fine.reshape(7, 2, 7, 2, 7, 2, 7, 2).sum(axis=(1, 3, 5, 7))
    for (k, l), keys in coarse.entries.items():
        total = merged[k, l].sum()
        for s, t, w in keys:
            assert w == pytest.approx(merged[k, l, s, t] / total, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(crops, crops, grans)
def test_same_height_rows_and_width_ratios(c1, c2, c):
    rows, cols = GRID.U // c, GRID.V // c
    for key in [(s, t) for s in range(rows) for t in range(cols)][:: max(1, rows * cols // 6)]:
        try:
            r = edge_ratios(c1, c2, GRID, c, key)
        except NoOverlapError:
            continue
        kr = patch_rect(c2, GRID, c, *key)
        top = r.rows[0]
        heights, widths = set(), []
        for lc in r.cols:
            l = cols - 1 - lc if c1.hflip else lc
            cell = patch_rect(c1, GRID, c, top, l)
            heights.add(min(cell.bottom, kr.bottom) - max(cell.y, kr.y))
            widths.append(min(cell.right, kr.right) - max(cell.x, kr.x))
        assert len(heights) == 1
        assert r.e_w == pytest.approx([w / math.fsum(widths) for w in widths], abs=1e-9)
        assert math.fsum(r.e_w) == pytest.approx(1, abs=1e-9)
        assert math.fsum(r.e_h) == pytest.approx(1, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(crops, crops, grans, st.data())
def test_localization_exact_when_valid(c1, c2, c, data):
    rows, cols = GRID.U // c, GRID.V // c
    key = (data.draw(st.integers(0, rows - 1)), data.draw(st.integers(0, cols - 1)))
    try:
        cells = localize(c1, c2, GRID, c, key)
    except NoOverlapError:
        return
    for cell in cells:
        if cell.valid_x:
            assert cell.error_x <= 1e-6
        if cell.valid_y:
            assert cell.error_y <= 1e-6
