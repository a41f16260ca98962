from __future__ import annotations

import numpy as np
import pytest

from conftest import write_image
from migkit.benchdata import TaskKind, load_dataset, save_dataset
from migkit.geometry import BBox
from migkit.hislicer import (
    GridSpec,
    SlicerError,
    default_grid,
    grid_from_instance,
    map_back,
    slice_grid,
    slice_image,
    to_group_instance,
)


def rects(grid):
    return [(t.x1, t.y1, t.x2, t.y2) for t in grid.tiles]


class TestSliceGrid:
    def test_even_division(self):
        grid = slice_grid(2048, 1536, GridSpec(2, 2))
        assert rects(grid) == [
            (0, 0, 1024, 768), (1024, 0, 2048, 768),
            (0, 768, 1024, 1536), (1024, 768, 2048, 1536),
        ]
        assert all(t.width == 1024 and t.height == 768 for t in grid.tiles)

    def test_uneven_division_feeds_earlier_tiles(self):
        grid = slice_grid(5, 5, GridSpec(2, 2))
        assert rects(grid) == [(0, 0, 3, 3), (3, 0, 5, 3), (0, 3, 3, 5), (3, 3, 5, 5)]
        widths = sorted({t.width for t in grid.tiles})
        assert widths == [2, 3]

    def test_single_tile_rejected(self):
        with pytest.raises(SlicerError, match="at least 2"):
            slice_grid(100, 100, GridSpec(1, 1))

    def test_row_major_order(self):
        grid = slice_grid(30, 20, GridSpec(2, 3))
        assert [(t.row, t.col) for t in grid.tiles] == \
            [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]

    def test_coverage_and_disjointness_randomized(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            w, h = int(rng.integers(4, 400)), int(rng.integers(4, 400))
            cols = int(rng.integers(1, min(4, w) + 1))
            rows = int(rng.integers(1, min(4, h) + 1))
            if rows * cols < 2:
                continue
            grid = slice_grid(w, h, GridSpec(rows, cols))
            area = sum(t.width * t.height for t in grid.tiles)
            assert area == w * h  # exact cover, no overlap at overlap 0
            xs = {x for t in grid.tiles for x in (t.x1, t.x2)}
            assert min(xs) == 0 and max(xs) == w

    def test_overlap_expands_and_clamps(self):
        grid = slice_grid(100, 100, GridSpec(2, 2, overlap=10))
        assert rects(grid)[0] == (0, 0, 60, 60)
        assert rects(grid)[3] == (40, 40, 100, 100)

    def test_overlap_as_big_as_tile_rejected(self):
        with pytest.raises(SlicerError, match="overlap"):
            slice_grid(100, 100, GridSpec(2, 2, overlap=50))

    def test_default_grid(self):
        assert default_grid(2048, 1536) == GridSpec(2, 2)
        assert default_grid(800, 600) == GridSpec(1, 1)
        assert default_grid(4100, 900) == GridSpec(1, 5)


class TestMapBack:
    GRID = slice_grid(2048, 1536, GridSpec(2, 2))

    def test_offset_addition(self):
        got = map_back(3, BBox(100, 100, 200, 200), self.GRID)  # tile (1,1)
        assert got.as_tuple() == (1124, 868, 1224, 968)

    def test_origin_tile_is_identity(self):
        box = BBox(5, 6, 7, 8)
        assert map_back(0, box, self.GRID) == box

    def test_round_trip_through_tile(self):
        source = BBox(1200, 900, 1300, 950)
        tile = self.GRID.tiles[3]
        local = source.translate(-tile.x1, -tile.y1)
        assert map_back(3, local, self.GRID) == source

    def test_box_outside_tile_rejected(self):
        with pytest.raises(SlicerError, match="exceeds tile"):
            map_back(0, BBox(0, 0, 2000, 10), self.GRID)

    def test_bad_tile_index_rejected(self):
        with pytest.raises(SlicerError, match="out of range"):
            map_back(9, BBox(0, 0, 1, 1), self.GRID)


class TestGroupInstance:
    def test_slice_files_and_instance(self, tmp_path):
        src = tmp_path / "big.png"
        write_image(src, 640, 480)
        grid = slice_grid(640, 480, GridSpec(2, 2))
        paths = slice_image(src, grid, tmp_path / "tiles")
        assert len(paths) == 4
        inst = to_group_instance("where is the tiny sign?", paths, grid, src)
        assert inst.task == TaskKind.GROUP_GROUNDING
        assert len(inst.images) == 4
        assert inst.images[0].width == 320 and inst.images[0].height == 240

    def test_meta_round_trips_through_save_load(self, tmp_path):
        src = tmp_path / "big.png"
        write_image(src, 100, 80)
        grid = slice_grid(100, 80, GridSpec(2, 2))
        paths = slice_image(src, grid, tmp_path / "tiles")
        inst = to_group_instance("q?", paths, grid, src)
        data = tmp_path / "sliced.jsonl"
        save_dataset([inst], data)
        loaded = load_dataset(data, require_ground_truth=False)
        assert loaded == [inst]
        rebuilt = grid_from_instance(loaded[0])
        assert rebuilt == grid

    def test_grid_dimension_mismatch_rejected(self, tmp_path):
        src = tmp_path / "small.png"
        write_image(src, 64, 48)
        grid = slice_grid(100, 80, GridSpec(2, 2))
        with pytest.raises(SlicerError, match="computed for"):
            slice_image(src, grid, tmp_path / "tiles")
