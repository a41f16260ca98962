"""Slice one high-resolution grounding problem into a group-grounding instance.

The grid covers the source exactly; with zero overlap the tiles are disjoint.
Uneven divisions hand the extra pixels to the earlier tiles, keeping all tiles
within one pixel of each other. Answers found on a tile map back to source
coordinates by exact integer translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .benchdata import ImageRef, Instance, TaskKind
from .geometry import BBox

DEFAULT_TILE_SIDE = 1024  # typical model input resolution; config-exposed


class SlicerError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    overlap: int = 0

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SlicerError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.overlap < 0:
            raise SlicerError("overlap must be >= 0")


@dataclass(frozen=True)
class Tile:
    row: int
    col: int
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1


@dataclass(frozen=True)
class TileGrid:
    rows: int
    cols: int
    overlap: int
    width: int
    height: int
    tiles: tuple[Tile, ...]  # row-major


def _boundaries(extent: int, parts: int) -> list[int]:
    # ceiling-first split: the first (extent mod parts) tiles get one extra pixel
    base, extra = divmod(extent, parts)
    edges = [0]
    for j in range(parts):
        edges.append(edges[-1] + base + (1 if j < extra else 0))
    return edges


def slice_grid(width: int, height: int, spec: GridSpec) -> TileGrid:
    """Tile rects in source pixel coordinates, row-major."""
    if width < 1 or height < 1:
        raise SlicerError(f"image dimensions must be positive, got {width}x{height}")
    if spec.rows * spec.cols < 2:
        raise SlicerError("slicing needs at least 2 tiles; use the image directly")
    if spec.cols > width or spec.rows > height:
        raise SlicerError(f"{spec.rows}x{spec.cols} grid exceeds {width}x{height} image")
    xs = _boundaries(width, spec.cols)
    ys = _boundaries(height, spec.rows)
    min_tile = min(width // spec.cols, height // spec.rows)
    if spec.overlap >= min_tile:
        raise SlicerError(f"overlap {spec.overlap} >= smallest tile side {min_tile}")
    tiles = []
    for i in range(spec.rows):
        for j in range(spec.cols):
            tiles.append(Tile(
                row=i, col=j,
                x1=max(0, xs[j] - spec.overlap),
                y1=max(0, ys[i] - spec.overlap),
                x2=min(width, xs[j + 1] + spec.overlap),
                y2=min(height, ys[i + 1] + spec.overlap),
            ))
    return TileGrid(rows=spec.rows, cols=spec.cols, overlap=spec.overlap,
                    width=width, height=height, tiles=tuple(tiles))


def default_grid(width: int, height: int, max_side: int = DEFAULT_TILE_SIDE) -> GridSpec:
    """Smallest grid keeping every tile's long side within ``max_side``."""
    return GridSpec(rows=math.ceil(height / max_side), cols=math.ceil(width / max_side))


def map_back(tile_index: int, box: BBox, grid: TileGrid) -> BBox:
    """Tile-local pixel box translated into source pixel coordinates."""
    if not 0 <= tile_index < len(grid.tiles):
        raise SlicerError(f"tile index {tile_index} out of range")
    tile = grid.tiles[tile_index]
    if box.x2 > tile.width or box.y2 > tile.height or box.x1 < 0 or box.y1 < 0:
        raise SlicerError(
            f"box {box.as_tuple()} exceeds tile bounds {tile.width}x{tile.height}"
        )
    return box.translate(tile.x1, tile.y1)


def slice_image(image_path: str | Path, grid: TileGrid, out_dir: str | Path) -> list[Path]:
    """Write one crop file per tile (row-major) and return the paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    paths = []
    with Image.open(image_path) as im:
        if im.size != (grid.width, grid.height):
            raise SlicerError(
                f"grid was computed for {grid.width}x{grid.height}, image is "
                f"{im.size[0]}x{im.size[1]}"
            )
        rgb = im.convert("RGB")
        for k, tile in enumerate(grid.tiles):
            crop = rgb.crop((tile.x1, tile.y1, tile.x2, tile.y2))
            path = out_dir / f"{stem}.tile{k:02d}_r{tile.row}c{tile.col}.png"
            crop.save(path)
            paths.append(path)
    return paths


def to_group_instance(question: str, tile_paths: list[str | Path], grid: TileGrid,
                      source_path: str | Path, instance_id: str = "sliced-0") -> Instance:
    """Group-grounding instance over the tile crops; the tile-to-source mapping
    travels in ``meta`` so answers can be projected back. Carries no ground
    truth: it is an inference input, not a benchmark item."""
    if len(tile_paths) != len(grid.tiles):
        raise SlicerError(f"{len(tile_paths)} tile files for {len(grid.tiles)} tiles")
    images = [ImageRef(path=str(p), width=t.width, height=t.height)
              for p, t in zip(tile_paths, grid.tiles)]
    inst = Instance(
        id=instance_id,
        task=TaskKind.GROUP_GROUNDING,
        images=images,
        query_text=question,
        ground_truth=[],
        meta={"slicer": {
            "source": str(source_path),
            "rows": grid.rows, "cols": grid.cols, "overlap": grid.overlap,
            "width": grid.width, "height": grid.height,
            "tiles": [[t.x1, t.y1, t.x2, t.y2] for t in grid.tiles],
        }},
    )
    inst.validate(require_ground_truth=False)
    return inst


def grid_from_instance(inst: Instance) -> TileGrid:
    """Rebuild the tile grid recorded by ``to_group_instance``."""
    try:
        m = inst.meta["slicer"]
        tiles = []
        for k, (x1, y1, x2, y2) in enumerate(m["tiles"]):
            tiles.append(Tile(row=k // m["cols"], col=k % m["cols"],
                              x1=int(x1), y1=int(y1), x2=int(x2), y2=int(y2)))
        return TileGrid(rows=int(m["rows"]), cols=int(m["cols"]),
                        overlap=int(m["overlap"]), width=int(m["width"]),
                        height=int(m["height"]), tiles=tuple(tiles))
    except (KeyError, TypeError, ValueError) as e:
        raise SlicerError(f"instance {inst.id} carries no tile mapping: {e}") from e
