#!/usr/bin/env python3
"""Walkthrough: checkpoint averaging and high-resolution image slicing.

    python3 demos/04_merging_and_slicing.py
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from migkit import (
    BBox,
    GridSpec,
    TensorArchive,
    default_grid,
    diff,
    map_back,
    merge,
    read_archive,
    slice_grid,
    to_group_instance,
    write_archive,
)
from migkit.hislicer import slice_image

# --- 1. weighted elementwise checkpoint averaging -------------------------------

rng = np.random.default_rng(3)
stage1 = TensorArchive(
    tensors={"attn.weight": rng.normal(size=(8, 8)).astype(np.float32),
             "mlp.weight": rng.normal(size=(16, 4)).astype(np.float32)},
    meta={"stage": 1},
)
stage2 = TensorArchive(
    tensors={k: v + 0.1 for k, v in stage1.tensors.items()},
    meta={"stage": 2},
)

merged = merge([stage1, stage2])                      # uniform 50/50
lopsided = merge([stage1, stage2], weights=[0.8, 0.2])
print("uniform merge of x and x+0.1 sits halfway:",
      float(merged.tensors["attn.weight"][0, 0] - stage1.tensors["attn.weight"][0, 0]))
print("0.8/0.2 merge leans toward the first:",
      float(lopsided.tensors["attn.weight"][0, 0] - stage1.tensors["attn.weight"][0, 0]))

with tempfile.TemporaryDirectory() as tmp:
    for name, arc in (("s1.arc", stage1), ("s2.arc", stage2), ("avg.arc", merged)):
        write_archive(arc, Path(tmp) / name)
    report = diff(read_archive(Path(tmp) / "avg.arc"), read_archive(Path(tmp) / "s1.arc"))
    print("per-tensor deltas vs stage-1:",
          {k: round(d.max_abs, 3) for k, d in report.per_tensor.items()})

# --- 2. slicing one high-resolution image into a group-grounding problem --------

W, H = 2048, 1536
print(f"\ndefault grid for {W}x{H}: {default_grid(W, H)}")
grid = slice_grid(W, H, GridSpec(2, 2))
print("tiles (row-major):", [(t.x1, t.y1, t.x2, t.y2) for t in grid.tiles])

# a box found on tile (1,1) maps back to source coordinates by exact translation
local = BBox(100, 100, 200, 200)
print(f"{local.as_tuple()} on tile 3 -> {map_back(3, local, grid).as_tuple()} in source")

with tempfile.TemporaryDirectory() as tmp:
    src = Path(tmp) / "panorama.png"
    Image.new("RGB", (W, H), (90, 140, 200)).save(src)
    tiles = slice_image(src, grid, Path(tmp) / "tiles")
    inst = to_group_instance("where is the red kite?", tiles, grid, src)
    print(f"group-grounding instance over {len(inst.images)} tiles; the tile map "
          f"rides in meta: rows={inst.meta['slicer']['rows']} "
          f"cols={inst.meta['slicer']['cols']}")
