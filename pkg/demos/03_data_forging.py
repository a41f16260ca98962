#!/usr/bin/env python3
"""Walkthrough: training-data construction from single-image annotations.

Shows the four quality gates for region candidates, similarity-adaptive image
grouping over an embedding index, two structural task transforms, and the
two-stage training-mix manifest.

    python3 demos/03_data_forging.py
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from migkit import (
    AnnotatedObject,
    AnnotationRecord,
    BBox,
    EmbeddingIndex,
    ForgeConfig,
    TaskKind,
    adaptive_groups,
    filter_regions,
    make_task_set,
    stage_manifest,
)

cfg = ForgeConfig(seed=7)

# --- 1. region quality gates --------------------------------------------------

# an image qualifies only with more than 10 annotations; each region must have
# aspect in [0.5, 2], a 20-49% share of the image, and over 2000 pixels
objects = [AnnotatedObject("person", BBox(100, 100, 600, 500)),   # passes all gates
           AnnotatedObject("coin", BBox(0, 0, 40, 40)),            # far too small
           AnnotatedObject("fence", BBox(0, 0, 900, 120))]         # aspect 7.5
objects += [AnnotatedObject(f"prop{k}", BBox(0, 0, 30, 30)) for k in range(9)]
rich = AnnotationRecord("street.png", 1000, 800, objects)
kept = filter_regions(rich, cfg)
print(f"gates keep {[o.label for o in kept]} of {len(rich.objects)} annotations")

poor = AnnotationRecord("plain.png", 1000, 800, objects[:3])
print(f"an image with only {len(poor.objects)} boxes keeps "
      f"{len(filter_regions(poor, cfg))} (content-richness gate)")

# --- 2. adaptive similarity grouping -------------------------------------------

rng = np.random.default_rng(0)
vectors = rng.normal(size=(40, 32))
vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
index = EmbeddingIndex(dim=32, paths=[f"img{k:02d}.png" for k in range(40)],
                       vectors=vectors)

groups = adaptive_groups(index, cfg)
sizes = [len(g) for g in groups]
print(f"\n{len(index)} images -> {len(groups)} groups, sizes {sizes}")
print("every image lands in exactly one group:",
      sorted(p for g in groups for p in g) == sorted(index.paths))
print("same seed, same grouping:", groups == adaptive_groups(index, cfg))

# --- 3. structural task transforms ---------------------------------------------

with tempfile.TemporaryDirectory() as tmp:
    records = []
    for k in range(6):
        path = Path(tmp) / f"shot{k}.png"
        Image.new("RGB", (640, 480), (30 * k, 80, 120)).save(path)
        records.append(AnnotationRecord(
            str(path), 640, 480,
            [AnnotatedObject("dog", BBox(50, 60, 360, 330), caption="a sleepy dog")],
        ))

    common = make_task_set(records, TaskKind.COMMON_OBJECT, cfg)
    print(f"\ncommon-object transform: {len(common)} instances")
    inst = common[0]
    print(f"  images={len(inst.images)} targets={len(inst.ground_truth)} "
          f"label={inst.meta['label']}")
    print(f"  answer: {inst.answer[:70]}...")

    # tracking needs ordered frames of one sequence
    frames = []
    for f in range(12):
        path = Path(tmp) / f"frame{f:02d}.png"
        Image.new("RGB", (320, 240), (10 * f, 60, 60)).save(path)
        frames.append(AnnotationRecord(
            str(path), 320, 240, [AnnotatedObject("car", BBox(8 * f, 40, 8 * f + 90, 120))],
            meta={"sequence": "clip-a", "frame": f}))
    tracking = make_task_set(frames, TaskKind.OBJECT_TRACKING, cfg)
    inst = tracking[0]
    print(f"tracking transform: sampled frames {inst.meta['frames']} "
          f"({len(inst.images)} images, red-box query on the first)")

# --- 4. the two-stage training mix ----------------------------------------------

sets = {"multi_grounding": 600_000, "multi_understanding": 200_000,
        "single_grounding": 200_000, "single_understanding": 200_000}
manifest = stage_manifest(1, sets, total=1_000_000, seed=1)
print(f"\nstage-1 mix at 1M examples: {manifest.counts}")
print(f"counts sum exactly: {sum(manifest.counts.values()) == 1_000_000}")
