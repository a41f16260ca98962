#!/usr/bin/env python3
"""Walkthrough: box geometry, response parsing, Acc@0.5 scoring and tiering.

Everything here is synthetic and in-memory; run it with

    python3 demos/01_geometry_scoring_tiers.py
"""

import tempfile
from pathlib import Path

from PIL import Image

from migkit import (
    BBox,
    CoordSpace,
    ImageRef,
    Instance,
    Region,
    ScoreReport,
    TaskKind,
    TierInputs,
    compare,
    convert,
    hit,
    iou,
    parse_boxes,
    score,
    tier,
)
from migkit.benchdata import RunRecord, StepRecord
from migkit.outparse import render_box_token

# --- 1. IoU is continuous-geometry intersection over union -------------------

a = BBox(0, 0, 10, 10)
b = BBox(5, 5, 15, 15)
print(f"iou(a, b)          = {iou(a, b):.6f}   (= 1/7 for this classic pair)")
print(f"hit at 0.5         = {hit(a, b, 0.5)}   (strictly greater-than rule)")
print(f"identical boxes    = {iou(a, a):.1f}")

# exactly 0.5 is a MISS: the comparison is strict
half = BBox(0, 0, 2, 1)
print(f"iou exactly 0.5    -> hit={hit(BBox(0, 0, 2, 2), half, 0.5)}")

# normalized [0, 999] coordinates convert linearly to pixels
norm = BBox(100, 200, 300, 400)
px = convert(norm, CoordSpace.norm1000(), CoordSpace.pixel(2000, 1000))
print(f"norm1000 -> pixel  = {px.as_tuple()}")

# --- 2. model responses parse through a tiered grammar -----------------------

for text in (
    "<|box_start|>(12,34),(56,78)<|box_end|>",   # token form, tier 1
    "(0,0),(999,999)",                            # bare tuples, tier 2
    "The target is at [100, 200, 300, 400].",     # brackets, tier 3
    "Image2: (10,20),(30,40)",                    # with image attribution
    "no boxes here",                              # a recorded miss, never an error
):
    ans = parse_boxes(text)
    boxes = [(p.image_index, p.box.as_tuple()) for p in ans.boxes]
    print(f"parse {text!r:{52}} -> {boxes} flags={sorted(ans.flags)}")

# --- 3. scoring a tiny synthetic benchmark ------------------------------------

with tempfile.TemporaryDirectory() as tmp:
    img = Path(tmp) / "frame.png"
    Image.new("RGB", (640, 480), (40, 90, 160)).save(img)
    ref = ImageRef(path=str(img), width=640, height=480)

    def instance(iid, task):
        return Instance(
            id=iid, task=task, images=[ref, ref], query_text="find it",
            ground_truth=[Region(0, BBox(0, 0, 100, 100), CoordSpace.norm1000())],
        )

    def record(iid, box):
        token = render_box_token(box)
        return RunRecord(
            instance_id=iid, strategy="direct", form="polling",
            steps=[StepRecord("step2/image0", [0], "ground it", token,
                              parse_boxes(token))],
        )

    instances = [instance("a", TaskKind.COMMON_OBJECT),
                 instance("b", TaskKind.COMMON_OBJECT),
                 instance("c", TaskKind.REASONING)]
    records = [record("a", BBox(0, 0, 100, 90)),   # IoU 0.9  -> hit
               record("b", BBox(0, 0, 100, 45)),   # IoU 0.45 -> miss
               record("c", BBox(0, 0, 100, 100))]  # IoU 1.0  -> hit

    report = score(records, instances)
    print()
    print(report.render_table())

# --- 4. comparing two strategies, tiering instances ---------------------------

baseline = ScoreReport.from_accuracies({"common_object": 19.36, "reasoning": 48.51})
two_step = ScoreReport.from_accuracies({"common_object": 63.85, "reasoning": 51.49})
delta = compare(two_step, baseline)
print(f"\nper-task deltas    = {delta.per_task_delta}")
print(f"macro delta        = {delta.macro_delta:+.2f}pp")

# difficulty labels weigh the reference panel, image count and the IoU gain
easy = TierInputs(image_count=2, model_correct=[True, True, True, False],
                  iou_direct=[0.3, 0.2], iou_cot=[0.4, 0.3])
hard = TierInputs(image_count=6, model_correct=[False, False, False, False],
                  iou_direct=[0.3, 0.2], iou_cot=[0.31, 0.22])
print(f"tier(easy case)    = {tier(easy)}")
print(f"tier(hard case)    = {tier(hard)}")
