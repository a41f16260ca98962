"""Accuracy scoring, strategy comparison, and Easy/Medium/Hard tiering.

An instance scores a hit only when every ground-truth target is matched by a
predicted box with IoU strictly greater than the threshold; each predicted box
can satisfy at most one target (greedy assignment by descending IoU). The
per-target table is kept on every record so alternative conventions can be
rescored offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .benchdata import Instance, RunRecord
from .geometry import BBox, CoordSpace, Region, convert, to_pixel
from .outparse import PredBox


class ScoringError(ValueError):
    pass


# --- target matching ------------------------------------------------------------


def _grounding_boxes(record: RunRecord) -> list[PredBox]:
    """Predicted boxes from grounding steps, with image attribution resolved.

    A box parsed out of a single-image (polled) request is attributed to that
    image; otherwise an in-text Image-K label wins, and a box with neither is
    a wildcard usable against any target.
    """
    boxes: list[PredBox] = []
    for step in record.steps:
        if step.name.startswith("step1"):
            continue  # recognition step, not a grounding answer
        step_image = step.image_indices[0] if len(step.image_indices) == 1 else None
        for pb in step.parsed.boxes:
            idx = pb.image_index if pb.image_index is not None else step_image
            boxes.append(PredBox(box=pb.box, image_index=idx))
    return boxes


def _iou_in_common_space(pred: BBox, pred_space: CoordSpace, gt: Region,
                         image_width: int, image_height: int) -> float:
    from .geometry import iou

    if pred_space == gt.space:
        return iou(pred, gt.box)
    pixel = CoordSpace.pixel(image_width, image_height)
    return iou(convert(pred, pred_space, pixel), to_pixel(gt, image_width, image_height))


def match_targets(boxes: list[PredBox], inst: Instance, threshold: float = 0.5,
                  pred_space: CoordSpace | None = None) -> tuple[list[float], list[bool]]:
    """Greedy one-to-one assignment of predicted boxes to ground-truth targets.

    Returns (per_target_iou, per_target_hit); the IoU reported for a target is
    the one of its assigned box (0.0 when nothing was assigned).
    """
    pred_space = pred_space or CoordSpace.norm1000()
    pairs = []  # (iou, target_idx, box_idx)
    for t, gt in enumerate(inst.ground_truth):
        img = inst.images[gt.image_index]
        for b, pb in enumerate(boxes):
            if pb.image_index is not None and pb.image_index != gt.image_index:
                continue
            v = _iou_in_common_space(pb.box, pred_space, gt, img.width, img.height)
            pairs.append((v, t, b))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    iou_by_target = [0.0] * len(inst.ground_truth)
    used_targets: set[int] = set()
    used_boxes: set[int] = set()
    for v, t, b in pairs:
        if t in used_targets or b in used_boxes:
            continue
        used_targets.add(t)
        used_boxes.add(b)
        iou_by_target[t] = v
    hits = [v > threshold for v in iou_by_target]
    return iou_by_target, hits


# --- reports ----------------------------------------------------------------------


@dataclass(frozen=True)
class TaskScore:
    accuracy: float  # percent
    hits: int | None = None
    count: int | None = None


@dataclass
class ScoreReport:
    per_task: dict[str, TaskScore]
    per_instance: dict[str, bool] = field(default_factory=dict)

    @property
    def macro_average(self) -> float:
        if not self.per_task:
            return 0.0
        return sum(t.accuracy for t in self.per_task.values()) / len(self.per_task)

    @property
    def micro_average(self) -> float:
        hits = sum(t.hits or 0 for t in self.per_task.values())
        count = sum(t.count or 0 for t in self.per_task.values())
        return 100.0 * hits / count if count else 0.0

    @classmethod
    def from_accuracies(cls, accuracies: dict[str, float]) -> "ScoreReport":
        return cls(per_task={k: TaskScore(accuracy=float(v)) for k, v in accuracies.items()})

    def to_json(self) -> dict:
        return {
            "per_task": {
                k: {"accuracy": t.accuracy, "hits": t.hits, "count": t.count}
                for k, t in sorted(self.per_task.items())
            },
            "macro_average": self.macro_average,
            "micro_average": self.micro_average,
            "per_instance": dict(sorted(self.per_instance.items())),
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def render_table(self) -> str:
        width = max([len(k) for k in self.per_task] + [12])
        lines = [f"{'task'.ljust(width)}  acc%    hits  count"]
        for k, t in sorted(self.per_task.items()):
            hits = "-" if t.hits is None else str(t.hits)
            count = "-" if t.count is None else str(t.count)
            lines.append(f"{k.ljust(width)}  {t.accuracy:6.2f}  {hits:>4}  {count:>5}")
        lines.append(f"{'macro average'.ljust(width)}  {self.macro_average:6.2f}")
        return "\n".join(lines)


def score(records: list[RunRecord], instances: list[Instance],
          threshold: float = 0.5,
          pred_space: CoordSpace | None = None) -> ScoreReport:
    """Acc@threshold per task plus the unweighted task average.

    Instances with no record (or a failed one) are misses; a record naming an
    unknown instance is an error. When an instance appears in several records
    the last one wins.
    """
    by_id = {inst.id: inst for inst in instances}
    latest: dict[str, RunRecord] = {}
    for rec in records:
        if rec.instance_id not in by_id:
            raise ScoringError(f"record references unknown instance {rec.instance_id!r}")
        latest[rec.instance_id] = rec

    per_instance: dict[str, bool] = {}
    task_hits: dict[str, int] = {}
    task_counts: dict[str, int] = {}
    for inst in instances:
        rec = latest.get(inst.id)
        if rec is None or rec.failed:
            is_hit = False
        else:
            _, hits = match_targets(_grounding_boxes(rec), inst, threshold, pred_space)
            is_hit = all(hits) and len(hits) > 0
        per_instance[inst.id] = is_hit
        task = inst.task.value
        task_counts[task] = task_counts.get(task, 0) + 1
        task_hits[task] = task_hits.get(task, 0) + (1 if is_hit else 0)

    per_task = {
        task: TaskScore(accuracy=100.0 * task_hits[task] / task_counts[task],
                        hits=task_hits[task], count=task_counts[task])
        for task in task_counts
    }
    return ScoreReport(per_task=per_task, per_instance=per_instance)


# --- strategy comparison ------------------------------------------------------------


@dataclass(frozen=True)
class CompareReport:
    per_task_delta: dict[str, float]  # percentage points, a - b
    macro_delta: float

    def to_json(self) -> dict:
        return {"per_task_delta": dict(sorted(self.per_task_delta.items())),
                "macro_delta": self.macro_delta}


def compare(a: ScoreReport, b: ScoreReport) -> CompareReport:
    """Signed percentage-point deltas (a minus b) per task and for the macro average."""
    if set(a.per_task) != set(b.per_task):
        missing = set(a.per_task).symmetric_difference(b.per_task)
        raise ScoringError(f"reports cover different task sets: {sorted(missing)}")
    deltas = {k: a.per_task[k].accuracy - b.per_task[k].accuracy for k in a.per_task}
    return CompareReport(per_task_delta=deltas,
                         macro_delta=a.macro_average - b.macro_average)


# --- difficulty tiers ------------------------------------------------------------------


EASY, MEDIUM, HARD = "easy", "medium", "hard"

EASY_MIN_CORRECT = 2       # easy (a): strictly more models correct than this ...
EASY_MAX_IMAGES = 4        # ... with strictly fewer images than this
EASY_IOU_IMPROVEMENT = 0.15  # easy (b): mean CoT IoU improvement strictly above this
HARD_MAX_CORRECT = 1       # hard: at most this many models correct ...
HARD_MIN_IMAGES = 4        # ... with strictly more images than this


@dataclass(frozen=True)
class TierInputs:
    """Per-instance evidence from a panel of reference models.

    ``model_correct`` holds one flag per reference run (models and their CoT
    variants each count once); ``iou_direct``/``iou_cot`` are paired per model
    and feed the mean improvement term.
    """

    image_count: int
    model_correct: list[bool]
    iou_direct: list[float]
    iou_cot: list[float]

    def __post_init__(self) -> None:
        if not self.model_correct:
            raise ScoringError("reference model set must be non-empty")
        if len(self.iou_direct) != len(self.iou_cot):
            raise ScoringError("iou_direct and iou_cot must pair up per model")

    @property
    def cot_improvement(self) -> float:
        if not self.iou_direct:
            return 0.0
        deltas = [c - d for c, d in zip(self.iou_cot, self.iou_direct)]
        return sum(deltas) / len(deltas)


def tier(inputs: TierInputs) -> str:
    """Easy/Medium/Hard label; easy clauses take precedence on overlap."""
    n_correct = sum(inputs.model_correct)
    easy_a = n_correct > EASY_MIN_CORRECT and inputs.image_count < EASY_MAX_IMAGES
    easy_b = inputs.cot_improvement > EASY_IOU_IMPROVEMENT
    if easy_a or easy_b:
        return EASY
    if n_correct <= HARD_MAX_CORRECT and inputs.image_count > HARD_MIN_IMAGES:
        return HARD
    return MEDIUM


def tier_dataset(inputs_by_id: dict[str, TierInputs]) -> dict[str, str]:
    return {iid: tier(inp) for iid, inp in inputs_by_id.items()}


# --- fixed baselines ---------------------------------------------------------------


FULL_FRAME_NORM = BBox(0, 0, 999, 999)


def constant_records(instances: list[Instance], box: BBox = FULL_FRAME_NORM,
                     strategy: str = "constant", form: str = "all") -> list[RunRecord]:
    """Records predicting the same norm1000 box for every image of every instance.

    With the full-frame default this is the random-guess baseline: a target is
    hit exactly when it covers more than half the frame by IoU.
    """
    from .benchdata import StepRecord
    from .outparse import parse_boxes, render_box_token

    records = []
    for inst in instances:
        token = render_box_token(box)
        steps = [
            StepRecord(name=f"step2/image{k}", image_indices=[k], prompt="",
                       raw_response=token, parsed=parse_boxes(token))
            for k in range(len(inst.images))
        ]
        rec = RunRecord(instance_id=inst.id, strategy=strategy, form=form, steps=steps)
        rec.per_target_iou, rec.per_target_hit = match_targets(
            _grounding_boxes(rec), inst)
        records.append(rec)
    return records
