"""Benchmark/training instance schema, JSONL serialization and validation.

One instance per line, UTF-8 JSON, fixed field names:

    {"id": ..., "task": ..., "images": [{"path", "width", "height"}],
     "query_text": ..., "query_regions": [{"image", "box": [x1,y1,x2,y2],
     "space": "pixel"|"norm1000"}], "ground_truth": [...], "meta": {...}}

Training instances carry an extra ``answer`` field. Image pixels are never
embedded; paths are relative to the dataset file unless absolute.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import BBox, CoordSpace, GeometryError, Region
from .outparse import ParsedAnswer, PredBox


class DatasetError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    STATIC_DIFFERENCE = "static_difference"
    ROBUST_DIFFERENCE = "robust_difference"
    COMMON_OBJECT = "common_object"
    OBJECT_TRACKING = "object_tracking"
    MULTI_VIEW = "multi_view"
    REGION_LOCATING = "region_locating"
    REFERRING_GROUNDING = "referring_grounding"
    GROUP_GROUNDING = "group_grounding"
    REASONING = "reasoning"
    CORRESPONDENCE = "correspondence"
    FREEFORM = "freeform"  # synthesized training data, not a benchmark task


SPONTANEOUS_TASKS = frozenset(
    {TaskKind.STATIC_DIFFERENCE, TaskKind.ROBUST_DIFFERENCE, TaskKind.COMMON_OBJECT}
)


@dataclass(frozen=True)
class ImageRef:
    path: str
    width: int
    height: int

    def space(self) -> CoordSpace:
        return CoordSpace.pixel(self.width, self.height)


@dataclass
class Instance:
    id: str
    task: TaskKind
    images: list[ImageRef]
    query_text: str | None = None
    query_regions: list[Region] | None = None
    ground_truth: list[Region] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    answer: str | None = None

    def validate(self, require_ground_truth: bool = True) -> None:
        if not self.images:
            raise DatasetError(f"instance {self.id}: images must be non-empty")
        if require_ground_truth and not self.ground_truth:
            raise DatasetError(f"instance {self.id}: ground_truth must be non-empty")
        if self.query_text is None and not self.query_regions:
            raise DatasetError(
                f"instance {self.id}: query_text and query_regions cannot both be absent"
            )
        for label, regions in (("query_regions", self.query_regions or []),
                               ("ground_truth", self.ground_truth)):
            for r in regions:
                if r.image_index >= len(self.images):
                    raise DatasetError(
                        f"instance {self.id}: {label} image_index {r.image_index} out of "
                        f"range for {len(self.images)} images"
                    )
                if r.space.kind == "norm1000":
                    for v in r.box.as_tuple():
                        if not 0 <= v <= 999:
                            raise DatasetError(
                                f"instance {self.id}: norm1000 coordinate {v} outside [0, 999]"
                            )


def _region_to_json(r: Region) -> dict:
    return {
        "image": r.image_index,
        "box": list(r.box.as_tuple()),
        "space": r.space.kind,
    }


def _region_from_json(obj: dict, images: list[ImageRef]) -> Region:
    box_vals = obj["box"]
    if not (isinstance(box_vals, list) and len(box_vals) == 4):
        raise DatasetError(f"box must be 4 numbers, got {box_vals!r}")
    try:
        box = BBox(*(float(v) for v in box_vals))
    except (TypeError, ValueError, GeometryError) as e:
        raise DatasetError(f"bad box {box_vals!r}: {e}") from e
    idx = int(obj["image"])
    kind = obj.get("space", "pixel")
    if kind == "pixel":
        if not 0 <= idx < len(images):
            raise DatasetError(f"region image index {idx} out of range")
        space = images[idx].space()
    elif kind == "norm1000":
        space = CoordSpace.norm1000()
    else:
        raise DatasetError(f"unknown coordinate space {kind!r}")
    return Region(image_index=idx, box=box, space=space)


def instance_to_json(inst: Instance) -> dict:
    out: dict = {
        "id": inst.id,
        "task": inst.task.value,
        "images": [{"path": i.path, "width": i.width, "height": i.height}
                   for i in inst.images],
        "query_text": inst.query_text,
        "query_regions": [_region_to_json(r) for r in inst.query_regions]
        if inst.query_regions else None,
        "ground_truth": [_region_to_json(r) for r in inst.ground_truth],
        "meta": inst.meta,
    }
    if inst.answer is not None:
        out["answer"] = inst.answer
    return out


def instance_from_json(obj: dict, base_dir: Path | None = None,
                       require_images: bool = True) -> Instance:
    try:
        task = TaskKind(obj["task"])
    except (KeyError, ValueError) as e:
        raise DatasetError(f"bad task field: {e}") from e
    images = []
    for img in obj.get("images", []):
        path = img["path"]
        width, height = img.get("width"), img.get("height")
        # relative paths live relative to the dataset file; the loaded instance
        # carries the resolved path so later file access is cwd-independent
        resolved = (base_dir / path) if base_dir and not Path(path).is_absolute() else Path(path)
        if require_images and not resolved.exists():
            raise DatasetError(f"image file not found: {resolved}")
        if width is None or height is None:
            # dimensions omitted from the record: read them from the file header
            try:
                from PIL import Image

                with Image.open(resolved) as im:
                    width, height = im.size
            except Exception as e:
                raise DatasetError(
                    f"image {path}: dimensions absent and unreadable from file ({e})"
                ) from e
        images.append(ImageRef(path=str(resolved), width=int(width), height=int(height)))

    qr = obj.get("query_regions")
    inst = Instance(
        id=str(obj["id"]),
        task=task,
        images=images,
        query_text=obj.get("query_text"),
        query_regions=[_region_from_json(r, images) for r in qr] if qr else None,
        ground_truth=[_region_from_json(r, images) for r in obj.get("ground_truth", [])],
        meta=obj.get("meta") or {},
        answer=obj.get("answer"),
    )
    return inst


def load_dataset(path: str | Path, require_images: bool = True,
                 require_ground_truth: bool = True) -> list[Instance]:
    """Load and validate a JSONL dataset; errors carry the offending line number."""
    path = Path(path)
    base_dir = path.resolve().parent
    instances = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                inst = instance_from_json(obj, base_dir=base_dir,
                                          require_images=require_images)
                inst.validate(require_ground_truth=require_ground_truth)
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from e
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record: {e}") from e
            instances.append(inst)
    return instances


def save_dataset(instances: list[Instance], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst), ensure_ascii=False) + "\n")


def dataset_id(instances: list[Instance]) -> str:
    """Stable fingerprint of a dataset (ids + task multiset), used by journals."""
    h = hashlib.sha256()
    for inst in instances:
        h.update(inst.id.encode())
        h.update(inst.task.value.encode())
    return h.hexdigest()[:16]


def task_distribution(instances: list[Instance]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.task.value] = counts.get(inst.task.value, 0) + 1
    return counts


# --- benchmark quality report -------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str  # duplicate_id | zero_area | out_of_bounds | empty_query
    instance_id: str
    detail: str


def validate_benchmark(instances: list[Instance]) -> list[Finding]:
    """Automated subset of the human review: report-only, never raises."""
    findings: list[Finding] = []
    seen: dict[str, int] = {}
    for inst in instances:
        seen[inst.id] = seen.get(inst.id, 0) + 1
    for iid, n in seen.items():
        if n > 1:
            findings.append(Finding("duplicate_id", iid, f"id appears {n} times"))

    for inst in instances:
        for t, r in enumerate(inst.ground_truth):
            img = inst.images[r.image_index]
            from .geometry import to_pixel

            px = to_pixel(r, img.width, img.height)
            if px.area < 1.0:
                findings.append(
                    Finding("zero_area", inst.id,
                            f"target {t} has pixel area {px.area:.3f} < 1")
                )
            if px.x1 < 0 or px.y1 < 0 or px.x2 > img.width or px.y2 > img.height:
                findings.append(
                    Finding("out_of_bounds", inst.id,
                            f"target {t} {px.as_tuple()} exceeds {img.width}x{img.height}")
                )
        if not (inst.query_text or "").strip() and not inst.query_regions:
            findings.append(Finding("empty_query", inst.id, "no usable query"))
    return findings


# --- run records ----------------------------------------------------------------

def _parsed_to_json(p: ParsedAnswer) -> dict:
    return {
        "boxes": [[b.image_index, *b.box.as_tuple()] for b in p.boxes],
        "referring_text": p.referring_text,
        "flags": sorted(p.flags),
    }


def _parsed_from_json(obj: dict, raw: str) -> ParsedAnswer:
    boxes = [
        PredBox(box=BBox(float(x1), float(y1), float(x2), float(y2)),
                image_index=img if img is None else int(img))
        for img, x1, y1, x2, y2 in obj.get("boxes", [])
    ]
    return ParsedAnswer(raw=raw, boxes=boxes,
                        referring_text=obj.get("referring_text"),
                        flags=set(obj.get("flags", [])))


@dataclass
class StepRecord:
    """One request/response exchange inside a strategy run."""

    name: str  # e.g. "step1", "step2", "step2/image0"
    image_indices: list[int]
    prompt: str
    raw_response: str
    parsed: ParsedAnswer
    latency_s: float = 0.0


@dataclass
class RunRecord:
    instance_id: str
    strategy: str
    form: str
    steps: list[StepRecord] = field(default_factory=list)
    per_target_iou: list[float] = field(default_factory=list)
    per_target_hit: list[bool] = field(default_factory=list)
    failed: bool = False
    error: str | None = None

    def canonical_json(self) -> str:
        """Deterministic serialization: excludes wall-clock latencies so the
        same responses always produce byte-identical records."""
        obj = {
            "instance_id": self.instance_id,
            "strategy": self.strategy,
            "form": self.form,
            "steps": [
                {
                    "name": s.name,
                    "image_indices": s.image_indices,
                    "prompt": s.prompt,
                    "raw_response": s.raw_response,
                    "parsed": _parsed_to_json(s.parsed),
                }
                for s in self.steps
            ],
            "per_target_iou": self.per_target_iou,
            "per_target_hit": self.per_target_hit,
            "failed": self.failed,
            "error": self.error,
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def to_json(self) -> dict:
        obj = json.loads(self.canonical_json())
        for s_json, s in zip(obj["steps"], self.steps):
            s_json["latency_s"] = s.latency_s
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        steps = [
            StepRecord(
                name=s["name"],
                image_indices=list(s["image_indices"]),
                prompt=s["prompt"],
                raw_response=s["raw_response"],
                parsed=_parsed_from_json(s["parsed"], s["raw_response"]),
                latency_s=float(s.get("latency_s", 0.0)),
            )
            for s in obj.get("steps", [])
        ]
        return cls(
            instance_id=obj["instance_id"],
            strategy=obj["strategy"],
            form=obj["form"],
            steps=steps,
            per_target_iou=[float(v) for v in obj.get("per_target_iou", [])],
            per_target_hit=[bool(v) for v in obj.get("per_target_hit", [])],
            failed=bool(obj.get("failed", False)),
            error=obj.get("error"),
        )

    def checksum(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
