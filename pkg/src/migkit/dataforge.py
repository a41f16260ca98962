"""Construct multi-image grounding training data from single-image annotations.

Covers the six structural task transforms (with their numeric quality gates),
the adaptive-similarity image grouping, the three-pass free-form synthesis
pipeline against LLM endpoints, and the two-stage training-mix manifests.
Every operation is deterministic for a fixed config seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .benchdata import ImageRef, Instance, TaskKind
from .geometry import BBox, CoordSpace, Region, convert
from .outparse import FLAG_FALLBACK, parse_boxes, render_box_token

log = logging.getLogger(__name__)


class ForgeError(ValueError):
    pass


# --- source annotations --------------------------------------------------------


@dataclass(frozen=True)
class AnnotatedObject:
    label: str
    box: BBox  # pixel space of the owning image
    caption: str | None = None


@dataclass
class AnnotationRecord:
    image_path: str
    width: int
    height: int
    objects: list[AnnotatedObject] = field(default_factory=list)
    source: str = ""
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        for obj in self.objects:
            b = obj.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ForgeError(
                    f"{self.image_path}: box {b.as_tuple()} exceeds "
                    f"{self.width}x{self.height}"
                )
            if b.area <= 0:
                raise ForgeError(f"{self.image_path}: box {b.as_tuple()} has no area")


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    path = Path(path)
    base_dir = path.resolve().parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image = obj["image"]
                if not Path(image).is_absolute():
                    # relative paths live relative to the annotations file
                    image = str(base_dir / image)
                rec = AnnotationRecord(
                    image_path=image,
                    width=int(obj["width"]),
                    height=int(obj["height"]),
                    objects=[
                        AnnotatedObject(label=o["label"], box=BBox(*map(float, o["box"])),
                                        caption=o.get("caption"))
                        for o in obj.get("objects", [])
                    ],
                    source=obj.get("source", ""),
                    meta=obj.get("meta") or {},
                )
                rec.validate()
            except ForgeError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise ForgeError(f"{path}:{lineno}: malformed annotation record: {e}") from e
            records.append(rec)
    return records


def save_annotations(records: list[AnnotationRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image": rec.image_path, "width": rec.width, "height": rec.height,
                "objects": [{"label": o.label, "box": list(o.box.as_tuple()),
                             **({"caption": o.caption} if o.caption else {})}
                            for o in rec.objects],
                "source": rec.source, "meta": rec.meta,
            }, ensure_ascii=False) + "\n")


def default_exclusions() -> frozenset[str]:
    raw = resources.files("migkit").joinpath(
        "assets/common_object_exclusions.txt").read_text("utf-8")
    labels = [ln.strip() for ln in raw.splitlines()
              if ln.strip() and not ln.startswith("#")]
    return frozenset(labels)


@dataclass(frozen=True)
class ForgeConfig:
    seed: int = 0
    # region quality gates: strictly more than min_annotations boxes on the
    # image, aspect and area-ratio ranges inclusive, pixel count strictly above
    region_min_annotations: int = 10
    region_aspect_range: tuple[float, float] = (0.5, 2.0)
    region_area_ratio_range: tuple[float, float] = (0.2, 0.49)
    region_min_pixels: float = 2000.0
    tracking_frames: tuple[int, int] = (4, 6)
    group_size: tuple[int, int] = (3, 5)  # images sampled per anchor
    common_min_area_frac: float = 0.05    # upstream value unpublished; tune freely
    common_exclusions: frozenset[str] = field(default_factory=default_exclusions)
    grouping_mode: str = "clip_adaptive"  # random | common_object | clip_adaptive
    drop_most_similar: bool = True        # skip the single nearest neighbour (near-dupes)


# --- region quality filter -------------------------------------------------------


def filter_regions(rec: AnnotationRecord, cfg: ForgeConfig) -> list[AnnotatedObject]:
    """Objects passing all four quality gates; empty unless the image is rich enough."""
    if len(rec.objects) <= cfg.region_min_annotations:
        return []
    lo_a, hi_a = cfg.region_aspect_range
    lo_r, hi_r = cfg.region_area_ratio_range
    image_area = rec.width * rec.height
    out = []
    for obj in rec.objects:
        w, h = obj.box.width, obj.box.height
        if h <= 0 or w <= 0:
            continue
        aspect = w / h
        ratio = obj.box.area / image_area
        if lo_a <= aspect <= hi_a and lo_r <= ratio <= hi_r \
                and obj.box.area > cfg.region_min_pixels:
            out.append(obj)
    return out


# --- embedding index ----------------------------------------------------------------


@dataclass
class EmbeddingIndex:
    dim: int
    paths: list[str]
    vectors: np.ndarray  # (n, dim), unit L2 rows

    def __post_init__(self) -> None:
        if self.vectors.shape != (len(self.paths), self.dim):
            raise ForgeError(
                f"vectors shape {self.vectors.shape} does not match "
                f"{len(self.paths)} paths x dim {self.dim}"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-4)
        if bad.size:
            raise ForgeError(
                f"embedding for {self.paths[bad[0]]} is not unit norm "
                f"(|v|={norms[bad[0]]:.6f})"
            )

    def __len__(self) -> int:
        return len(self.paths)


def load_embedding_index(path: str | Path) -> EmbeddingIndex:
    paths, rows, dim = [], [], None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vec = np.asarray(obj["embedding"], dtype=np.float64)
                d = int(obj["dim"])
            except (KeyError, TypeError, ValueError) as e:
                raise ForgeError(f"{path}:{lineno}: malformed index record: {e}") from e
            if vec.shape != (d,):
                raise ForgeError(f"{path}:{lineno}: embedding length != dim {d}")
            if dim is None:
                dim = d
            elif d != dim:
                raise ForgeError(f"{path}:{lineno}: dim {d} != first record dim {dim}")
            paths.append(obj["path"])
            rows.append(vec)
    if not rows:
        raise ForgeError(f"{path}: empty embedding index")
    return EmbeddingIndex(dim=dim, paths=paths, vectors=np.vstack(rows))


def save_embedding_index(index: EmbeddingIndex, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p, vec in zip(index.paths, index.vectors):
            fh.write(json.dumps({"path": p, "dim": index.dim,
                                 "embedding": [float(v) for v in vec]}) + "\n")


# --- image grouping ---------------------------------------------------------------


def similarity_window(thres: float, count: int) -> int:
    """Size of the adaptive candidate window: floor(thres * count)."""
    return int(thres * count)


def adaptive_groups(index: EmbeddingIndex, cfg: ForgeConfig) -> list[list[str]]:
    """Similarity-adaptive grouping: anchor on the first remaining image, draw a
    similarity window ``thres ~ U(0.1, 1)``, keep the top ``floor(thres * n)``
    most-similar candidates, then sample ``r ~ U{3..5}`` of them without
    replacement. Selected images leave the pool, so the output partitions the
    input; once at most ``r_max + 1`` images remain they form the final group
    (the window mechanics cannot fill a full group from a drained pool).
    """
    if len(index) == 0:
        raise ForgeError("empty embedding index")
    rng = np.random.default_rng(cfg.seed)
    r_lo, r_hi = cfg.group_size
    remaining = list(range(len(index)))
    groups: list[list[str]] = []
    while remaining:
        if len(remaining) <= r_hi + 1:
            groups.append([index.paths[i] for i in remaining])
            break
        anchor, others = remaining[0], remaining[1:]
        thres = rng.uniform(0.1, 1.0)
        sims = index.vectors[others] @ index.vectors[anchor]
        order = np.argsort(-sims, kind="stable")
        if cfg.drop_most_similar and order.size > 1:
            order = order[1:]
        r = int(rng.integers(r_lo, r_hi + 1))
        k = max(similarity_window(thres, order.size), min(r, order.size))
        candidates = [others[i] for i in order[:k]]
        picked = rng.choice(len(candidates), size=min(r, len(candidates)),
                            replace=False)
        group = [anchor] + [candidates[i] for i in sorted(picked)]
        groups.append([index.paths[i] for i in group])
        taken = set(group)
        remaining = [i for i in remaining if i not in taken]
    return groups


def random_groups(paths: list[str], cfg: ForgeConfig) -> list[list[str]]:
    if not paths:
        raise ForgeError("no images to group")
    rng = np.random.default_rng(cfg.seed)
    order = list(rng.permutation(len(paths)))
    r_lo, r_hi = cfg.group_size
    groups = []
    while order:
        size = int(rng.integers(r_lo + 1, r_hi + 2))  # anchor-inclusive, 4..6
        groups.append([paths[i] for i in order[:size]])
        order = order[size:]
    return groups


def common_object_groups(records: list[AnnotationRecord],
                         cfg: ForgeConfig) -> list[list[str]]:
    """Groups of images sharing exactly one qualifying label."""
    instances = make_task_set(records, TaskKind.COMMON_OBJECT, cfg)
    return [[img.path for img in inst.images] for inst in instances]


def make_groups(mode: str, cfg: ForgeConfig, index: EmbeddingIndex | None = None,
                records: list[AnnotationRecord] | None = None) -> list[list[str]]:
    if mode == "clip_adaptive":
        if index is None:
            raise ForgeError("clip_adaptive grouping needs an embedding index")
        return adaptive_groups(index, cfg)
    if mode == "random":
        paths = [r.image_path for r in records] if records else (index.paths if index else [])
        return random_groups(paths, cfg)
    if mode == "common_object":
        if records is None:
            raise ForgeError("common_object grouping needs annotation records")
        return common_object_groups(records, cfg)
    raise ForgeError(f"unknown grouping mode {mode!r}")


# --- task transforms -----------------------------------------------------------------


_QUERY_TEXT = {
    TaskKind.COMMON_OBJECT: "These images share one object in common. Find it and "
                            "ground it in every image.",
    TaskKind.OBJECT_TRACKING: "Track the object marked with the red bounding box in "
                              "the first frame and ground it in each frame.",
    TaskKind.GROUP_GROUNDING: "Locate {ref} and ground it in the image where it appears.",
    TaskKind.REGION_LOCATING: "Find the region shown in the 2th picture within the "
                              "1st picture and ground it.",
    TaskKind.REFERRING_GROUNDING: "Find the object shown in Image-1 within Image-2 "
                                  "and ground it.",
    TaskKind.STATIC_DIFFERENCE: "Compare the two images and ground the difference in "
                                "the second image.",
    TaskKind.ROBUST_DIFFERENCE: "Ignore the viewpoint shift, find the prominent object "
                                "difference and ground it in the second image.",
}


def _image_ref(rec: AnnotationRecord) -> ImageRef:
    return ImageRef(path=rec.image_path, width=rec.width, height=rec.height)


def _norm_region(image_index: int, box: BBox, rec: AnnotationRecord) -> Region:
    norm = convert(box, CoordSpace.pixel(rec.width, rec.height), CoordSpace.norm1000())
    clamped = norm.clamp(xmax=999, ymax=999)
    return Region(image_index=image_index, box=clamped, space=CoordSpace.norm1000())


def _answer_text(regions: list[Region], multi_image: bool) -> str:
    parts = []
    for r in regions:
        token = render_box_token(r.box)
        parts.append(f"Image{r.image_index + 1}: {token}" if multi_image else token)
    return " ".join(parts)


def _finish(inst: Instance) -> Instance:
    inst.answer = _answer_text(inst.ground_truth, len(inst.images) > 1)
    inst.validate()
    return inst


def _qualifying_labels(rec: AnnotationRecord, cfg: ForgeConfig) -> dict[str, AnnotatedObject]:
    """Largest qualifying box per label: big enough and not on the exclusion list."""
    out: dict[str, AnnotatedObject] = {}
    min_area = cfg.common_min_area_frac * rec.width * rec.height
    for obj in rec.objects:
        if obj.label in cfg.common_exclusions or obj.box.area < min_area:
            continue
        if obj.label not in out or obj.box.area > out[obj.label].box.area:
            out[obj.label] = obj
    return out


def _make_common_object(records, cfg, rng) -> list[Instance]:
    qualifying = [(rec, _qualifying_labels(rec, cfg)) for rec in records]
    by_label: dict[str, list[int]] = {}
    for i, (_, labels) in enumerate(qualifying):
        for label in labels:
            by_label.setdefault(label, []).append(i)

    used: set[int] = set()
    instances = []
    r_lo, r_hi = cfg.group_size
    for label in sorted(by_label):
        pool = [i for i in by_label[label] if i not in used]
        while len(pool) >= r_lo:
            size = min(int(rng.integers(r_lo, r_hi + 1)), len(pool))
            chunk, pool = pool[:size], pool[size:]
            shared = set.intersection(*(set(qualifying[i][1]) for i in chunk))
            if shared != {label}:
                continue  # ambiguous: more than one definite common object
            used.update(chunk)
            recs = [qualifying[i][0] for i in chunk]
            gt = [_norm_region(k, qualifying[i][1][label].box, recs[k])
                  for k, i in enumerate(chunk)]
            instances.append(_finish(Instance(
                id=f"common_object-{len(instances):06d}",
                task=TaskKind.COMMON_OBJECT,
                images=[_image_ref(r) for r in recs],
                query_text=_QUERY_TEXT[TaskKind.COMMON_OBJECT],
                ground_truth=gt,
                meta={"label": label},
            )))
    return instances


def sample_frame_indices(length: int, n: int) -> list[int]:
    """Evenly spaced frame picks including both endpoints (ceil rounding)."""
    n = min(n, length)
    if n <= 1:
        return [0]
    raw = [math.ceil(i * (length - 1) / (n - 1)) for i in range(n)]
    return sorted(set(raw))


def _make_tracking(records, cfg, rng) -> list[Instance]:
    sequences: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        seq = rec.meta.get("sequence")
        if seq is None:
            log.warning("object_tracking: %s lacks a sequence id, skipped", rec.image_path)
            continue
        if not rec.objects:
            log.warning("object_tracking: %s has no target box, skipped", rec.image_path)
            continue
        sequences.setdefault(str(seq), []).append(rec)

    instances = []
    lo, hi = cfg.tracking_frames
    for seq in sorted(sequences):
        frames = sorted(sequences[seq], key=lambda r: r.meta.get("frame", 0))
        if len(frames) < 2:
            continue
        n = int(rng.integers(lo, hi + 1))
        picked = [frames[i] for i in sample_frame_indices(len(frames), n)]
        first = picked[0]
        gt = [_norm_region(k, rec.objects[0].box, rec)
              for k, rec in enumerate(picked) if k > 0]
        instances.append(_finish(Instance(
            id=f"object_tracking-{len(instances):06d}",
            task=TaskKind.OBJECT_TRACKING,
            images=[_image_ref(r) for r in picked],
            query_text=_QUERY_TEXT[TaskKind.OBJECT_TRACKING],
            query_regions=[_norm_region(0, first.objects[0].box, first)],
            ground_truth=gt,
            meta={"sequence": seq,
                  "frames": [r.meta.get("frame") for r in picked]},
        )))
    return instances


def _make_group_grounding(records, cfg, rng) -> list[Instance]:
    usable = [r for r in records if r.objects]
    order = list(rng.permutation(len(usable)))
    r_lo, r_hi = cfg.group_size
    instances = []
    while len(order) >= r_lo:
        size = min(int(rng.integers(r_lo, r_hi + 1)), len(order))
        chunk, order = order[:size], order[size:]
        recs = [usable[i] for i in chunk]
        target_pos = int(rng.integers(0, len(recs)))
        target = recs[target_pos]
        obj = target.objects[0]
        ref = obj.caption or f"the {obj.label}"
        instances.append(_finish(Instance(
            id=f"group_grounding-{len(instances):06d}",
            task=TaskKind.GROUP_GROUNDING,
            images=[_image_ref(r) for r in recs],
            query_text=_QUERY_TEXT[TaskKind.GROUP_GROUNDING].format(ref=ref),
            ground_truth=[_norm_region(target_pos, obj.box, target)],
            meta={"target_image": target_pos, "label": obj.label},
        )))
    return instances


def _crop_region(rec: AnnotationRecord, box: BBox, out_dir: Path, name: str) -> ImageRef:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    with Image.open(rec.image_path) as im:
        crop = im.convert("RGB").crop(tuple(int(round(v)) for v in box.as_tuple()))
        path = out_dir / f"{name}.png"
        crop.save(path)
        return ImageRef(path=str(path), width=crop.width, height=crop.height)


def _make_region_locating(records, cfg, rng, out_dir: Path | None) -> list[Instance]:
    if out_dir is None:
        raise ForgeError("region_locating needs an output directory for region crops")
    instances = []
    for rec in records:
        for j, obj in enumerate(filter_regions(rec, cfg)):
            try:
                crop = _crop_region(rec, obj.box, Path(out_dir),
                                    f"region-{len(instances):06d}")
            except OSError as e:
                log.warning("region_locating: cannot crop %s (%s), skipped",
                            rec.image_path, e)
                continue
            instances.append(_finish(Instance(
                id=f"region_locating-{len(instances):06d}",
                task=TaskKind.REGION_LOCATING,
                images=[_image_ref(rec), crop],
                query_text=_QUERY_TEXT[TaskKind.REGION_LOCATING],
                ground_truth=[_norm_region(0, obj.box, rec)],
                meta={"label": obj.label, "region_index": j},
            )))
    return instances


def _make_referring(records, cfg, rng) -> list[Instance]:
    by_label: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        for obj in rec.objects:
            by_label.setdefault(obj.label, []).append(rec)
            break  # first object defines the record's subject
    instances = []
    for label in sorted(by_label):
        pool = by_label[label]
        for src, tgt in zip(pool[0::2], pool[1::2]):
            obj = next(o for o in tgt.objects if o.label == label)
            instances.append(_finish(Instance(
                id=f"referring_grounding-{len(instances):06d}",
                task=TaskKind.REFERRING_GROUNDING,
                images=[_image_ref(src), _image_ref(tgt)],
                query_text=_QUERY_TEXT[TaskKind.REFERRING_GROUNDING],
                ground_truth=[_norm_region(1, obj.box, tgt)],
                meta={"label": label},
            )))
    return instances


def _make_difference(records, cfg, rng, task: TaskKind) -> list[Instance]:
    pairs: dict[str, dict[str, AnnotationRecord]] = {}
    for rec in records:
        pair, role = rec.meta.get("pair"), rec.meta.get("role")
        if pair is None or role not in ("a", "b"):
            log.warning("%s: %s lacks pair/role meta, skipped", task.value, rec.image_path)
            continue
        pairs.setdefault(str(pair), {})[role] = rec
    instances = []
    for pair in sorted(pairs):
        both = pairs[pair]
        if "a" not in both or "b" not in both:
            continue
        a, b = both["a"], both["b"]
        if not b.objects:
            log.warning("%s: pair %s has no difference box, skipped", task.value, pair)
            continue
        instances.append(_finish(Instance(
            id=f"{task.value}-{len(instances):06d}",
            task=task,
            images=[_image_ref(a), _image_ref(b)],
            query_text=_QUERY_TEXT[task],
            ground_truth=[_norm_region(1, b.objects[0].box, b)],
            meta={"pair": pair},
        )))
    return instances


def make_task_set(records: list[AnnotationRecord], task: TaskKind, cfg: ForgeConfig,
                  out_dir: str | Path | None = None) -> list[Instance]:
    """Transform annotation records into training instances for one task."""
    rng = np.random.default_rng(cfg.seed)
    if task is TaskKind.COMMON_OBJECT:
        return _make_common_object(records, cfg, rng)
    if task is TaskKind.OBJECT_TRACKING:
        return _make_tracking(records, cfg, rng)
    if task is TaskKind.GROUP_GROUNDING:
        return _make_group_grounding(records, cfg, rng)
    if task is TaskKind.REGION_LOCATING:
        return _make_region_locating(records, cfg, rng,
                                     Path(out_dir) if out_dir else None)
    if task is TaskKind.REFERRING_GROUNDING:
        return _make_referring(records, cfg, rng)
    if task in (TaskKind.STATIC_DIFFERENCE, TaskKind.ROBUST_DIFFERENCE):
        return _make_difference(records, cfg, rng, task)
    raise ForgeError(f"no transform defined for task {task.value}")


# --- free-form synthesis ---------------------------------------------------------------


@dataclass
class ForgeStats:
    groups_in: int = 0
    groups_failed: int = 0
    captions: int = 0
    refine_kept: int = 0
    refine_dropped: int = 0
    qa_generated: int = 0
    qa_discarded: int = 0
    instances: int = 0

    def as_dict(self) -> dict:
        return dict(vars(self))


def _annotation_lines(rec: AnnotationRecord) -> list[str]:
    lines = []
    for obj in rec.objects:
        token = render_box_token(
            convert(obj.box, CoordSpace.pixel(rec.width, rec.height),
                    CoordSpace.norm1000()).clamp(xmax=999, ymax=999))
        lines.append(f"{obj.caption or obj.label} {token}")
    return lines


def _parse_refined(text: str) -> list[tuple[str, BBox]]:
    out = []
    for line in text.splitlines():
        parsed = parse_boxes(line)
        if parsed.boxes and FLAG_FALLBACK not in parsed.flags:
            caption = line.split("<|box_start|>")[0].strip(" -:")
            out.append((caption, parsed.boxes[0].box))
    return out


def _parse_qa(text: str) -> list[tuple[str, str]]:
    import re

    pairs = re.findall(r"Q:\s*(.+?)\s*A:\s*(.+?)(?=\nQ:|\Z)", text, flags=re.DOTALL)
    return [(q.strip(), a.strip()) for q, a in pairs]


def synthesize_freeform(groups: list[list[str]], records_by_path: dict[str, AnnotationRecord],
                        caption_client, refine_client, instruct_client,
                        bank=None) -> tuple[list[Instance], ForgeStats]:
    """Caption -> box refinement -> instruction generation, per image group.

    Q/A pairs whose answers carry no token-form box are discarded; endpoint
    failures skip the group and the pipeline keeps going. Yield counters for
    every pass come back alongside the instances.
    """
    from .orchestrator import TransportError, _encoded_image
    from .templates import TemplateBank, render

    def image_message(path: str, prompt: str) -> list[dict]:
        return [{"role": "user", "content": [
            {"type": "image_url", "image_url": {"url": _encoded_image(path, None)}},
            {"type": "text", "text": prompt},
        ]}]

    bank = bank or TemplateBank.default()
    stats = ForgeStats(groups_in=len(groups))
    instances: list[Instance] = []

    for g, group in enumerate(groups):
        recs = []
        for p in group:
            if p not in records_by_path:
                log.warning("synthesis: no annotations for %s, group %d skipped", p, g)
                break
            recs.append(records_by_path[p])
        if len(recs) != len(group):
            stats.groups_failed += 1
            continue

        try:
            captions = []
            for rec in recs:
                prompt = render(bank.forge_template("caption"), "")
                text, _ = caption_client.chat(image_message(rec.image_path, prompt))
                captions.append(text.strip())
                stats.captions += 1

            refined: list[list[tuple[str, BBox]]] = []
            for rec in recs:
                lines = _annotation_lines(rec)
                prompt = render(bank.forge_template("refine"), "",
                                ANNOTATIONS="\n".join(lines))
                text, _ = refine_client.chat(image_message(rec.image_path, prompt))
                kept = _parse_refined(text)
                stats.refine_kept += len(kept)
                stats.refine_dropped += max(0, len(rec.objects) - len(kept))
                refined.append(kept)

            context_parts = []
            for k, (caption, objs) in enumerate(zip(captions, refined)):
                obj_lines = "\n".join(
                    f"{cap} {render_box_token(box)}" for cap, box in objs)
                context_parts.append(f"Image-{k + 1}: {caption}\nObjects:\n{obj_lines}")
            prompt = render(bank.forge_template("instruct"), "",
                            CONTEXT="\n\n".join(context_parts))
            text, _ = instruct_client.chat(
                [{"role": "user", "content": [{"type": "text", "text": prompt}]}])
        except TransportError as e:
            log.warning("synthesis: group %d failed after retries (%s), skipped", g, e)
            stats.groups_failed += 1
            continue

        for q, a in _parse_qa(text):
            stats.qa_generated += 1
            parsed = parse_boxes(a)
            if not parsed.boxes or FLAG_FALLBACK in parsed.flags:
                stats.qa_discarded += 1
                continue
            gt = [Region(image_index=pb.image_index if pb.image_index is not None
                         and pb.image_index < len(recs) else 0,
                         box=pb.box, space=CoordSpace.norm1000())
                  for pb in parsed.boxes]
            inst = Instance(
                id=f"freeform-{len(instances):06d}",
                task=TaskKind.FREEFORM,
                images=[_image_ref(r) for r in recs],
                query_text=q,
                ground_truth=gt,
                meta={"group": g, "pipeline": "caption-refine-instruct"},
                answer=a,
            )
            try:
                inst.validate()
            except Exception:
                stats.qa_discarded += 1
                continue
            instances.append(inst)
            stats.instances += 1
    return instances, stats


# --- stage mix manifests -------------------------------------------------------------


STAGE_MIX: dict[int, dict[str, float]] = {
    1: {"multi_grounding": 54.0, "multi_understanding": 16.0,
        "single_grounding": 13.0, "single_understanding": 17.0},
    2: {"freeform": 49.0, "stage1_multi_grounding": 27.0,
        "multi_understanding": 8.0, "single_grounding": 7.0,
        "single_understanding": 9.0},
}


def allocate_counts(stage: int, total: int) -> dict[str, int]:
    """Largest-remainder split of ``total`` over the stage's mix percentages."""
    if stage not in STAGE_MIX:
        raise ForgeError(f"unknown training stage {stage}")
    mix = STAGE_MIX[stage]
    quotas = {name: total * pct / 100.0 for name, pct in mix.items()}
    counts = {name: int(q) for name, q in quotas.items()}
    leftover = total - sum(counts.values())
    by_remainder = sorted(mix, key=lambda n: (-(quotas[n] - counts[n]), n))
    for name in by_remainder[:leftover]:
        counts[name] += 1
    return counts


@dataclass
class StageManifest:
    stage: int
    total: int
    counts: dict[str, int]
    ids: dict[str, list]

    def to_json(self) -> dict:
        return {"stage": self.stage, "total": self.total,
                "counts": dict(sorted(self.counts.items())),
                "ids": {k: list(v) for k, v in sorted(self.ids.items())}}


def stage_manifest(stage: int, sets: dict[str, list | int], total: int,
                   seed: int = 0) -> StageManifest:
    """Per-source sample counts and record picks for one training stage.

    ``sets`` maps source name to its record ids (or just a size, in which case
    0-based indices stand in for ids). Every source of the stage mix must be
    present and large enough to cover its share.
    """
    counts = allocate_counts(stage, total)
    missing = sorted(set(counts) - set(sets))
    if missing:
        raise ForgeError(f"stage {stage} requires sources {missing}")
    rng = np.random.default_rng(seed)
    ids: dict[str, list] = {}
    for name in sorted(counts):
        pool = sets[name]
        size = pool if isinstance(pool, int) else len(pool)
        want = counts[name]
        if want > size:
            raise ForgeError(
                f"source {name!r} holds {size} records, {want} needed for stage {stage}"
            )
        picked = rng.choice(size, size=want, replace=False)
        picked.sort()
        if isinstance(pool, int):
            ids[name] = [int(i) for i in picked]
        else:
            ids[name] = [pool[i] for i in picked]
    return StageManifest(stage=stage, total=total, counts=counts, ids=ids)
