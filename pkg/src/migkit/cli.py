"""Command-line entry point.

Exit codes: 0 success, 1 validation/data failure, 2 configuration error
(including unknown flags, which argparse reports with usage text).
Evaluation runs echo their full resolved configuration into the run directory
and the journal header, and journals decouple inference from scoring so
endpoint output can be rescored offline at will.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys
from pathlib import Path

from .benchdata import (
    DatasetError,
    TaskKind,
    load_dataset,
    save_dataset,
    task_distribution,
    validate_benchmark,
)
from .dataforge import (
    ForgeConfig,
    ForgeError,
    filter_regions,
    load_annotations,
    load_embedding_index,
    make_groups,
    make_task_set,
    stage_manifest,
    synthesize_freeform,
)
from .geometry import GeometryError
from .hislicer import (
    GridSpec,
    SlicerError,
    default_grid,
    slice_grid,
    slice_image,
    to_group_instance,
)
from .mergekit import ArchiveError, diff, merge, read_archive, write_archive
from .orchestrator import (
    ChatClient,
    EndpointConfigError,
    Journal,
    JournalError,
    ModelEndpoint,
    run_batch,
)
from .scoring import ScoringError, TierInputs, compare, score, tier
from .templates import TemplateBank, TemplateError

DATA_ERRORS = (DatasetError, ForgeError, ArchiveError, SlicerError, ScoringError,
               GeometryError)
CONFIG_ERRORS = (JournalError, EndpointConfigError, TemplateError)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except (OSError, ValueError) as e:
        raise JournalError(f"cannot read config file {path}: {e}") from e


def _resolve(args: argparse.Namespace, cfg: dict, key: str, default):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


# --- subcommands -----------------------------------------------------------------


def cmd_validate(args) -> int:
    instances = load_dataset(args.dataset, require_images=not args.skip_images)
    findings = validate_benchmark(instances)
    print(f"{len(instances)} instances: {json.dumps(task_distribution(instances))}")
    for f in findings:
        print(f"[{f.kind}] {f.instance_id}: {f.detail}")
    if findings:
        print(f"{len(findings)} findings")
        return 1
    print("ok")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config_file(args.config)
    resolved = {
        "dataset": _resolve(args, cfg, "dataset", None),
        "endpoint": _resolve(args, cfg, "endpoint", None),
        "model": _resolve(args, cfg, "model", None),
        "strategy": _resolve(args, cfg, "strategy", "cot_single"),
        "form": _resolve(args, cfg, "form", "polling"),
        "concurrency": int(_resolve(args, cfg, "concurrency", 4)),
        "timeout": float(_resolve(args, cfg, "timeout", 60.0)),
        "retries": int(_resolve(args, cfg, "retries", 3)),
        "out": _resolve(args, cfg, "out", "runs"),
        "max_instances": _resolve(args, cfg, "max_instances", None),
        "templates": _resolve(args, cfg, "templates", None),
    }
    for key in ("dataset", "endpoint", "model"):
        if not resolved[key]:
            raise JournalError(f"evaluate needs --{key} (flag or config file)")

    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    instances = load_dataset(resolved["dataset"])
    endpoint = ModelEndpoint(
        base_url=resolved["endpoint"], model=resolved["model"],
        timeout_s=resolved["timeout"], max_retries=resolved["retries"],
        max_concurrency=resolved["concurrency"],
    )
    bank = TemplateBank.from_file(resolved["templates"]) if resolved["templates"] \
        else TemplateBank.default()
    records = run_batch(
        instances, endpoint, resolved["strategy"], resolved["form"],
        out_dir / "journal.jsonl", bank=bank, run_config=resolved,
        max_instances=resolved["max_instances"],
    )
    failed = sum(1 for r in records if r.failed)
    print(f"journal: {out_dir / 'journal.jsonl'}")
    print(f"{len(records)} records ({failed} failed)")
    return 0


def cmd_score(args) -> int:
    instances = load_dataset(args.dataset, require_images=False)
    _, records = Journal.read(args.journal)
    report = score(records, instances, threshold=args.threshold)
    print(report.render_table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json_str() + "\n")
        print(f"report: {out}")
    return 0


def cmd_tier(args) -> int:
    if len(args.direct) != len(args.cot):
        raise JournalError("--direct and --cot take one journal per reference model, "
                           "in the same order")
    instances = load_dataset(args.dataset, require_images=False)

    def per_instance(journal_path):
        _, records = Journal.read(journal_path)
        by_id = {r.instance_id: r for r in records}
        hits, ious = {}, {}
        for inst in instances:
            rec = by_id.get(inst.id)
            if rec is None or rec.failed or not rec.per_target_iou:
                hits[inst.id], ious[inst.id] = False, 0.0
            else:
                hits[inst.id] = all(rec.per_target_hit)
                ious[inst.id] = sum(rec.per_target_iou) / len(rec.per_target_iou)
        return hits, ious

    direct = [per_instance(p) for p in args.direct]
    cot = [per_instance(p) for p in args.cot]

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    counts = {"easy": 0, "medium": 0, "hard": 0}
    with out_path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            inputs = TierInputs(
                image_count=len(inst.images),
                model_correct=[h[inst.id] for h, _ in direct + cot],
                iou_direct=[i[inst.id] for _, i in direct],
                iou_cot=[i[inst.id] for _, i in cot],
            )
            label = tier(inputs)
            counts[label] += 1
            fh.write(json.dumps({"id": inst.id, "tier": label}) + "\n")
    print(json.dumps(counts))
    print(f"tiers: {out_path}")
    return 0


def cmd_compare(args) -> int:
    from .scoring import ScoreReport

    def load_report(path):
        obj = json.loads(Path(path).read_text("utf-8"))
        return ScoreReport.from_accuracies(
            {k: v["accuracy"] for k, v in obj["per_task"].items()})

    delta = compare(load_report(args.report_a), load_report(args.report_b))
    print(json.dumps(delta.to_json(), indent=2, sort_keys=True))
    return 0


def _forge_config(args) -> ForgeConfig:
    cfg = ForgeConfig(seed=args.seed)
    if getattr(args, "forge_config", None):
        raw = json.loads(Path(args.forge_config).read_text("utf-8"))
        known = {f.name for f in dataclasses.fields(ForgeConfig)}
        bad = sorted(set(raw) - known)
        if bad:
            raise ForgeError(f"unknown forge config keys: {bad}")
        if "common_exclusions" in raw:
            raw["common_exclusions"] = frozenset(raw["common_exclusions"])
        for key in ("region_aspect_range", "region_area_ratio_range",
                    "tracking_frames", "group_size"):
            if key in raw:
                raw[key] = tuple(raw[key])
        cfg = dataclasses.replace(cfg, **raw)
    return cfg


def cmd_forge_regions(args) -> int:
    cfg = _forge_config(args)
    for rec in load_annotations(args.annotations):
        kept = filter_regions(rec, cfg)
        print(json.dumps({
            "image": rec.image_path,
            "kept": [{"label": o.label, "box": list(o.box.as_tuple())} for o in kept],
        }))
    return 0


def cmd_forge_groups(args) -> int:
    cfg = dataclasses.replace(_forge_config(args), grouping_mode=args.mode)
    index = load_embedding_index(args.index) if args.index else None
    records = load_annotations(args.annotations) if args.annotations else None
    groups = make_groups(args.mode, cfg, index=index, records=records)
    lines = [json.dumps({"group": k, "images": g}) for k, g in enumerate(groups)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(groups)} groups: {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_forge_tasks(args) -> int:
    cfg = _forge_config(args)
    records = load_annotations(args.annotations)
    instances = make_task_set(records, TaskKind(args.task), cfg, out_dir=args.crops)
    save_dataset(instances, args.out)
    print(f"{len(instances)} instances: {args.out}")
    return 0


def cmd_forge_synth(args) -> int:
    cfg = _forge_config(args)

    def canon(p: str) -> str:
        # group files may carry paths relative to the invocation directory
        # while loaded annotations are absolute; join on the resolved file
        return str(Path(p).resolve()) if Path(p).exists() else p

    records = {canon(r.image_path): r for r in load_annotations(args.annotations)}
    groups = [[canon(p) for p in json.loads(line)["images"]]
              for line in Path(args.groups).read_text("utf-8").splitlines() if line]

    def client(model):
        return ChatClient(ModelEndpoint(base_url=args.endpoint, model=model,
                                        max_concurrency=args.concurrency))

    instances, stats = synthesize_freeform(
        groups, records,
        caption_client=client(args.caption_model),
        refine_client=client(args.refine_model),
        instruct_client=client(args.instruct_model),
    )
    save_dataset(instances, args.out)
    print(json.dumps(stats.as_dict()))
    print(f"{len(instances)} instances: {args.out}")
    return 0


def cmd_forge_manifest(args) -> int:
    sets: dict[str, list | int] = {}
    for item in args.set:
        name, _, value = item.partition("=")
        if not value:
            raise ForgeError(f"--set takes name=SIZE or name=FILE, got {item!r}")
        if value.isdigit():
            sets[name] = int(value)
        else:
            sets[name] = [json.loads(line)["id"]
                          for line in Path(value).read_text("utf-8").splitlines() if line]
    manifest = stage_manifest(args.stage, sets, args.total, seed=args.seed)
    out = json.dumps(manifest.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(out + "\n")
        print(json.dumps(manifest.counts, sort_keys=True))
        print(f"manifest: {args.out}")
    else:
        print(out)
    return 0


def cmd_merge(args) -> int:
    archives = [read_archive(p) for p in args.archives]
    weights = None
    if args.weights:
        weights = [float(w) for w in args.weights.split(",")]
    merged = merge(archives, weights=weights)
    write_archive(merged, args.out)
    print(f"merged {len(archives)} archives -> {args.out}")
    return 0


def cmd_diff(args) -> int:
    report = diff(read_archive(args.archive_a), read_archive(args.archive_b))
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_slice(args) -> int:
    from PIL import Image

    with Image.open(args.image) as im:
        width, height = im.size
    if args.grid:
        m = re.fullmatch(r"(\d+)x(\d+)", args.grid)
        if not m:
            raise JournalError(f"--grid takes RxC, got {args.grid!r}")
        spec = GridSpec(int(m.group(1)), int(m.group(2)), overlap=args.overlap)
    else:
        auto = default_grid(width, height)
        spec = GridSpec(auto.rows, auto.cols, overlap=args.overlap)
    grid = slice_grid(width, height, spec)
    out_dir = Path(args.out)
    paths = slice_image(args.image, grid, out_dir / "tiles")
    # tile references are stored relative to the dataset file, making the
    # output directory a self-contained, relocatable bundle
    rel_paths = [p.relative_to(out_dir) for p in paths]
    inst = to_group_instance(args.question, rel_paths, grid, args.image,
                             instance_id=f"sliced-{Path(args.image).stem}")
    dataset_path = out_dir / "sliced.jsonl"
    save_dataset([inst], dataset_path)
    sys.stdout.write(dataset_path.read_text("utf-8"))
    print(f"{len(paths)} tiles under {out_dir / 'tiles'}", file=sys.stderr)
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="migkit",
        description="Multi-image grounding toolkit: evaluate, score, tier, forge, "
                    "merge, slice, validate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset file against the schema")
    p.add_argument("--dataset", required=True)
    p.add_argument("--skip-images", action="store_true",
                   help="do not require image files to exist")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("evaluate", help="run a dataset against a chat endpoint")
    p.add_argument("--dataset")
    p.add_argument("--endpoint", help="base URL of an OpenAI-compatible API")
    p.add_argument("--model")
    p.add_argument("--strategy", choices=["direct", "cot_single", "cot_multi"])
    p.add_argument("--form", choices=["polling", "all"])
    p.add_argument("--concurrency", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--out")
    p.add_argument("--max-instances", type=int, dest="max_instances")
    p.add_argument("--templates", help="JSON template bank overriding the built-in one")
    p.add_argument("--config", help="JSON file with defaults for any flag above")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="score a journal against its dataset")
    p.add_argument("--journal", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("tier", help="assign easy/medium/hard labels from reference runs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--direct", nargs="+", required=True,
                   help="reference-model journals without the two-step strategy")
    p.add_argument("--cot", nargs="+", required=True,
                   help="matching journals with it, same order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tier)

    p = sub.add_parser("compare", help="per-task deltas between two score reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(func=cmd_compare)

    forge = sub.add_parser("forge", help="training-data construction pipelines")
    fsub = forge.add_subparsers(dest="forge_command", required=True)

    p = fsub.add_parser("regions", help="apply the region quality gates")
    p.add_argument("--annotations", required=True)
    p.add_argument("--forge-config", dest="forge_config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forge_regions)

    p = fsub.add_parser("groups", help="group images for synthesis")
    p.add_argument("--mode", choices=["clip_adaptive", "random", "common_object"],
                   default="clip_adaptive")
    p.add_argument("--index", help="embedding index JSONL (clip_adaptive)")
    p.add_argument("--annotations", help="annotation JSONL (random/common_object)")
    p.add_argument("--forge-config", dest="forge_config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forge_groups)

    p = fsub.add_parser("tasks", help="build one task's training set")
    p.add_argument("--annotations", required=True)
    p.add_argument("--task", required=True,
                   choices=[t.value for t in TaskKind if t != TaskKind.FREEFORM])
    p.add_argument("--out", required=True)
    p.add_argument("--crops", help="directory for region crops (region_locating)")
    p.add_argument("--forge-config", dest="forge_config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forge_tasks)

    p = fsub.add_parser("synth", help="free-form synthesis against LLM endpoints")
    p.add_argument("--groups", required=True, help="group JSONL from `forge groups`")
    p.add_argument("--annotations", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--caption-model", required=True)
    p.add_argument("--refine-model", required=True)
    p.add_argument("--instruct-model", required=True)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--forge-config", dest="forge_config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forge_synth)

    p = fsub.add_parser("manifest", help="stage training-mix sample counts")
    p.add_argument("--stage", type=int, required=True, choices=[1, 2])
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--set", action="append", default=[],
                   metavar="NAME=SIZE|NAME=FILE", help="one per mix source")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forge_manifest)

    p = sub.add_parser("merge", help="average checkpoint archives elementwise")
    p.add_argument("archives", nargs="+")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--weights", help="comma-separated, nonnegative, summing to 1")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("diff", help="per-tensor deltas between two archives")
    p.add_argument("archive_a")
    p.add_argument("archive_b")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("slice", help="tile a high-resolution image into a "
                                     "group-grounding instance")
    p.add_argument("--image", required=True)
    p.add_argument("--grid", help="RxC; defaults to the smallest grid with tiles "
                                  "at most 1024px on the long side")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--question", required=True)
    p.add_argument("--out", default="sliced")
    p.set_defaults(func=cmd_slice)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
