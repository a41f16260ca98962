"""Multi-image grounding toolkit.

Evaluation protocol and metrics for multi-image grounding benchmarks, the
chain-of-thought inference strategies, difficulty tiering, training-data
construction pipelines, checkpoint weight merging, and high-resolution image
slicing.
"""

from .benchdata import (
    ImageRef,
    Instance,
    RunRecord,
    StepRecord,
    TaskKind,
    load_dataset,
    save_dataset,
    validate_benchmark,
)
from .dataforge import (
    AnnotatedObject,
    AnnotationRecord,
    EmbeddingIndex,
    ForgeConfig,
    adaptive_groups,
    filter_regions,
    load_embedding_index,
    make_task_set,
    save_embedding_index,
    stage_manifest,
    synthesize_freeform,
)
from .geometry import BBox, CoordSpace, Region, convert, hit, iou
from .hislicer import GridSpec, default_grid, map_back, slice_grid, to_group_instance
from .mergekit import TensorArchive, diff, merge, read_archive, write_archive
from .orchestrator import ChatClient, Journal, ModelEndpoint, run_batch, run_instance
from .outparse import extract_referring, parse_boxes, parse_image_choice, render_box_token
from .scoring import ScoreReport, TierInputs, compare, score, tier
from .templates import TemplateBank

__version__ = "0.1.0"

__all__ = [
    "BBox", "CoordSpace", "Region", "iou", "hit", "convert",
    "parse_boxes", "parse_image_choice", "extract_referring", "render_box_token",
    "TaskKind", "ImageRef", "Instance", "RunRecord", "StepRecord",
    "load_dataset", "save_dataset", "validate_benchmark",
    "ModelEndpoint", "ChatClient", "Journal", "run_instance", "run_batch",
    "TemplateBank",
    "ScoreReport", "TierInputs", "score", "tier", "compare",
    "AnnotationRecord", "AnnotatedObject", "ForgeConfig", "EmbeddingIndex",
    "filter_regions", "adaptive_groups", "make_task_set", "synthesize_freeform",
    "stage_manifest", "load_embedding_index", "save_embedding_index",
    "TensorArchive", "merge", "diff", "read_archive", "write_archive",
    "GridSpec", "slice_grid", "default_grid", "map_back", "to_group_instance",
    "__version__",
]
