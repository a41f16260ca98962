"""Build the embedding-index JSONL file from a directory of images.

Output format, one record per image:

    {"path": "<file path>", "dim": D, "embedding": [D floats]}

Rows are unit-L2 and the dimension is recorded on every record, matching what
the downstream grouping pipeline validates on load.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import get_encoder

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class SidecarError(RuntimeError):
    pass


@dataclass(frozen=True)
class SidecarConfig:
    image_dir: str
    output: str
    encoder: str = "pixel-stats"
    batch_size: int = 8
    device: str = "cpu"  # hint for model-backed encoders; pixel-stats ignores it

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise SidecarError("batch_size must be >= 1")


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def build_index(cfg: SidecarConfig) -> int:
    """Encode every decodable image under ``image_dir`` (sorted, recursive).

    Undecodable files are listed on stderr and skipped; an empty result is an
    error. Returns the number of records written.
    """
    root = Path(cfg.image_dir)
    if not root.is_dir():
        raise SidecarError(f"{root} is not a directory")
    candidates = sorted(p for p in root.rglob("*")
                        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    paths = []
    for p in candidates:
        if _decodable(p):
            paths.append(p)
        else:
            print(f"skip: {p} (not a decodable image)", file=sys.stderr)
    if not paths:
        raise SidecarError(f"no decodable images under {root}")

    encode = get_encoder(cfg.encoder)
    out_path = Path(cfg.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with out_path.open("w", encoding="utf-8") as fh:
        for start in range(0, len(paths), cfg.batch_size):
            batch = paths[start:start + cfg.batch_size]
            vectors = encode(batch)
            dim = vectors.shape[1]
            norms = np.linalg.norm(vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise SidecarError(f"encoder {cfg.encoder!r} produced non-unit rows")
            for p, vec in zip(batch, vectors):
                fh.write(json.dumps({"path": str(p), "dim": int(dim),
                                     "embedding": [float(v) for v in vec]}) + "\n")
                written += 1
    return written
