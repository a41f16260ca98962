"""Image encoders producing unit-normalized feature vectors.

``pixel-stats`` is the built-in default: a 16x16 RGB thumbnail plus a constant
bias channel, unit-normalized. It needs no model weights, is bitwise
deterministic, and gives identical vectors for identical files - which is all
the downstream grouping contract requires. ``clip:<model>`` routes through
sentence-transformers when the host environment can load that model.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

THUMB_SIDE = 16


class EncoderError(RuntimeError):
    pass


def _pixel_stats(paths: list[Path]) -> np.ndarray:
    rows = []
    for path in paths:
        with Image.open(path) as im:
            thumb = im.convert("RGB").resize((THUMB_SIDE, THUMB_SIDE), Image.BILINEAR)
        feat = np.asarray(thumb, dtype=np.float64).reshape(-1) / 255.0
        # bias channel keeps the norm positive even for an all-black image
        rows.append(np.concatenate([feat, [1.0]]))
    out = np.vstack(rows)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def _clip_encoder(model_name: str):
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError as e:
        raise EncoderError(
            "clip encoders need the sentence-transformers package") from e
    try:
        model = SentenceTransformer(model_name)
    except Exception as e:
        raise EncoderError(f"cannot load encoder {model_name!r}: {e}") from e

    def encode(paths: list[Path]) -> np.ndarray:
        images = [Image.open(p).convert("RGB") for p in paths]
        vecs = model.encode(images, normalize_embeddings=True,
                            show_progress_bar=False)
        for im in images:
            im.close()
        return np.asarray(vecs, dtype=np.float64)

    return encode


def get_encoder(name: str):
    """Encoder callable for a name: ``pixel-stats`` or ``clip:<model>``."""
    if name == "pixel-stats":
        return _pixel_stats
    if name.startswith("clip:"):
        return _clip_encoder(name.split(":", 1)[1])
    raise EncoderError(f"unknown encoder {name!r}; use pixel-stats or clip:<model>")
