"""N-way elementwise averaging of checkpoints stored as named-tensor archives.

Archive byte layout (little-endian throughout):

    [8-byte u64: header length][header JSON, UTF-8][payload bytes]

The header is ``{"version": 1, "meta": {...}, "tensors": {name: {"dtype":
"f32"|"f16", "shape": [...], "offset": N, "length": N}}}`` with offsets
relative to the payload start. Offsets and lengths must tile the payload
exactly: no overlap, no gap. The writer lays tensors out in sorted name order
so identical contents always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("float16"): "f16"}


class ArchiveError(ValueError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    name = _DTYPE_NAMES.get(arr.dtype)
    if name is None:
        raise ArchiveError(f"unsupported tensor dtype {arr.dtype}")
    return name


@dataclass
class TensorArchive:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, arr in self.tensors.items():
            _dtype_name(arr)
            if not isinstance(name, str) or not name:
                raise ArchiveError("tensor names must be non-empty strings")


def write_archive(archive: TensorArchive, path: str | Path) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(archive.tensors):
        arr = np.ascontiguousarray(archive.tensors[name])
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"dtype": _dtype_name(arr), "shape": list(arr.shape),
                         "offset": offset, "length": len(blob)}
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps({"version": 1, "meta": archive.meta, "tensors": entries},
                        sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in chunks:
            fh.write(blob)


def read_archive(path: str | Path) -> TensorArchive:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ArchiveError(f"{path}: too short for a header-length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise ArchiveError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8:8 + header_len].decode())
    except (UnicodeDecodeError, ValueError) as e:
        raise ArchiveError(f"{path}: bad header JSON: {e}") from e
    payload = raw[8 + header_len:]

    entries = header.get("tensors", {})
    spans = []
    tensors = {}
    for name, ent in entries.items():
        try:
            dtype = DTYPES[ent["dtype"]]
            shape = tuple(int(s) for s in ent["shape"])
            offset, length = int(ent["offset"]), int(ent["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise ArchiveError(f"{path}: tensor {name!r}: malformed entry: {e}") from e
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if length != expected:
            raise ArchiveError(
                f"{path}: tensor {name!r}: length {length} != prod(shape)*itemsize "
                f"{expected}"
            )
        if offset < 0 or offset + length > len(payload):
            raise ArchiveError(f"{path}: tensor {name!r}: span outside payload")
        spans.append((offset, length, name))
        tensors[name] = np.frombuffer(
            payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
            offset=offset).reshape(shape).copy()

    spans.sort()
    cursor = 0
    for offset, length, name in spans:
        if offset != cursor:
            kind = "overlap" if offset < cursor else "gap"
            raise ArchiveError(f"{path}: tensor {name!r}: payload {kind} at byte {offset}")
        cursor += length
    if cursor != len(payload):
        raise ArchiveError(
            f"{path}: payload has {len(payload) - cursor} trailing bytes not covered "
            "by any tensor"
        )
    return TensorArchive(tensors=tensors, meta=header.get("meta", {}))


def _check_compatible(archives: list[TensorArchive]) -> None:
    first = archives[0]
    names = sorted(first.tensors)
    for i, other in enumerate(archives[1:], start=2):
        other_names = sorted(other.tensors)
        if other_names != names:
            odd = sorted(set(names).symmetric_difference(other_names))[0]
            raise ArchiveError(f"archive {i}: tensor name set mismatch at {odd!r}")
        for name in names:
            a, b = first.tensors[name], other.tensors[name]
            if a.shape != b.shape:
                raise ArchiveError(
                    f"archive {i}: tensor {name!r}: shape {b.shape} != {a.shape}"
                )
            if a.dtype != b.dtype:
                raise ArchiveError(
                    f"archive {i}: tensor {name!r}: dtype {b.dtype} != {a.dtype}"
                )


def merge(archives: list[TensorArchive],
          weights: list[float] | None = None) -> TensorArchive:
    """Weighted elementwise mean, accumulated in float64 and cast back.

    Non-tensor metadata comes verbatim from the first archive: merging applies
    to weights only.
    """
    if len(archives) < 2:
        raise ArchiveError("merge needs at least 2 archives")
    _check_compatible(archives)
    if weights is None:
        weights = [1.0 / len(archives)] * len(archives)
    if len(weights) != len(archives):
        raise ArchiveError(f"{len(weights)} weights for {len(archives)} archives")
    if any(w < 0 for w in weights):
        raise ArchiveError("weights must be nonnegative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ArchiveError(f"weights sum to {sum(weights)!r}, expected 1")

    out = {}
    for name in archives[0].tensors:
        acc = weights[0] * archives[0].tensors[name].astype(np.float64)
        for w, arc in zip(weights[1:], archives[1:]):
            acc += w * arc.tensors[name].astype(np.float64)
        out[name] = acc.astype(archives[0].tensors[name].dtype)
    return TensorArchive(tensors=out, meta=dict(archives[0].meta))


@dataclass(frozen=True)
class TensorDelta:
    max_abs: float
    l2: float


@dataclass
class DiffReport:
    per_tensor: dict[str, TensorDelta]

    @property
    def overall_max(self) -> float:
        return max((d.max_abs for d in self.per_tensor.values()), default=0.0)

    def to_json(self) -> dict:
        return {
            "per_tensor": {k: {"max_abs": d.max_abs, "l2": d.l2}
                           for k, d in sorted(self.per_tensor.items())},
            "overall_max": self.overall_max,
        }


def diff(a: TensorArchive, b: TensorArchive) -> DiffReport:
    _check_compatible([a, b])
    report = {}
    for name in a.tensors:
        delta = a.tensors[name].astype(np.float64) - b.tensors[name].astype(np.float64)
        report[name] = TensorDelta(max_abs=float(np.max(np.abs(delta), initial=0.0)),
                                   l2=float(np.linalg.norm(delta)))
    return DiffReport(per_tensor=report)
