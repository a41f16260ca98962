"""Axis-aligned box arithmetic, coordinate spaces, IoU and hit testing.

All areas use continuous-geometry semantics: area = (x2 - x1) * (y2 - y1).
Degenerate (zero-area) boxes are legal values and always score IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

NORM_RANGE = 1000  # norm1000 coordinates live in [0, 999], scaled by /1000


class GeometryError(ValueError):
    pass


class SpaceMismatchError(GeometryError):
    """Raised when an operation mixes boxes from different coordinate spaces."""


@dataclass(frozen=True)
class CoordSpace:
    """Coordinate space a box lives in: ``pixel(width, height)`` or ``norm1000``."""

    kind: str  # "pixel" | "norm1000"
    width: int | None = None
    height: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "pixel":
            if self.width is None or self.height is None:
                raise GeometryError("pixel space requires width and height")
            if self.width < 1 or self.height < 1:
                raise GeometryError(
                    f"pixel space must be at least 1x1, got {self.width}x{self.height}"
                )
        elif self.kind == "norm1000":
            if self.width is not None or self.height is not None:
                raise GeometryError("norm1000 space carries no dimensions")
        else:
            raise GeometryError(f"unknown coordinate space kind: {self.kind!r}")

    @classmethod
    def pixel(cls, width: int, height: int) -> "CoordSpace":
        return cls("pixel", width, height)

    @classmethod
    def norm1000(cls) -> "CoordSpace":
        return cls("norm1000")

    def dims(self) -> tuple[float, float]:
        if self.kind == "pixel":
            return float(self.width), float(self.height)
        return float(NORM_RANGE), float(NORM_RANGE)


NORM1000 = CoordSpace.norm1000()


@dataclass(frozen=True)
class BBox:
    """Corner-form box (x1, y1, x2, y2) with x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise GeometryError(f"box coordinates must be finite, got {self.as_tuple()}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"box corners out of order: {self.as_tuple()}")

    @classmethod
    def from_corners(
        cls, x1: float, y1: float, x2: float, y2: float, canonicalize: bool = False
    ) -> tuple["BBox", bool]:
        """Build a box, optionally swapping reversed corners.

        Returns (box, swapped). Model output sometimes carries swapped corners;
        rejecting it outright would understate accuracy, so the parser opts in
        to canonicalization and records the swap.
        """
        swapped = False
        if canonicalize:
            if x1 > x2:
                x1, x2 = x2, x1
                swapped = True
            if y1 > y2:
                y1, y2 = y2, y1
                swapped = True
        return cls(float(x1), float(y1), float(x2), float(y2)), swapped

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clamp(self, xmax: float, ymax: float, xmin: float = 0.0, ymin: float = 0.0) -> "BBox":
        def cl(v: float, lo: float, hi: float) -> float:
            return min(max(v, lo), hi)

        return BBox(
            cl(self.x1, xmin, xmax),
            cl(self.y1, ymin, ymax),
            cl(self.x2, xmin, xmax),
            cl(self.y2, ymin, ymax),
        )


@dataclass(frozen=True)
class Region:
    """A box bound to one image of an instance, in a declared coordinate space."""

    image_index: int
    box: BBox
    space: CoordSpace

    def __post_init__(self) -> None:
        if self.image_index < 0:
            raise GeometryError(f"image_index must be >= 0, got {self.image_index}")

    def iou(self, other: "Region") -> float:
        if self.space != other.space:
            raise SpaceMismatchError(
                f"cannot compare boxes across spaces: {self.space} vs {other.space}"
            )
        return iou(self.box, other.box)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union with continuous areas; 0/0 is defined as 0."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def hit(pred: BBox, gt: BBox, threshold: float = 0.5) -> bool:
    """True iff IoU is strictly greater than the threshold."""
    return iou(pred, gt) > threshold


def convert(box: BBox, src: CoordSpace, dst: CoordSpace) -> BBox:
    """Linear rescale between coordinate spaces.

    norm1000 is treated as 1000 equal bins over the image: norm -> pixel maps
    c to c * dim / 1000 (so the full-frame box (0,0,999,999) lands 1px short
    of the far edge, negligible against the 0.5-IoU decision boundary).
    """
    if src == dst:
        return box
    sw, sh = src.dims()
    dw, dh = dst.dims()
    return BBox(
        box.x1 * dw / sw,
        box.y1 * dh / sh,
        box.x2 * dw / sw,
        box.y2 * dh / sh,
    )


def to_pixel(region: Region, width: int, height: int) -> BBox:
    """Region's box expressed in the pixel space of its image."""
    return convert(region.box, region.space, CoordSpace.pixel(width, height))
