from __future__ import annotations

from pathlib import Path

import pytest
from PIL import Image

from migkit.benchdata import ImageRef, Instance, TaskKind
from migkit.geometry import BBox, CoordSpace, Region


def write_image(path: Path, width: int = 64, height: int = 48,
                color=(120, 180, 200)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (width, height), color).save(path)
    return path


def region(image: int, x1, y1, x2, y2, space: str = "norm1000",
           dims: tuple[int, int] | None = None) -> Region:
    sp = CoordSpace.norm1000() if space == "norm1000" else CoordSpace.pixel(*dims)
    return Region(image, BBox(float(x1), float(y1), float(x2), float(y2)), sp)


def make_instance(tmp_path: Path, iid: str = "inst-0",
                  task: TaskKind = TaskKind.GROUP_GROUNDING,
                  n_images: int = 2, gt=None, query_text: str | None = "find it",
                  query_regions=None, size=(64, 48)) -> Instance:
    images = []
    for k in range(n_images):
        p = tmp_path / "images" / f"{iid}-{k}.png"
        write_image(p, *size)
        images.append(ImageRef(path=str(p), width=size[0], height=size[1]))
    return Instance(
        id=iid,
        task=task,
        images=images,
        query_text=query_text,
        query_regions=query_regions,
        ground_truth=gt if gt is not None else [region(0, 100, 100, 600, 600)],
    )


@pytest.fixture
def img_dir(tmp_path: Path) -> Path:
    d = tmp_path / "images"
    d.mkdir(exist_ok=True)
    return d
