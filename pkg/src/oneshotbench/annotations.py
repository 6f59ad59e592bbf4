"""COCO-style detection datasets: loading, validation, serialization and summary stats.

Boxes follow the COCO ``[x, y, w, h]`` convention (left, top, width, height in
pixels). A :class:`Dataset` is immutable once built and is safe to share
read-only between workers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Base class for dataset loading problems."""


class DatasetParseError(DatasetError):
    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message if byte_offset is None else f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class IntegrityError(DatasetError):
    def __init__(self, message: str, offenders: Iterable = ()):
        self.offenders = list(offenders)
        super().__init__(f"{message}: {self.offenders}" if self.offenders else message)


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: BoundingBox
    is_crowd: bool = False


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: Optional[str] = None
    # raster of shape (height, width) or (height, width, channels); not part of equality
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id} has non-positive size")
        if self.pixels is not None and tuple(self.pixels.shape[:2]) != (self.height, self.width):
            raise ValueError(
                f"image {self.id}: pixels shape {self.pixels.shape} does not match "
                f"({self.height}, {self.width})"
            )


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError(f"category {self.id} has an empty name")


@dataclass(frozen=True)
class DatasetStats:
    n_classes: int
    n_images: int
    n_instances: int
    instances_per_image: float
    classes_per_image: float


@dataclass(frozen=True)
class Dataset:
    """Images, instance annotations and categories with referential integrity.

    ``exhaustive`` mirrors whether every instance of every class is labelled in
    every image. Non-exhaustive (LVIS-style) datasets carry a per-image set of
    category ids that were not exhaustively labelled; the map may be empty but
    must be given.
    """

    images: tuple[ImageRecord, ...]
    annotations: tuple[InstanceAnnotation, ...]
    categories: tuple[CategoryRecord, ...]
    exhaustive: bool = True
    not_exhaustive_map: Optional[dict[int, frozenset[int]]] = None
    # provenance tags (split index, subsample manifest); not part of equality
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.not_exhaustive_map is not None:
            object.__setattr__(
                self,
                "not_exhaustive_map",
                {int(k): frozenset(v) for k, v in self.not_exhaustive_map.items()},
            )
        if not self.exhaustive and self.not_exhaustive_map is None:
            raise IntegrityError("non-exhaustive dataset needs a not_exhaustive_map (possibly empty)")
        validate(self)

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    @cached_property
    def category_by_id(self) -> dict[int, CategoryRecord]:
        return {c.id: c for c in self.categories}

    @cached_property
    def annotations_by_image(self) -> dict[int, list[InstanceAnnotation]]:
        out: dict[int, list[InstanceAnnotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    @cached_property
    def annotations_by_category(self) -> dict[int, list[InstanceAnnotation]]:
        out: dict[int, list[InstanceAnnotation]] = {c.id: [] for c in self.categories}
        for a in self.annotations:
            out[a.category_id].append(a)
        return out

    @cached_property
    def category_ids(self) -> list[int]:
        return sorted(self.category_by_id)

    def categories_in_image(self, image_id: int) -> set[int]:
        return {a.category_id for a in self.annotations_by_image[image_id]}

    def tagged(self, **tags) -> "Dataset":
        return replace(self, meta={**self.meta, **tags})

    def with_annotations(self, annotations: Iterable[InstanceAnnotation], drop_empty_images: bool = False) -> "Dataset":
        annotations = tuple(annotations)
        images = self.images
        if drop_empty_images:
            keep = {a.image_id for a in annotations}
            images = tuple(im for im in images if im.id in keep)
        nem = self.not_exhaustive_map
        if nem is not None:
            ids = {im.id for im in images}
            nem = {k: v for k, v in nem.items() if k in ids}
        return replace(self, images=images, annotations=annotations, not_exhaustive_map=nem)


def validate(ds: Dataset) -> None:
    """Raise :class:`IntegrityError` if ids collide or references dangle."""
    image_ids = [im.id for im in ds.images]
    cat_ids = [c.id for c in ds.categories]
    ann_ids = [a.id for a in ds.annotations]
    for name, ids in (("image", image_ids), ("category", cat_ids), ("annotation", ann_ids)):
        if len(set(ids)) != len(ids):
            seen, dup = set(), []
            for i in ids:
                if i in seen:
                    dup.append(i)
                seen.add(i)
            raise IntegrityError(f"duplicate {name} ids", sorted(set(dup)))
    image_set, cat_set = set(image_ids), set(cat_ids)
    bad_img = [a.id for a in ds.annotations if a.image_id not in image_set]
    if bad_img:
        raise IntegrityError("annotations reference unknown image_id", bad_img)
    bad_cat = [a.id for a in ds.annotations if a.category_id not in cat_set]
    if bad_cat:
        raise IntegrityError("annotations reference unknown category_id", bad_cat)
    if ds.not_exhaustive_map:
        bad = [k for k, v in ds.not_exhaustive_map.items() if k not in image_set or not v <= cat_set]
        if bad:
            raise IntegrityError("not_exhaustive_category_ids reference unknown ids", bad)


@dataclass
class LoaderOptions:
    clamp: bool = True
    # optional seeded image subset (e.g. a fixed evaluation subset of a large val set)
    subset_size: Optional[int] = None
    subset_seed: int = 0


def _clamp(bbox: list, width: int, height: int) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in bbox)
    if x >= 0 and y >= 0 and x + w <= width and y + h <= height:
        return x, y, w, h  # untouched, so in-bounds boxes round-trip exactly
    x1, y1 = max(x, 0.0), max(y, 0.0)
    x2, y2 = min(x + w, float(width)), min(y + h, float(height))
    return x1, y1, x2 - x1, y2 - y1


def dataset_from_dict(data: dict, options: LoaderOptions | None = None) -> Dataset:
    options = options or LoaderOptions()
    if not isinstance(data, dict):
        raise DatasetParseError("top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise DatasetParseError(f"missing or non-list key {key!r}")
    try:
        images = [
            ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), im.get("file_name"))
            for im in data["images"]
        ]
        categories = [CategoryRecord(int(c["id"]), str(c["name"])) for c in data["categories"]]
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(f"malformed image or category record: {exc!r}") from exc

    sizes = {im.id: (im.width, im.height) for im in images}
    annotations = []
    n_clamped = n_dropped = 0
    dangling = []
    for raw in data["annotations"]:
        try:
            ann_id, image_id = int(raw["id"]), int(raw["image_id"])
            category_id, bbox = int(raw["category_id"]), raw["bbox"]
            crowd = bool(raw.get("iscrowd", 0))
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 numbers")
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"malformed annotation record {raw!r}: {exc}") from exc
        if image_id not in sizes:
            dangling.append(ann_id)
            continue
        x, y, w, h = (float(v) for v in bbox)
        if options.clamp:
            cx, cy, cw, ch = _clamp(bbox, *sizes[image_id])
            if (cx, cy, cw, ch) != (x, y, w, h):
                n_clamped += 1
            x, y, w, h = cx, cy, cw, ch
        if not (w > 0 and h > 0):
            n_dropped += 1
            continue
        annotations.append(InstanceAnnotation(ann_id, image_id, category_id, BoundingBox(x, y, w, h), crowd))
    if dangling:
        raise IntegrityError("annotations reference unknown image_id", dangling)
    if n_clamped:
        log.warning("clamped %d out-of-bounds boxes", n_clamped)
    if n_dropped:
        log.warning("dropped %d degenerate boxes", n_dropped)

    nem = None
    if any("not_exhaustive_category_ids" in im for im in data["images"]):
        nem = {
            int(im["id"]): frozenset(int(c) for c in im.get("not_exhaustive_category_ids", []))
            for im in data["images"]
        }
    exhaustive = bool(data.get("exhaustive", nem is None))

    if options.subset_size is not None and options.subset_size < len(images):
        rng = np.random.default_rng(options.subset_seed)
        picked = set(int(i) for i in rng.choice(sorted(sizes), size=options.subset_size, replace=False))
        images = [im for im in images if im.id in picked]
        annotations = [a for a in annotations if a.image_id in picked]
        if nem is not None:
            nem = {k: v for k, v in nem.items() if k in picked}

    return Dataset(tuple(images), tuple(annotations), tuple(categories), exhaustive, nem)


def loads_dataset(text: str | bytes, options: LoaderOptions | None = None) -> Dataset:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        # exc.pos counts characters, callers want bytes
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(f"invalid JSON: {exc.msg}", offset) from exc
    return dataset_from_dict(data, options)


def load_dataset(path: str | Path, options: LoaderOptions | None = None) -> Dataset:
    """Load a COCO-style annotation file."""
    return loads_dataset(Path(path).read_bytes(), options)


def dataset_to_dict(ds: Dataset) -> dict:
    images = []
    for im in sorted(ds.images, key=lambda r: r.id):
        rec = {"id": im.id, "width": im.width, "height": im.height}
        if im.file_name is not None:
            rec["file_name"] = im.file_name
        if ds.not_exhaustive_map is not None:
            rec["not_exhaustive_category_ids"] = sorted(ds.not_exhaustive_map.get(im.id, ()))
        images.append(rec)
    annotations = [
        {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": a.bbox.to_list(),
            "iscrowd": int(a.is_crowd),
        }
        for a in sorted(ds.annotations, key=lambda r: r.id)
    ]
    categories = [{"id": c.id, "name": c.name} for c in sorted(ds.categories, key=lambda r: r.id)]
    out = {"images": images, "annotations": annotations, "categories": categories}
    if not ds.exhaustive:
        out["exhaustive"] = False
    return out


def dumps_dataset(ds: Dataset) -> str:
    """Serialize with fixed key order, so equal datasets give identical bytes."""
    return json.dumps(dataset_to_dict(ds), sort_keys=True, separators=(",", ":"))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def dataset_stats(ds: Dataset) -> DatasetStats:
    if not ds.images:
        raise DatasetError("dataset has no images; per-image ratios are undefined")
    per_image = ds.annotations_by_image
    n_img = len(ds.images)
    classes = math.fsum(len({a.category_id for a in per_image[im.id]}) for im in ds.images)
    return DatasetStats(
        n_classes=len(ds.categories),
        n_images=n_img,
        n_instances=len(ds.annotations),
        instances_per_image=len(ds.annotations) / n_img,
        classes_per_image=classes / n_img,
    )
