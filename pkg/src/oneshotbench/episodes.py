"""Training episodes and evaluation queries for example-based detection.

A training episode pairs a scene with one reference crop of a category present
in it, taken from a *different* image, and relabels every box 1/0 depending
on whether it belongs to the reference category. Evaluation issues one query
per (image, present category) with ``k`` reference crops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .annotations import BoundingBox, Dataset, InstanceAnnotation
from .protocol import CategorySplit

DEFAULT_REFERENCE_SIZE = 64


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceCrop:
    source_annotation_id: Optional[int]
    pixels: Optional[np.ndarray] = field(repr=False, compare=False)
    category_id: int = 0
    is_empty: bool = False
    source_image_id: Optional[int] = None


@dataclass(frozen=True)
class TrainingEpisode:
    image_id: int
    reference: ReferenceCrop
    boxes: tuple[BoundingBox, ...]
    labels: tuple[int, ...]
    annotation_ids: tuple[int, ...] = ()
    same_image_reference: bool = False


@dataclass(frozen=True)
class EvalQuery:
    image_id: int
    category_id: int
    references: tuple[ReferenceCrop, ...]
    group: str
    insufficient_refs: bool = False
    same_image_reference: bool = False


def crop_reference(
    pixels: np.ndarray, box: BoundingBox, size: int = DEFAULT_REFERENCE_SIZE, context: float = 0.0
) -> np.ndarray:
    """Tight crop of ``box`` padded to a square with zeros and resized to ``size``."""
    h, w = pixels.shape[:2]
    mx, my = context * box.w, context * box.h
    x1 = max(int(math.floor(box.x - mx)), 0)
    y1 = max(int(math.floor(box.y - my)), 0)
    x2 = min(int(math.ceil(box.x + box.w + mx)), w)
    y2 = min(int(math.ceil(box.y + box.h + my)), h)
    crop = np.asarray(pixels[y1:y2, x1:x2], dtype=np.float64)
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    top, left = (side - ch) // 2, (side - cw) // 2
    square = np.zeros((side, side) + crop.shape[2:], dtype=np.float64)
    square[top : top + ch, left : left + cw] = crop
    zoom = (size / side, size / side) + (1,) * (crop.ndim - 2)
    out = ndimage.zoom(square, zoom, order=1, grid_mode=True, mode="grid-constant")
    return out[:size, :size]


def empty_reference(category_id: int, size: int = DEFAULT_REFERENCE_SIZE, channels: Optional[int] = None) -> ReferenceCrop:
    shape = (size, size) if channels is None else (size, size, channels)
    return ReferenceCrop(None, np.zeros(shape), category_id, True)


def _make_crop(ds: Dataset, ann: InstanceAnnotation, size: int, context: float) -> ReferenceCrop:
    pixels = ds.image_by_id[ann.image_id].pixels
    raster = None if pixels is None else crop_reference(pixels, ann.bbox, size, context)
    return ReferenceCrop(ann.id, raster, ann.category_id, False, ann.image_id)


def _instances(ds: Dataset, category_id: int) -> list[InstanceAnnotation]:
    return [a for a in ds.annotations_by_category.get(category_id, ()) if not a.is_crowd]


def sample_training_episode(
    ds: Dataset,
    image_id: int,
    rng: np.random.Generator,
    reference_size: int = DEFAULT_REFERENCE_SIZE,
    context: float = 0.0,
) -> TrainingEpisode:
    anns = [a for a in ds.annotations_by_image.get(image_id, ()) if not a.is_crowd]
    if not anns:
        raise EpisodeError(f"image {image_id} has no annotations")
    cats = sorted({a.category_id for a in anns})
    ref_cat = cats[int(rng.integers(len(cats)))]
    pool = [a for a in _instances(ds, ref_cat) if a.image_id != image_id]
    same_image = not pool
    if same_image:
        # category occurs in no other image: fall back to an instance of this one
        pool = [a for a in anns if a.category_id == ref_cat]
    source = pool[int(rng.integers(len(pool)))]
    reference = _make_crop(ds, source, reference_size, context)
    return TrainingEpisode(
        image_id=image_id,
        reference=reference,
        boxes=tuple(a.bbox for a in anns),
        labels=tuple(int(a.category_id == ref_cat) for a in anns),
        annotation_ids=tuple(a.id for a in anns),
        same_image_reference=same_image,
    )


class EpisodeSampler:
    """Seeded source of training episodes, one per annotated image per epoch.

    Each episode draws from its own generator seeded by ``(seed, epoch,
    image_id)``, so the stream does not depend on the order it is consumed in.
    """

    def __init__(self, ds: Dataset, seed: int = 0, reference_size: int = DEFAULT_REFERENCE_SIZE, context: float = 0.0):
        self.ds = ds
        self.seed = seed
        self.reference_size = reference_size
        self.context = context
        self.image_ids = sorted(
            im.id for im in ds.images if any(not a.is_crowd for a in ds.annotations_by_image[im.id])
        )
        if not self.image_ids:
            raise EpisodeError("dataset has no annotated images")

    def episode(self, epoch: int, image_id: int) -> TrainingEpisode:
        rng = np.random.default_rng([self.seed, epoch, image_id])
        return sample_training_episode(self.ds, image_id, rng, self.reference_size, self.context)

    def epoch_order(self, epoch: int) -> list[int]:
        order = list(self.image_ids)
        np.random.default_rng([self.seed, epoch, 2**31 - 1]).shuffle(order)
        return order

    def epoch(self, epoch: int) -> Iterator[TrainingEpisode]:
        for image_id in self.epoch_order(epoch):
            yield self.episode(epoch, image_id)


def build_eval_queries(
    ds: Dataset,
    split: CategorySplit,
    k: int = 1,
    empty_refs: bool = False,
    seed: int = 0,
    reference_size: int = DEFAULT_REFERENCE_SIZE,
    context: float = 0.0,
    categories: Optional[Iterable[int]] = None,
) -> list[EvalQuery]:
    """One query per (image, present category), references drawn from other images.

    References are sampled without replacement, falling back to sampling with
    replacement (``insufficient_refs``) when fewer than ``k`` exist, and to
    other instances in the query image (``same_image_reference``) when the
    category appears nowhere else. ``categories`` optionally restricts which
    categories are queried.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    allowed = None if categories is None else set(categories)
    queries = []
    for im in sorted(ds.images, key=lambda r: r.id):
        anns = [a for a in ds.annotations_by_image[im.id] if not a.is_crowd]
        for cat in sorted({a.category_id for a in anns}):
            group = split.group_of(cat)
            if group is None or (allowed is not None and cat not in allowed):
                continue
            rng = np.random.default_rng([seed, im.id, cat])
            pool = [a for a in _instances(ds, cat) if a.image_id != im.id]
            same_image = not pool
            if same_image:
                pool = [a for a in anns if a.category_id == cat]
            insufficient = len(pool) < k
            idx = rng.choice(len(pool), size=k, replace=insufficient)
            refs = []
            for i in idx:
                src = pool[int(i)]
                if empty_refs:
                    refs.append(ReferenceCrop(src.id, np.zeros((reference_size, reference_size)), cat, True, src.image_id))
                else:
                    refs.append(_make_crop(ds, src, reference_size, context))
            queries.append(EvalQuery(im.id, cat, tuple(refs), group, insufficient, same_image))
    return queries


# -- manifests -----------------------------------------------------------------

def episode_record(ep: TrainingEpisode, seed: Optional[int] = None, epoch: Optional[int] = None) -> dict:
    return {
        "kind": "train",
        "image_id": ep.image_id,
        "seed": seed,
        "epoch": epoch,
        "reference_category_id": ep.reference.category_id,
        "reference_annotation_id": ep.reference.source_annotation_id,
        "reference_image_id": ep.reference.source_image_id,
        "annotation_ids": list(ep.annotation_ids),
        "labels": list(ep.labels),
        "same_image_reference": ep.same_image_reference,
    }


def query_record(q: EvalQuery, seed: Optional[int] = None) -> dict:
    return {
        "kind": "eval",
        "image_id": q.image_id,
        "category_id": q.category_id,
        "group": q.group,
        "seed": seed,
        "reference_annotation_ids": [r.source_annotation_id for r in q.references],
        "reference_image_ids": [r.source_image_id for r in q.references],
        "empty_refs": all(r.is_empty for r in q.references),
        "insufficient_refs": q.insufficient_refs,
        "same_image_reference": q.same_image_reference,
    }


def write_manifest(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_query_manifest(path: str | Path) -> list[EvalQuery]:
    """Rebuild pixel-free queries from a manifest, enough for :func:`evaluate_run`."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind", "eval") != "eval":
                continue
            refs = tuple(
                ReferenceCrop(a, None, rec["category_id"], bool(rec.get("empty_refs")), i)
                for a, i in zip(rec["reference_annotation_ids"], rec["reference_image_ids"])
            )
            out.append(EvalQuery(
                rec["image_id"], rec["category_id"], refs, rec["group"],
                bool(rec.get("insufficient_refs")), bool(rec.get("same_image_reference")),
            ))
    return out
