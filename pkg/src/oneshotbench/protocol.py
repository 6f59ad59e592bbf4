"""Category hold-out splits, cross-dataset exclusion splits and training-set subsampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional

import numpy as np

from .annotations import CategoryRecord, Dataset, InstanceAnnotation


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    n_splits: int = 4
    # "id": ascending category id; "listed": order of the category list as given
    ordering: Literal["id", "listed"] = "id"

    def __post_init__(self):
        if self.n_splits < 2:
            raise ValueError("n_splits must be >= 2")
        if self.ordering not in ("id", "listed"):
            raise ValueError(f"unknown ordering {self.ordering!r}")


@dataclass(frozen=True)
class CategorySplit:
    split_index: int
    train_category_ids: frozenset[int]
    heldout_category_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "train_category_ids", frozenset(self.train_category_ids))
        object.__setattr__(self, "heldout_category_ids", frozenset(self.heldout_category_ids))
        overlap = self.train_category_ids & self.heldout_category_ids
        if overlap:
            raise ProtocolError(f"categories both train and held-out: {sorted(overlap)}")

    @property
    def all_category_ids(self) -> frozenset[int]:
        return self.train_category_ids | self.heldout_category_ids

    def group_of(self, category_id: int) -> Optional[str]:
        if category_id in self.train_category_ids:
            return "train"
        if category_id in self.heldout_category_ids:
            return "heldout"
        return None

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "train_category_ids": sorted(self.train_category_ids),
            "heldout_category_ids": sorted(self.heldout_category_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategorySplit":
        return cls(int(d["split_index"]), frozenset(d["train_category_ids"]), frozenset(d["heldout_category_ids"]))


SubsampleMode = Literal["category_fraction", "instance_matched_subset", "instance_matched_all"]
SUBSAMPLE_MODES = ("category_fraction", "instance_matched_subset", "instance_matched_all")


@dataclass(frozen=True)
class SubsampleSpec:
    mode: SubsampleMode = "category_fraction"
    fraction: float = 1.0
    seed: int = 0
    # instance_matched_all only: "instances" samples uniformly over annotations,
    # "per_category" spreads the budget evenly over categories
    sampling: Literal["instances", "per_category"] = "instances"

    def __post_init__(self):
        if self.mode not in SUBSAMPLE_MODES:
            raise ValueError(f"unknown subsample mode {self.mode!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.sampling not in ("instances", "per_category"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


def make_splits(categories: Iterable[CategoryRecord], spec: SplitSpec = SplitSpec()) -> list[CategorySplit]:
    """Stripe categories into ``spec.n_splits`` hold-out sets.

    The category at sorted position ``i`` is held out in split ``i % n_splits``
    and used for training in every other split.
    """
    cats = list(categories)
    if len(cats) < spec.n_splits:
        raise ProtocolError(f"need at least {spec.n_splits} categories, got {len(cats)}")
    ids = [c.id for c in cats]
    if spec.ordering == "id":
        ids = sorted(ids)
    universe = frozenset(ids)
    splits = []
    for s in range(spec.n_splits):
        held = frozenset(ids[s :: spec.n_splits])
        splits.append(CategorySplit(s, universe - held, held))
    return splits


def apply_split(ds: Dataset, split: CategorySplit, phase: Literal["train", "eval"]) -> Dataset:
    unknown = split.all_category_ids - set(ds.category_by_id)
    if unknown:
        raise ProtocolError(f"split references categories not in dataset: {sorted(unknown)}")
    if phase == "eval":
        return ds.tagged(split_index=split.split_index)
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    held = split.heldout_category_ids
    kept = [a for a in ds.annotations if a.category_id not in held]
    return ds.with_annotations(kept, drop_empty_images=True).tagged(split_index=split.split_index)


def make_exclusion_split(
    ds: Dataset, correspondence: Mapping[int, int], external_split: CategorySplit
) -> CategorySplit:
    """Hold out every category whose counterpart is held out in another dataset's split.

    Categories without a counterpart, or whose counterpart is a training
    category of ``external_split``, stay in the training set.
    """
    missing = set(correspondence) - set(ds.category_by_id)
    if missing:
        raise ProtocolError(f"correspondence keys not in dataset: {sorted(missing)}")
    universe = external_split.all_category_ids
    foreign = sorted({t for t in correspondence.values() if t not in universe})
    if foreign:
        raise ProtocolError(f"correspondents outside the external split's universe: {foreign}")
    held = frozenset(
        src for src, tgt in correspondence.items() if tgt in external_split.heldout_category_ids
    )
    train = frozenset(ds.category_by_id) - held
    return CategorySplit(external_split.split_index, train, held)


def n_categories_for_fraction(n: int, fraction: float) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4
    return int(math.ceil(fraction * n - 1e-9))


def _pick_categories(train_cats: Iterable[int], spec: SubsampleSpec) -> list[int]:
    ids = sorted(train_cats)
    k = n_categories_for_fraction(len(ids), spec.fraction)
    if k < 1:
        raise ProtocolError(f"fraction {spec.fraction} of {len(ids)} categories selects none")
    if k == len(ids):
        return ids
    rng = np.random.default_rng([spec.seed, 0])
    return sorted(int(c) for c in rng.choice(ids, size=k, replace=False))


def subsample_training_set(ds: Dataset, train_cats: Iterable[int], spec: SubsampleSpec) -> Dataset:
    """Build a category- or instance-subsampled training set.

    The subsample manifest (chosen categories, instance budget) is attached
    to the result as ``meta["subsample"]``.
    """
    train_cats = frozenset(train_cats)
    pool = sorted((a for a in ds.annotations if a.category_id in train_cats), key=lambda a: a.id)
    chosen = _pick_categories(train_cats, spec)
    chosen_set = set(chosen)
    subset = [a for a in pool if a.category_id in chosen_set]
    budget = len(subset)

    if spec.mode in ("category_fraction", "instance_matched_subset"):
        kept = subset
        used_cats = chosen
    else:
        if budget > len(pool):
            raise ProtocolError(f"instance budget {budget} exceeds {len(pool)} available annotations")
        rng = np.random.default_rng([spec.seed, 1])
        if spec.sampling == "instances":
            idx = rng.choice(len(pool), size=budget, replace=False)
        else:
            idx = _per_category_sample(pool, budget, rng)
        kept = [pool[i] for i in sorted(int(i) for i in idx)]
        used_cats = sorted(train_cats)

    manifest = {
        "mode": spec.mode,
        "fraction": spec.fraction,
        "seed": spec.seed,
        "sampling": spec.sampling,
        "instance_budget": budget,
        "category_ids": [int(c) for c in used_cats],
        "n_instances": len(kept),
    }
    return ds.with_annotations(kept, drop_empty_images=True).tagged(subsample=manifest)


def _per_category_sample(pool: list[InstanceAnnotation], budget: int, rng: np.random.Generator) -> np.ndarray:
    by_cat: dict[int, list[int]] = {}
    for i, a in enumerate(pool):
        by_cat.setdefault(a.category_id, []).append(i)
    for idx in by_cat.values():
        rng.shuffle(idx)
    # round-robin over categories in seeded order until the budget is spent
    order = sorted(by_cat)
    rng.shuffle(order)
    picked: list[int] = []
    depth = 0
    while len(picked) < budget:
        for c in order:
            if depth < len(by_cat[c]):
                picked.append(by_cat[c][depth])
                if len(picked) == budget:
                    break
        depth += 1
    return np.asarray(picked, dtype=int)


# -- manifests -----------------------------------------------------------------

def split_manifest(split: CategorySplit, subsample: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    out = split.to_dict()
    sub = subsample or {}
    out.update(
        seed=sub.get("seed", seed),
        mode=sub.get("mode"),
        fraction=sub.get("fraction"),
        instance_budget=sub.get("instance_budget"),
    )
    return out


def save_splits(splits: Iterable[CategorySplit], path: str | Path, seed: Optional[int] = None) -> None:
    records = [split_manifest(s, seed=seed) for s in splits]
    Path(path).write_text(json.dumps(records, sort_keys=True, indent=1), encoding="utf-8")


def load_splits(path: str | Path) -> list[CategorySplit]:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(records, dict):
        records = [records]
    return [CategorySplit.from_dict(r) for r in records]


def read_correspondence_csv(path: str | Path) -> dict[int, int]:
    """Read a two-column ``source_id,target_id`` CSV; a header row is optional."""
    out: dict[int, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                src, tgt = int(row[0]), int(row[1])
            except ValueError:
                if not out:
                    continue  # header
                raise ProtocolError(f"bad correspondence row {row!r}")
            out[src] = tgt
    return out
