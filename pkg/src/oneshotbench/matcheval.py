"""Example-based AP50 evaluation and generalization-gap reports.

Every detection is attributed to the category of the reference it was
produced for. Average precision is computed per category over the images in
which that category was queried, then averaged (unweighted) within the train
and held-out groups of a category split.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .annotations import BoundingBox, Dataset, InstanceAnnotation
from .protocol import CategorySplit

GROUPS = ("train", "heldout")


class ProtocolViolation(ValueError):
    """A detection was submitted for an (image, category) pair that was never queried."""


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "category_id": self.category_id,
            "bbox": self.box.to_list(),
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(int(d["image_id"]), int(d["category_id"]), BoundingBox(*map(float, d["bbox"])), float(d["score"]))


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    n_repetitions: int = 5
    k_shots: int = 1
    recall_points: int = 101
    interpolation: Literal["points", "all"] = "points"
    # drop (image, category) queries the dataset marks as not exhaustively labelled
    drop_non_exhaustive: bool = False

    def __post_init__(self):
        if not (0.0 < self.iou_threshold < 1.0):
            raise ValueError("iou_threshold must be in (0, 1)")
        if self.n_repetitions < 1:
            raise ValueError("n_repetitions must be >= 1")
        if self.recall_points < 2:
            raise ValueError("recall_points must be >= 2")


@dataclass
class EvalResult:
    per_category_ap: dict[int, float]
    group_ap: dict[str, float]
    split_index: int = 0
    repetition: int = 0
    category_group: dict[int, str] = field(default_factory=dict)
    n_excluded: int = 0  # categories queried but without scoreable ground truth
    n_dropped_queries: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category_ap"] = {str(k): v for k, v in sorted(self.per_category_ap.items())}
        d["category_group"] = {str(k): v for k, v in sorted(self.category_group.items())}
        d["group_ap"] = {g: _nan_to_none(v) for g, v in self.group_ap.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalResult":
        return cls(
            per_category_ap={int(k): float(v) for k, v in d["per_category_ap"].items()},
            group_ap={g: (math.nan if v is None else float(v)) for g, v in d["group_ap"].items()},
            split_index=int(d.get("split_index", 0)),
            repetition=int(d.get("repetition", 0)),
            category_group={int(k): v for k, v in d.get("category_group", {}).items()},
            n_excluded=int(d.get("n_excluded", 0)),
            n_dropped_queries=int(d.get("n_dropped_queries", 0)),
        )


@dataclass(frozen=True)
class GapReport:
    """Train vs held-out performance, all AP values in %AP50."""

    train_ap: float
    heldout_ap: float
    delta: float
    relative: Optional[float]  # None when train_ap == 0
    ci95_train: float = math.nan
    ci95_heldout: float = math.nan
    n_splits: int = 1
    n_repetitions: int = 1

    @classmethod
    def from_aps(cls, train_ap: float, heldout_ap: float, **kw) -> "GapReport":
        relative = None if train_ap == 0 else heldout_ap / train_ap
        return cls(train_ap, heldout_ap, train_ap - heldout_ap, relative, **kw)

    def to_dict(self) -> dict:
        return {k: _nan_to_none(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GapReport":
        return cls(**{k: (math.nan if v is None and k != "relative" else v) for k, v in d.items()})


def _nan_to_none(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


# -- geometry ------------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) and (M, 4) arrays of ``x1, y1, x2, y2`` boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _crowd_overlap(det: BoundingBox, crowd: BoundingBox) -> float:
    # crowd regions are scored by the fraction of the detection they cover
    ix = min(det.x2, crowd.x2) - max(det.x, crowd.x)
    iy = min(det.y2, crowd.y2) - max(det.y, crowd.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    return ix * iy / det.area


# -- average precision -----------------------------------------------------------

def match_detections(
    detections: Sequence[Detection], ground_truth: Sequence[InstanceAnnotation], iou_threshold: float
) -> tuple[list[float], list[bool], int]:
    """Greedy matching in descending score order.

    Returns scores and TP flags of the non-ignored detections (in ranked
    order) and the number of non-crowd ground-truth boxes.
    """
    gt_by_image: dict[int, list[InstanceAnnotation]] = defaultdict(list)
    crowd_by_image: dict[int, list[InstanceAnnotation]] = defaultdict(list)
    for g in ground_truth:
        (crowd_by_image if g.is_crowd else gt_by_image)[g.image_id].append(g)
    n_pos = sum(len(v) for v in gt_by_image.values())

    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched: set[int] = set()
    scores, flags = [], []
    for i in order:
        det = detections[i]
        best, best_iou = None, iou_threshold
        for g in gt_by_image.get(det.image_id, ()):
            if g.id in matched:
                continue
            v = iou(det.box, g.bbox)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            matched.add(best.id)
            scores.append(det.score)
            flags.append(True)
            continue
        if any(_crowd_overlap(det.box, c.bbox) >= iou_threshold for c in crowd_by_image.get(det.image_id, ())):
            continue  # ignore region
        scores.append(det.score)
        flags.append(False)
    return scores, flags, n_pos


def ap_from_flags(flags: Sequence[bool], n_pos: int, cfg: EvalConfig) -> float:
    if n_pos == 0:
        raise ValueError("AP is undefined without ground truth")
    if not len(flags):
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_pos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if cfg.interpolation == "all":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * envelope))
    levels = np.arange(cfg.recall_points) / (cfg.recall_points - 1)
    # tolerance so that e.g. recall 3/5 counts as reaching the 0.6 level
    idx = np.searchsorted(recall, levels - 1e-12, side="left")
    picked = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(picked))


def average_precision(
    detections: Sequence[Detection], ground_truth: Sequence[InstanceAnnotation], cfg: EvalConfig = EvalConfig()
) -> Optional[float]:
    """AP for one category; ``None`` when there is no non-crowd ground truth."""
    _, flags, n_pos = match_detections(detections, ground_truth, cfg.iou_threshold)
    if n_pos == 0:
        return None
    return ap_from_flags(flags, n_pos, cfg)


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        return math.nan
    return math.fsum(values) / len(values)


def evaluate_run(
    detector_outputs: Iterable[Detection],
    queries: Iterable,
    ds: Dataset,
    split: CategorySplit,
    cfg: EvalConfig = EvalConfig(),
    train_category_ids: Optional[Iterable[int]] = None,
    repetition: int = 0,
) -> EvalResult:
    """Score one evaluation run.

    ``train_category_ids`` narrows the train group (e.g. to the categories a
    subsampled model actually saw); categories in neither group are still
    scored per category but left out of both group means.
    """
    queried: dict[int, set[int]] = defaultdict(set)
    dropped: set[tuple[int, int]] = set()
    nem = ds.not_exhaustive_map or {}
    for q in queries:
        if cfg.drop_non_exhaustive and q.category_id in nem.get(q.image_id, ()):
            dropped.add((q.image_id, q.category_id))
            continue
        queried[q.category_id].add(q.image_id)

    dets_by_cat: dict[int, list[Detection]] = defaultdict(list)
    bad = []
    for d in detector_outputs:
        if d.image_id not in queried.get(d.category_id, ()):
            if (d.image_id, d.category_id) in dropped:
                continue
            bad.append((d.image_id, d.category_id))
            continue
        dets_by_cat[d.category_id].append(d)
    if bad:
        raise ProtocolViolation(f"detections for never-queried (image, category) pairs: {sorted(set(bad))[:10]}")

    train_ids = split.train_category_ids if train_category_ids is None else frozenset(train_category_ids)
    per_cat: dict[int, float] = {}
    groups: dict[int, str] = {}
    n_excluded = 0
    for cat in sorted(queried):
        images = queried[cat]
        gt = [a for a in ds.annotations_by_category.get(cat, ()) if a.image_id in images]
        ap = average_precision(dets_by_cat.get(cat, []), gt, cfg)
        if ap is None:
            n_excluded += 1
            continue
        per_cat[cat] = ap
        if cat in train_ids:
            groups[cat] = "train"
        elif cat in split.heldout_category_ids:
            groups[cat] = "heldout"
        else:
            groups[cat] = "other"
    group_ap = {g: _mean(ap for c, ap in per_cat.items() if groups[c] == g) for g in GROUPS}
    return EvalResult(per_cat, group_ap, split.split_index, repetition, groups, n_excluded, len(dropped))


def _ci95(values: Sequence[float]) -> float:
    n = len(values)
    if n < 2:
        return math.nan
    sd = float(np.std(np.asarray(values, dtype=float), ddof=1))
    return float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n))


def repetition_means(results: Iterable[EvalResult], group: str) -> dict[int, float]:
    """Mean over splits of the group AP for every repetition, in %AP50."""
    by_rep: dict[int, list[float]] = defaultdict(list)
    for r in results:
        v = r.group_ap.get(group, math.nan)
        if not math.isnan(v):
            by_rep[r.repetition].append(100.0 * v)
    return {rep: _mean(v) for rep, v in sorted(by_rep.items())}


def gap_report(results: Iterable[EvalResult]) -> GapReport:
    """Aggregate per-split, per-repetition results into a :class:`GapReport`.

    Each repetition is first averaged over splits; the report is the mean of
    those repetition means with a Student-t 95% interval across repetitions.
    """
    results = list(results)
    if not results:
        raise ValueError("gap_report needs at least one result")
    train = list(repetition_means(results, "train").values())
    held = list(repetition_means(results, "heldout").values())
    return GapReport.from_aps(
        _mean(train),
        _mean(held),
        ci95_train=_ci95(train),
        ci95_heldout=_ci95(held),
        n_splits=len({r.split_index for r in results}),
        n_repetitions=len({r.repetition for r in results}),
    )


# -- io ------------------------------------------------------------------------

def write_detections(detections: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def read_detections(path: str | Path) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_dict(json.loads(line)) for line in fh if line.strip()]


def report_rows(results: Iterable[EvalResult], report: GapReport) -> list[dict]:
    rows = []
    for r in sorted(results, key=lambda r: (r.split_index, r.repetition)):
        for g in GROUPS:
            v = r.group_ap.get(g, math.nan)
            rows.append({
                "split": r.split_index,
                "repetition": r.repetition,
                "group": g,
                "ap50": "" if math.isnan(v) else repr(100.0 * v),
                "ci95": "",
            })
    for g, ap, ci in (("train", report.train_ap, report.ci95_train), ("heldout", report.heldout_ap, report.ci95_heldout)):
        rows.append({
            "split": "all",
            "repetition": "all",
            "group": g,
            "ap50": "" if math.isnan(ap) else repr(ap),
            "ci95": "" if math.isnan(ci) else repr(ci),
        })
    return rows


def report_csv(results: Iterable[EvalResult], report: GapReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["split", "repetition", "group", "ap50", "ci95"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(results, report))
    return buf.getvalue()


def write_report(results: Sequence[EvalResult], report: GapReport, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(
        json.dumps({"report": report.to_dict(), "results": [r.to_dict() for r in results]}, sort_keys=True, indent=1),
        encoding="utf-8",
    )
    Path(csv_path).write_text(report_csv(results, report), encoding="utf-8")
