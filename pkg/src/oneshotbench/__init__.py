"""One-shot object detection benchmark toolkit.

Modules:
    annotations  COCO-style datasets: load, validate, summarize
    protocol     category hold-out splits and subsampled training sets
    episodes     training episodes and k-shot evaluation queries
    matcheval    example-based AP50 and generalization-gap reports
    synthworld   seeded synthetic glyph scenes
    siamdet      desk-scale Siamese matching detector
    bench        experiment orchestration and the ``bench`` CLI
"""

__version__ = "0.1.0"

from .annotations import BoundingBox, Dataset, dataset_stats, load_dataset
from .matcheval import EvalConfig, GapReport, evaluate_run, gap_report
from .protocol import CategorySplit, SplitSpec, SubsampleSpec, apply_split, make_splits, subsample_training_set

__all__ = [
    "BoundingBox",
    "CategorySplit",
    "Dataset",
    "EvalConfig",
    "GapReport",
    "SplitSpec",
    "SubsampleSpec",
    "apply_split",
    "dataset_stats",
    "evaluate_run",
    "gap_report",
    "load_dataset",
    "make_splits",
    "subsample_training_set",
]
