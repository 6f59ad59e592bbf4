"""
Category splits, subsampling and the generalization gap
=======================================================

Walk through the benchmark protocol on a small synthetic dataset: stripe the
categories into four hold-out splits, shrink the training set, build one-shot
evaluation queries and score a simulated detector on seen and unseen classes.
"""

import numpy as np

from oneshotbench.annotations import BoundingBox, dataset_stats
from oneshotbench.episodes import build_eval_queries
from oneshotbench.matcheval import Detection, evaluate_run, gap_report
from oneshotbench.protocol import SubsampleSpec, apply_split, make_splits, subsample_training_set
from oneshotbench.synthworld import preset, generate_dataset

# a crowded scene set: about 14 glyphs of 6 categories per image
ds = generate_dataset(preset("high-clutter", n_categories=16, seed=0), 40)
s = dataset_stats(ds)
print(f"{s.n_images} images, {s.n_instances} instances, Ins/Img {s.instances_per_image:.1f}, Cls/Img {s.classes_per_image:.1f}")

# every fourth category (by id) is held out; each split holds out a different quarter
splits = make_splits(ds.categories)
for sp in splits:
    print(f"split {sp.split_index}: held out {sorted(sp.heldout_category_ids)}")

# training data for split 0 never contains a held-out category
split = splits[0]
train = apply_split(ds, split, "train")
assert not {a.category_id for a in train.annotations} & split.heldout_category_ids

# fewer categories, or the same number of instances spread over all categories
for mode in ("category_fraction", "instance_matched_all"):
    sub = subsample_training_set(train, split.train_category_ids, SubsampleSpec(mode, 0.25, seed=0))
    m = sub.meta["subsample"]
    print(f"{mode:<22} {m['n_instances']:>4} instances over {len(m['category_ids'])} categories")

# one query per (image, category present); references come from other images
queries = build_eval_queries(ds, split, k=1, seed=0, reference_size=24)
print(f"{len(queries)} queries, {sum(q.group == 'heldout' for q in queries)} on held-out categories")

# a simulated detector: boxes jittered by up to 3 px, and unseen categories found only half the time
rng = np.random.default_rng(0)
dets = []
for q in queries:
    for a in ds.annotations_by_image[q.image_id]:
        if a.category_id != q.category_id:
            continue
        if q.group == "heldout" and rng.random() < 0.5:
            continue
        dx, dy = rng.integers(-3, 4, 2)
        box = BoundingBox(a.bbox.x + dx, a.bbox.y + dy, a.bbox.w, a.bbox.h)
        dets.append(Detection(q.image_id, q.category_id, box, float(rng.random())))

result = evaluate_run(dets, queries, ds, split)
report = gap_report([result])
print(f"train AP50 {report.train_ap:.1f}, held-out AP50 {report.heldout_ap:.1f}, "
      f"delta {report.delta:.1f}, relative {100 * report.relative:.1f}%")
