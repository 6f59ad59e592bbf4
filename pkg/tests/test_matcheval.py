import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oneshotbench.annotations import BoundingBox, InstanceAnnotation
from oneshotbench.episodes import EvalQuery
from oneshotbench.matcheval import (
    Detection,
    EvalConfig,
    EvalResult,
    GapReport,
    ProtocolViolation,
    average_precision,
    evaluate_run,
    gap_report,
    iou,
    read_detections,
    report_csv,
    write_detections,
    write_report,
)
from oneshotbench.protocol import CategorySplit

from conftest import make_dataset
from oracles import brute_force_ap, pixel_iou


def test_iou_examples():
    a, b = BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 10, 10)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(a, b) == pytest.approx(pixel_iou((0, 0, 10, 10), (5, 0, 10, 10)), abs=1e-15)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 3, 3)) == 0.0


int_box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 15), st.integers(1, 15))


@settings(max_examples=200, deadline=None)
@given(int_box, int_box)
def test_iou_matches_pixel_count_and_is_symmetric(a, b):
    ba, bb = BoundingBox(*a), BoundingBox(*b)
    assert iou(ba, bb) == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert iou(ba, bb) == iou(bb, ba)


def gt(i, image_id, box, crowd=False, cat=1):
    return InstanceAnnotation(i, image_id, cat, BoundingBox(*box), crowd)


def det(image_id, box, score, cat=1):
    return Detection(image_id, cat, BoundingBox(*box), score)


def test_single_true_positive():
    g = [gt(1, 1, (0, 0, 10, 10))]
    d = [det(1, (2, 0, 10, 10), 0.7)]  # IoU 8/12 = 0.67
    assert average_precision(d, g) == 1.0


def test_miss_then_hit():
    g = [gt(1, 1, (0, 0, 10, 10))]
    d = [det(1, (50, 50, 10, 10), 0.9), det(1, (0, 0, 10, 10), 0.8)]
    assert average_precision(d, g) == pytest.approx(0.5, abs=1e-12)
    assert brute_force_ap([(1, (50, 50, 10, 10), 0.9), (1, (0, 0, 10, 10), 0.8)], [(1, (0, 0, 10, 10), False)]) == pytest.approx(0.5)


def test_no_detections_and_no_gt():
    assert average_precision([], [gt(1, 1, (0, 0, 5, 5))]) == 0.0
    assert average_precision([det(1, (0, 0, 5, 5), 0.5)], []) is None
    assert average_precision([], [gt(1, 1, (0, 0, 5, 5), crowd=True)]) is None


def test_crowd_region_is_ignored():
    g = [gt(1, 1, (0, 0, 10, 10)), gt(2, 1, (50, 50, 40, 40), crowd=True)]
    d = [det(1, (55, 55, 10, 10), 0.9), det(1, (0, 0, 10, 10), 0.8)]
    assert average_precision(d, g) == 1.0


def test_each_gt_matched_once():
    g = [gt(1, 1, (0, 0, 10, 10))]
    d = [det(1, (0, 0, 10, 10), 0.9), det(1, (0, 0, 10, 10), 0.8)]
    ap = average_precision(d, g)
    assert ap == 1.0  # duplicate is an FP ranked after full recall


def random_problem(rng):
    n_img = int(rng.integers(1, 7))
    n_cat = int(rng.integers(1, 4))
    rows = []
    for _ in range(int(rng.integers(0, 9))):
        x, y = rng.integers(0, 30, 2)
        w, h = rng.integers(3, 15, 2)
        rows.append((int(rng.integers(1, n_img + 1)), int(rng.integers(1, n_cat + 1)), float(x), float(y), float(w), float(h),
                     bool(rng.random() < 0.15)))
    ds = make_dataset(rows or [(1, 1, 0.0, 0.0, 5.0, 5.0)], n_images=n_img, n_categories=n_cat, size=(60, 60))
    present = sorted({(a.image_id, a.category_id) for a in ds.annotations})
    queries = [EvalQuery(i, c, (), "train") for i, c in present]
    dets = []
    for _ in range(int(rng.integers(0, 9))):
        if not present:
            break
        i, c = present[int(rng.integers(len(present)))]
        anns = [a for a in ds.annotations if a.image_id == i]
        if anns and rng.random() < 0.6:
            base = anns[int(rng.integers(len(anns)))].bbox
            box = (base.x + rng.integers(-3, 4), base.y + rng.integers(-3, 4), base.w, base.h)
        else:
            box = (*rng.integers(0, 30, 2), *rng.integers(3, 15, 2))
        score = float(np.round(rng.random(), 1))  # coarse scores force ties
        dets.append(Detection(i, c, BoundingBox(*map(float, box)), score))
    heldout = set(range(2, n_cat + 1, 2))
    split = CategorySplit(0, set(range(1, n_cat + 1)) - heldout, heldout)
    return ds, queries, dets, split


def oracle_run(ds, queries, dets, split, all_point=False):
    queried = {}
    for q in queries:
        queried.setdefault(q.category_id, set()).add(q.image_id)
    per_cat = {}
    for cat, images in queried.items():
        d = [(x.image_id, (x.box.x, x.box.y, x.box.w, x.box.h), x.score) for x in dets if x.category_id == cat]
        g = [(a.image_id, (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h), a.is_crowd)
             for a in ds.annotations if a.category_id == cat and a.image_id in images]
        ap = brute_force_ap(d, g, all_point=all_point)
        if ap is not None:
            per_cat[cat] = ap
    groups = {}
    for name, ids in (("train", split.train_category_ids), ("heldout", split.heldout_category_ids)):
        vals = [v for c, v in per_cat.items() if c in ids]
        groups[name] = sum(vals) / len(vals) if vals else math.nan
    return per_cat, groups


@pytest.mark.parametrize("interpolation", ["points", "all"])
def test_evaluator_equals_brute_force_oracle(interpolation):
    rng = np.random.default_rng(2024)
    cfg = EvalConfig(interpolation=interpolation)
    t0 = time.perf_counter()
    for _ in range(200):
        ds, queries, dets, split = random_problem(rng)
        res = evaluate_run(dets, queries, ds, split, cfg)
        per_cat, groups = oracle_run(ds, queries, dets, split, all_point=interpolation == "all")
        assert res.per_category_ap.keys() == per_cat.keys()
        for c in per_cat:
            assert abs(res.per_category_ap[c] - per_cat[c]) <= 1e-9
        for g in groups:
            a, b = res.group_ap[g], groups[g]
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) <= 1e-9
    assert time.perf_counter() - t0 < 60


def test_perfect_detector_scores_one(small_synth):
    from oneshotbench.episodes import build_eval_queries
    from oneshotbench.protocol import make_splits

    split = make_splits(small_synth.categories)[0]
    queries = build_eval_queries(small_synth, split, 1, reference_size=8)
    dets = [Detection(a.image_id, a.category_id, a.bbox, 1.0) for a in small_synth.annotations]
    res = evaluate_run(dets, queries, small_synth, split)
    assert set(res.per_category_ap.values()) == {1.0}
    assert res.group_ap == {"train": 1.0, "heldout": 1.0}


def test_train_only_detections_give_zero_heldout():
    ds = make_dataset([(1, 1, 0, 0, 5, 5), (1, 2, 10, 10, 5, 5)])
    split = CategorySplit(0, {1}, {2})
    queries = [EvalQuery(1, 1, (), "train"), EvalQuery(1, 2, (), "heldout")]
    res = evaluate_run([det(1, (0, 0, 5, 5), 0.9)], queries, ds, split)
    assert res.group_ap == {"train": 1.0, "heldout": 0.0}


def test_detection_for_unqueried_pair_is_a_violation():
    ds = make_dataset([(1, 1, 0, 0, 5, 5), (2, 2, 0, 0, 5, 5)])
    split = CategorySplit(0, {1, 2}, set())
    with pytest.raises(ProtocolViolation):
        evaluate_run([det(2, (0, 0, 5, 5), 0.9, cat=1)], [EvalQuery(1, 1, (), "train")], ds, split)


def test_non_exhaustive_queries_can_be_dropped():
    from dataclasses import replace

    ds = make_dataset([(1, 1, 0, 0, 5, 5), (2, 1, 0, 0, 5, 5)])
    ds = replace(ds, exhaustive=False, not_exhaustive_map={2: {1}})
    split = CategorySplit(0, {1}, set())
    queries = [EvalQuery(1, 1, (), "train"), EvalQuery(2, 1, (), "train")]
    dets = [det(1, (0, 0, 5, 5), 0.9), det(2, (30, 30, 5, 5), 0.95)]
    kept = evaluate_run(dets, queries, ds, split)
    dropped = evaluate_run(dets, queries, ds, split, EvalConfig(drop_non_exhaustive=True))
    assert dropped.n_dropped_queries == 1 and dropped.per_category_ap[1] == 1.0
    assert kept.per_category_ap[1] < 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_score_scale_invariance(seed, factor):
    ds, queries, dets, split = random_problem(np.random.default_rng(seed))
    scaled = [Detection(d.image_id, d.category_id, d.box, d.score * factor) for d in dets]
    a = evaluate_run(dets, queries, ds, split)
    b = evaluate_run(scaled, queries, ds, split)
    assert a.per_category_ap == b.per_category_ap


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_top_ranked_true_positive_never_hurts(seed):
    rng = np.random.default_rng(seed)
    ds, queries, dets, split = random_problem(rng)
    before = evaluate_run(dets, queries, ds, split)
    # a perfect box on a still-unmatched GT, scored above everything
    for a in ds.annotations:
        if a.is_crowd:
            continue
        extra = Detection(a.image_id, a.category_id, a.bbox, 2.0)
        after = evaluate_run(dets + [extra], queries, ds, split)
        for c, v in before.per_category_ap.items():
            assert after.per_category_ap[c] >= v - 1e-12
        break


def test_gap_report_paper_arithmetic():
    coco = GapReport.from_aps(49.7, 22.8)
    assert coco.delta == pytest.approx(26.9, abs=1e-9)
    assert abs(100 * coco.relative - 45.9) <= 0.1
    lvis = GapReport.from_aps(31.5, 28.0)
    assert lvis.delta == pytest.approx(3.5, abs=1e-9)
    assert abs(100 * lvis.relative - 88.9) <= 0.1
    assert GapReport.from_aps(0.0, 5.0).relative is None


def make_results(values):
    """values[split][rep] = (train, heldout) as fractions."""
    out = []
    for s, reps in enumerate(values):
        for r, (t, h) in enumerate(reps):
            out.append(EvalResult({}, {"train": t, "heldout": h}, s, r))
    return out


def test_gap_report_means_and_ci():
    vals = [[(0.5, 0.2), (0.6, 0.3)], [(0.4, 0.2), (0.5, 0.1)]]
    rep = gap_report(make_results(vals))
    # repetition means over splits: train 45, 55; heldout 20, 20
    assert rep.train_ap == pytest.approx(50.0) and rep.heldout_ap == pytest.approx(20.0)
    from scipy import stats

    assert rep.ci95_train == pytest.approx(stats.t.ppf(0.975, 1) * np.std([45, 55], ddof=1) / math.sqrt(2))
    assert rep.ci95_heldout == 0.0
    assert (rep.n_splits, rep.n_repetitions) == (2, 2)


def test_identical_repetitions_zero_ci():
    rep = gap_report(make_results([[(0.3, 0.1)] * 5]))
    assert rep.ci95_train == 0.0 and rep.ci95_heldout == 0.0


def test_gap_report_split_order_invariant():
    rng = np.random.default_rng(0)
    res = make_results(rng.random((4, 5, 2)).tolist())
    a = gap_report(res)
    b = gap_report(list(reversed(res)))
    assert a == b


def test_io_round_trips(tmp_path):
    dets = [det(1, (0.5, 1, 2, 3), 0.25), det(2, (1, 1, 1, 1), 1.0, cat=3)]
    write_detections(dets, tmp_path / "d.jsonl")
    assert read_detections(tmp_path / "d.jsonl") == dets
    res = make_results([[(0.5, 0.25), (0.75, 0.125)]])
    rep = gap_report(res)
    write_report(res, rep, tmp_path / "r.json", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "split,repetition,group,ap50,ci95"
    assert len(lines) == 1 + 2 * 2 + 2
    assert GapReport.from_dict(rep.to_dict()) == rep
    assert EvalResult.from_dict(res[0].to_dict()) == res[0]
