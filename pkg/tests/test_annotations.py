import json
import os
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from oneshotbench.annotations import (
    BoundingBox,
    Dataset,
    DatasetError,
    DatasetParseError,
    ImageRecord,
    IntegrityError,
    LoaderOptions,
    dataset_from_dict,
    dataset_stats,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    save_dataset,
)
from oneshotbench.synthworld import GenerationLog, generate_dataset

from conftest import make_dataset

MINIMAL = {
    "images": [{"id": 1, "width": 50, "height": 40, "file_name": "a.jpg"}],
    "annotations": [{"id": 7, "image_id": 1, "category_id": 3, "bbox": [1, 2, 10, 20], "iscrowd": 0}],
    "categories": [{"id": 3, "name": "dog"}],
}


def test_minimal_file_loads(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(MINIMAL))
    ds = load_dataset(path)
    assert (len(ds.images), len(ds.annotations), len(ds.categories)) == (1, 1, 1)
    assert ds.annotations[0].bbox == BoundingBox(1, 2, 10, 20)
    assert ds.exhaustive and ds.not_exhaustive_map is None


def test_dangling_image_id_names_offender():
    data = json.loads(json.dumps(MINIMAL))
    data["annotations"].append({"id": 99, "image_id": 999, "category_id": 3, "bbox": [0, 0, 1, 1]})
    with pytest.raises(IntegrityError) as err:
        dataset_from_dict(data)
    assert err.value.offenders == [99]


def test_dangling_category_id_names_offender():
    data = json.loads(json.dumps(MINIMAL))
    data["annotations"][0]["category_id"] = 5
    with pytest.raises(IntegrityError) as err:
        dataset_from_dict(data)
    assert err.value.offenders == [7]


def test_malformed_json_reports_byte_offset():
    text = '{"images": [], "annotations": [], "categories": [}'
    with pytest.raises(DatasetParseError) as err:
        loads_dataset(text)
    assert err.value.byte_offset == text.index("}")


def test_byte_offset_counts_multibyte_characters():
    text = '{"images": [], "x": "éé", "annotations": [,]}'
    with pytest.raises(DatasetParseError) as err:
        loads_dataset(text)
    assert err.value.byte_offset == len(text[: text.index(",]")].encode("utf-8"))


def test_out_of_bounds_box_is_clamped_and_degenerate_dropped(caplog):
    data = json.loads(json.dumps(MINIMAL))
    data["annotations"] = [
        {"id": 1, "image_id": 1, "category_id": 3, "bbox": [-5, 30, 20, 20]},
        {"id": 2, "image_id": 1, "category_id": 3, "bbox": [60, 0, 5, 5]},  # fully outside
        {"id": 3, "image_id": 1, "category_id": 3, "bbox": [5, 5, 0, 5]},
    ]
    with caplog.at_level("WARNING"):
        ds = dataset_from_dict(data)
    assert [a.id for a in ds.annotations] == [1]
    assert ds.annotations[0].bbox == BoundingBox(0, 30, 15, 10)
    assert "clamped" in caplog.text and "dropped 2" in caplog.text


def test_box_invariants():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 3)
    b = BoundingBox(1, 2, 3, 4)
    assert b.xyxy() == (1, 2, 4, 6)
    assert BoundingBox.from_xyxy(*b.xyxy()) == b
    assert b.area == 12


def test_pixels_must_match_size():
    import numpy as np

    with pytest.raises(ValueError):
        ImageRecord(1, 10, 20, pixels=np.zeros((10, 20)))


def test_non_exhaustive_requires_map():
    with pytest.raises(IntegrityError):
        Dataset((), (), (), exhaustive=False)
    Dataset((), (), (), exhaustive=False, not_exhaustive_map={})


def test_lvis_extension_round_trip():
    data = json.loads(json.dumps(MINIMAL))
    data["images"][0]["not_exhaustive_category_ids"] = [3]
    ds = dataset_from_dict(data)
    assert ds.not_exhaustive_map == {1: frozenset({3})}
    again = loads_dataset(dumps_dataset(ds))
    assert again == ds


def test_stats_direct_arithmetic():
    ds = make_dataset([(1, 1, 0, 0, 5, 5)] * 4 + [(2, 1, 0, 0, 5, 5)] * 2)
    st_ = dataset_stats(ds)
    assert (st_.instances_per_image, st_.classes_per_image) == (3.0, 1.0)
    assert (st_.n_images, st_.n_instances, st_.n_classes) == (2, 6, 1)


def test_stats_empty_images_error():
    with pytest.raises(DatasetError):
        dataset_stats(Dataset((), (), ()))


def test_stats_match_generator_bookkeeping(small_scene_cfg):
    log = GenerationLog()
    ds = generate_dataset(small_scene_cfg, 12, log=log)
    st_ = dataset_stats(ds)
    assert st_.n_instances == log.n_instances
    assert st_.instances_per_image == log.n_instances / log.n_images
    assert st_.classes_per_image == pytest.approx(sum(log.categories_per_image) / log.n_images, abs=1e-12)


def test_seeded_image_subset_is_deterministic():
    data = {
        "images": [{"id": i, "width": 10, "height": 10} for i in range(1, 21)],
        "annotations": [{"id": i, "image_id": i, "category_id": 1, "bbox": [0, 0, 2, 2]} for i in range(1, 21)],
        "categories": [{"id": 1, "name": "a"}],
    }
    a = dataset_from_dict(data, LoaderOptions(subset_size=5, subset_seed=4))
    b = dataset_from_dict(data, LoaderOptions(subset_size=5, subset_seed=4))
    assert a == b and len(a.images) == 5 and len(a.annotations) == 5


boxes_st = st.lists(
    st.tuples(
        st.integers(1, 4), st.integers(1, 3),
        st.floats(0, 40), st.floats(0, 40), st.floats(0.5, 30), st.floats(0.5, 30), st.booleans(),
    ),
    max_size=15,
)


@settings(max_examples=60, deadline=None)
@given(boxes_st)
def test_round_trip_property(rows):
    ds = make_dataset(rows, n_images=4, n_categories=3, size=(80, 80)) if rows else Dataset((), (), ())
    text = dumps_dataset(ds)
    again = loads_dataset(text)
    # boxes may be clamped on load; a second round trip must then be exact
    assert dumps_dataset(loads_dataset(dumps_dataset(again))) == dumps_dataset(again)
    assert len(again.images) == len(ds.images)


@settings(max_examples=60, deadline=None)
@given(boxes_st)
def test_round_trip_exact_for_in_bounds(rows):
    rows = [r for r in rows if r[2] + r[4] <= 80 and r[3] + r[5] <= 80]
    if not rows:
        return
    ds = make_dataset(rows, n_images=4, n_categories=3, size=(80, 80))
    assert loads_dataset(dumps_dataset(ds)) == ds


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_corrupted_references_are_rejected(data):
    doc = {
        "images": [{"id": i, "width": 30, "height": 30} for i in (1, 2, 3)],
        "annotations": [
            {"id": k, "image_id": (k % 3) + 1, "category_id": (k % 2) + 1, "bbox": [1, 1, 5, 5]} for k in range(1, 7)
        ],
        "categories": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}],
    }
    victim = data.draw(st.integers(0, 5))
    field = data.draw(st.sampled_from(["image_id", "category_id", "dup_id"]))
    if field == "dup_id":
        doc["annotations"][victim]["id"] = doc["annotations"][(victim + 1) % 6]["id"]
    else:
        doc["annotations"][victim][field] = data.draw(st.integers(4, 1000))
    with pytest.raises(IntegrityError):
        dataset_from_dict(doc)


def test_save_is_byte_stable(tmp_path):
    ds = dataset_from_dict(MINIMAL)
    save_dataset(ds, tmp_path / "a.json")
    save_dataset(load_dataset(tmp_path / "a.json"), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


COCO_TRAIN = os.environ.get("COCO_TRAIN_ANNOTATIONS", "")


@pytest.mark.skipif(not Path(COCO_TRAIN).is_file(), reason="set COCO_TRAIN_ANNOTATIONS to instances_train2017.json")
def test_coco_train_statistics():
    st_ = dataset_stats(load_dataset(COCO_TRAIN))
    assert st_.n_classes == 80
    assert abs(st_.instances_per_image - 7.3) <= 0.1
    assert abs(st_.classes_per_image - 2.9) <= 0.1
