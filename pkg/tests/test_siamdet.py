import numpy as np
import pytest

from oneshotbench.annotations import BoundingBox
from oneshotbench.episodes import EpisodeSampler, ReferenceCrop, crop_reference, empty_reference
from oneshotbench.matcheval import iou
from oneshotbench.siamdet import (
    DetectorError,
    DetectorModel,
    FeatureMap,
    TrainConfig,
    WindowFeatures,
    _extractor_grads,
    _pool_selected,
    batch_loss,
    build_batch,
    calibrate_features,
    center_head_inputs,
    detect,
    embed_reference,
    extract_features,
    grid_pool,
    init_model,
    load_model,
    logistic_loss_and_grad,
    match_features,
    model_from_bytes,
    model_to_bytes,
    nms,
    pool_weights,
    save_model,
    stack_batch,
    train_detector,
    window_boxes,
    window_pool,
    window_scores,
)
from oneshotbench.siamdet import _lr_factor
from oneshotbench.synthworld import SceneConfig, canonical_render, generate_dataset, generate_scene, make_glyph, preset

from oracles import central_difference, greedy_nms, relative_error


@pytest.fixture(scope="module")
def model():
    return init_model(TrainConfig(seed=0))


@pytest.fixture(scope="module")
def train_set():
    cfg = SceneConfig(canvas=(64, 64), n_categories=10, instances_per_image=4.0, categories_per_image=2.0, glyph_size=16.0, seed=11)
    return generate_dataset(cfg, 60)


@pytest.fixture(scope="module")
def trained():
    ds = generate_dataset(preset("high-clutter", seed=0), 120)
    return ds, train_detector(ds, None, TrainConfig(epochs=4, seed=0)).model


def glyph_raster(size=48, offset=(0, 0)):
    px = np.zeros((size, size))
    g = canonical_render(make_glyph(3), 16)
    y, x = 16 + offset[0], 12 + offset[1]
    px[y : y + 16, x : x + 16] = g
    return px


# -- features -------------------------------------------------------------------

def test_zero_raster_gives_constant_channels(model):
    grid = extract_features(np.zeros((32, 40)), model).grid
    assert grid.shape == (8, 10, model.channels)
    assert np.all(grid == grid[0, 0])


def test_features_are_deterministic(model):
    px = np.random.default_rng(0).random((32, 32))
    assert np.array_equal(extract_features(px, model).grid, extract_features(px, model).grid)


def test_shift_by_one_stride_shifts_one_cell(model):
    a = extract_features(glyph_raster(), model).grid
    b = extract_features(glyph_raster(offset=(0, model.stride)), model).grid
    # interior cells only: the boundary sees padding
    np.testing.assert_allclose(b[1:-1, 2:-1], a[1:-1, 1:-2], atol=1e-12)
    assert not np.allclose(a, b)


def test_raster_smaller_than_stride_rejected(model):
    with pytest.raises(DetectorError):
        extract_features(np.zeros((2, 10)), model)


def test_image_and_reference_share_the_extractor(model):
    crop = np.random.default_rng(1).random((24, 24))
    assert np.array_equal(embed_reference(crop, model), grid_pool(extract_features(crop, model).grid, model.grid))


def test_pool_weights_rows_are_bin_averages():
    for n in range(1, 9):
        for g in range(1, 4):
            w = pool_weights(n, g)
            np.testing.assert_allclose(w.sum(axis=1), 1.0)
            np.testing.assert_allclose(w.sum(axis=0), g / n)


def test_grid_one_is_global_average():
    grid = np.random.default_rng(2).random((5, 7, 4))
    np.testing.assert_allclose(grid_pool(grid, 1), grid.mean(axis=(0, 1)))
    np.testing.assert_allclose(window_pool(grid, 3, 1)[1, 2], grid[1:4, 2:5].mean(axis=(0, 1)))


def test_window_pool_matches_grid_pool():
    grid = np.random.default_rng(3).random((9, 9, 2))
    np.testing.assert_allclose(window_pool(grid, 5, 3)[2, 1], grid_pool(grid[2:7, 1:6], 3))


def test_empty_references_embed_identically(model):
    a = embed_reference(empty_reference(1), model)
    b = embed_reference(empty_reference(7), model)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, grid_pool(extract_features(np.zeros((24, 24)), model).grid, model.grid))


def test_k_shot_embedding_is_the_mean(model):
    rng = np.random.default_rng(4)
    crops = [ReferenceCrop(i, rng.random((24, 24)), 1) for i in range(3)]
    one = embed_reference(crops[0], model)
    np.testing.assert_allclose(embed_reference([crops[0]], model), one)
    np.testing.assert_allclose(embed_reference([crops[0]] * 5, model), one, atol=1e-15)
    np.testing.assert_allclose(embed_reference(crops, model), np.mean([embed_reference(c, model) for c in crops], axis=0))


def test_match_features_contract():
    rng = np.random.default_rng(5)
    grid = rng.normal(size=(3, 4, 6))
    out = match_features(FeatureMap(grid, 4), grid[1, 2])
    assert out.shape == (3, 4, 12)
    assert np.array_equal(out[..., :6], grid)
    assert np.all(out[1, 2, 6:] == 0)
    assert np.array_equal(match_features(grid, np.zeros(6))[..., 6:], np.abs(grid))
    with pytest.raises(DetectorError):
        match_features(grid, np.zeros(5))


def test_swapping_references_changes_only_l1_channels():
    rng = np.random.default_rng(6)
    grid, r1, r2 = rng.normal(size=(4, 4, 3)), rng.normal(size=3), rng.normal(size=3)
    a, b = match_features(grid, r1), match_features(grid, r2)
    assert np.array_equal(a[..., :3], b[..., :3])
    assert not np.array_equal(a[..., 3:], b[..., 3:])


def test_model_validation(model):
    with pytest.raises(DetectorError):
        DetectorModel(model.conv, np.zeros(5))
    with pytest.raises(DetectorError):
        DetectorModel(model.conv, model.head_w, score_threshold=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


# -- windows and NMS ------------------------------------------------------------

def test_window_boxes_cover_valid_positions(model):
    boxes, sizes = window_boxes((8, 10), model)
    expected = sum((8 - s + 1) * (10 - s + 1) for s in model.window_set)
    assert len(boxes) == len(sizes) == expected
    assert boxes[:, 2].max() <= 10 * model.stride and boxes[:, 3].max() <= 8 * model.stride
    wf = WindowFeatures.compute(FeatureMap(np.zeros((8, 10, model.channels)), model.stride), model)
    assert wf.pooled.shape == (expected, model.descriptor_size)


def test_nms_example():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    boxes[1, 2] = 10 / 0.6  # IoU 0.6 with the first box
    keep = nms(boxes, np.array([0.9, 0.8]), 0.5)
    assert keep == [0]
    assert nms(boxes, np.array([0.8, 0.9]), 0.5) == [1]
    assert nms(boxes, np.array([0.9, 0.8]), 0.7) == [0, 1]


def test_nms_matches_greedy_oracle():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n = int(rng.integers(0, 11))
        xy = rng.integers(0, 20, (n, 2)).astype(float)
        wh = rng.integers(1, 15, (n, 2)).astype(float)
        boxes = np.hstack([xy, xy + wh])
        scores = np.round(rng.random(n), 1)  # ties included
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms(boxes, scores, thr) == greedy_nms(boxes, scores, thr)


# -- detection ------------------------------------------------------------------

def test_untrained_model_finds_pose_identical_copy(model):
    cfg = SceneConfig(canvas=(96, 96), n_categories=12, instances_per_image=4.0, categories_per_image=3.0, glyph_size=20.0, seed=5)
    hits = 0
    for image_id in range(1, 11):
        scene = generate_scene(cfg, image_id)
        target = scene.boxes[0]
        ref = ReferenceCrop(0, crop_reference(scene.pixels, target, model.reference_size), scene.placements[0].category_id)
        dets = detect(scene.pixels, [ref], model)
        hits += iou(dets[0].box, target) >= 0.5
    assert hits >= 9


def test_empty_reference_output_ignores_category(model):
    scene = generate_scene(SceneConfig(canvas=(64, 64), n_categories=4, instances_per_image=3.0, categories_per_image=2.0, glyph_size=16.0), 1)
    a = detect(scene.pixels, [empty_reference(1)], model, category_id=1)
    b = detect(scene.pixels, [empty_reference(3)], model, category_id=3)
    assert [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b]


def test_detect_requires_references(model):
    with pytest.raises(DetectorError):
        detect(np.zeros((32, 32)), [], model)


def test_detections_are_sorted_and_suppressed(model):
    scene = generate_scene(SceneConfig(canvas=(64, 64), n_categories=4, instances_per_image=3.0, categories_per_image=2.0, glyph_size=16.0), 2)
    ref = ReferenceCrop(0, crop_reference(scene.pixels, scene.boxes[0], 24), 1)
    dets = detect(scene.pixels, [ref], model)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True) and min(scores) > model.score_threshold
    for i in range(len(dets)):
        for j in range(i):
            assert iou(dets[i].box, dets[j].box) <= model.nms_iou


def test_background_scenes_yield_no_detections(trained):
    ds, m = trained
    rng = np.random.default_rng(1)
    empty = 0
    for _ in range(50):
        px = np.round(rng.random((128, 128)) * 0.15 * 255) / 255
        a = ds.annotations[int(rng.integers(len(ds.annotations)))]
        ref = ReferenceCrop(a.id, crop_reference(ds.image_by_id[a.image_id].pixels, a.bbox, 24), a.category_id)
        empty += not detect(px, [ref], m)
    assert empty >= 45


# -- training -------------------------------------------------------------------

def test_zero_epochs_returns_initialization(train_set):
    cfg = TrainConfig(epochs=0, seed=4)
    out = train_detector(train_set, None, cfg)
    assert model_to_bytes(out.model) == model_to_bytes(init_model(cfg))
    assert out.loss_trace == []


def test_training_lowers_heldout_loss(train_set):
    cfg = TrainConfig(epochs=4, seed=0)  # 4 x 60 = 240 episodes
    sampler = EpisodeSampler(train_set, seed=99)
    rng = np.random.default_rng(0)
    held = list(sampler.epoch(0))[:16]
    res = train_detector(train_set, None, cfg)
    init = calibrate_features(init_model(cfg), [im.pixels for im in train_set.images[::2][:32]])
    before = batch_loss(init, build_batch(train_set, held, init, cfg, np.random.default_rng(0)))
    after = batch_loss(res.model, build_batch(train_set, held, res.model, cfg, np.random.default_rng(0)))
    assert after < before
    assert np.mean([r["loss"] for r in res.loss_trace[-4:]]) < np.mean([r["loss"] for r in res.loss_trace[:4]])


def test_centering_preserves_scores(train_set):
    cfg = TrainConfig(seed=0)
    m = calibrate_features(init_model(cfg), [im.pixels for im in train_set.images[:16]])
    c = center_head_inputs(m, train_set, None, cfg)
    sampler = EpisodeSampler(train_set, seed=cfg.seed, reference_size=cfg.reference_size)
    samples = build_batch(train_set, list(sampler.epoch(0))[: cfg.calibration_images], m, cfg, np.random.default_rng([cfg.seed, 0xCE17]))
    x, _ = stack_batch(samples, c)
    np.testing.assert_allclose(x[:, : 2 * c.descriptor_size].mean(axis=0), 0.0, atol=1e-9)
    px = train_set.images[3].pixels
    wf = WindowFeatures.compute(extract_features(px, m), m)
    ref = [embed_reference(np.asarray(train_set.images[5].pixels[:24, :24]), m)]
    np.testing.assert_allclose(window_scores(wf, ref, c), window_scores(wf, ref, m), rtol=1e-10, atol=1e-12)


def test_cosine_schedule():
    assert _lr_factor("constant", 7, 10) == 1.0
    assert _lr_factor("cosine", 0, 10) == 1.0
    assert _lr_factor("cosine", 5, 10) == pytest.approx(0.5)
    assert 0 < _lr_factor("cosine", 9, 10) < 0.03
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_degenerate_dataset_rejected():
    from conftest import make_dataset

    with pytest.raises(DetectorError):
        train_detector(make_dataset([], n_images=1, n_categories=1, pixels=True), None, TrainConfig(epochs=1))


def test_training_is_deterministic(train_set):
    cfg = TrainConfig(epochs=1, seed=2)
    a = train_detector(train_set, None, cfg)
    b = train_detector(train_set, None, cfg)
    assert model_to_bytes(a.model) == model_to_bytes(b.model)
    assert a.trace_csv() == b.trace_csv()
    assert a.trace_csv().splitlines()[0] == "epoch,step,loss,n_windows"


def test_head_gradient_matches_finite_differences(train_set):
    cfg = TrainConfig(seed=0)
    m = calibrate_features(init_model(cfg), [im.pixels for im in train_set.images[:16]])
    sampler = EpisodeSampler(train_set, seed=1)
    episodes = list(sampler.epoch(0))
    rng = np.random.default_rng(0)
    worst = 0.0
    for b in range(20):
        x, y = stack_batch(build_batch(train_set, episodes[3 * b : 3 * b + 3], m, cfg, rng), m)
        w = rng.normal(0, 0.1, m.head_size)
        bias = float(rng.normal())
        _, gw, gb, _ = logistic_loss_and_grad(w, bias, x, y, l2=1e-3)

        def f_w(v):
            return logistic_loss_and_grad(v, bias, x, y, l2=1e-3)[0]

        num = central_difference(f_w, w, 1e-6)
        worst = max(worst, relative_error(gw, num, 1e-6))
        num_b = central_difference(lambda v: logistic_loss_and_grad(w, float(v[0]), x, y, l2=1e-3)[0], np.array([bias]), 1e-6)
        worst = max(worst, relative_error(np.array([gb]), num_b, 1e-6))
    assert worst < 1e-4


def test_extractor_gradient_matches_finite_differences(train_set):
    cfg = TrainConfig(seed=0, channels=(4, 6), extractor_mode="trained")
    m = calibrate_features(init_model(cfg), [im.pixels for im in train_set.images[:8]])
    m.head_w = np.random.default_rng(0).normal(0, 0.3, m.head_size)
    episodes = list(EpisodeSampler(train_set, seed=1).epoch(0))[:2]
    samples = build_batch(train_set, episodes, m, cfg, np.random.default_rng(0))
    x, y = stack_batch(samples, m)
    _, _, _, gz = logistic_loss_and_grad(m.head_w, m.head_b, x, y)
    grads = _extractor_grads(train_set, samples, m, gz)

    def loss_with(layer, which, value):
        mm = m.copy()
        mm.conv[layer][which][...] = value
        for s in samples:
            im = train_set.image_by_id[s.episode.image_id]
            grid = extract_features(im.pixels, mm).grid
            boxes, _ = window_boxes(grid.shape[:2], mm)
            s.pooled = _pool_selected(grid, s.windows, boxes, mm)
            s.ref = embed_reference(s.episode.reference, mm)
        xx, yy = stack_batch(samples, mm)
        return logistic_loss_and_grad(mm.head_w, mm.head_b, xx, yy)[0]

    rng = np.random.default_rng(1)
    for layer in range(2):
        for which in range(2):
            base = m.conv[layer][which].copy()
            flat_idx = rng.choice(base.size, size=4, replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, base.shape)
                eps = 1e-7  # small enough not to straddle a ReLU kink
                vp, vm = base.copy(), base.copy()
                vp[idx] += eps
                vm[idx] -= eps
                num = (loss_with(layer, which, vp) - loss_with(layer, which, vm)) / (2 * eps)
                ana = grads[layer][which][idx]
                assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-3)


# -- serialization ----------------------------------------------------------------

def test_serialization_round_trip(trained, tmp_path):
    _, m = trained
    save_model(m, tmp_path / "m.siamdet")
    back = load_model(tmp_path / "m.siamdet")
    assert model_to_bytes(back) == model_to_bytes(m)
    px = np.random.default_rng(0).random((64, 64))
    ref = [ReferenceCrop(0, np.random.default_rng(1).random((24, 24)), 1)]
    assert detect(px, ref, back) == detect(px, ref, m)


def test_corrupt_model_bytes_rejected(model):
    data = model_to_bytes(model)
    with pytest.raises(DetectorError):
        model_from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(DetectorError):
        model_from_bytes(data[:-8])
    with pytest.raises(DetectorError):
        model_from_bytes(data + b"\0" * 8)
