"""Desk-scale Siamese one-shot detector.

A small convolutional stack embeds both the scene and the reference crop
(same weights, same function). The reference feature map is average-pooled
onto a ``grid``×``grid`` layout; every square scene window of a few sizes is
pooled the same way, and each window descriptor is compared to the reference
descriptor by a feature-wise absolute difference. Window features and
differences, plus a one-hot of the window size, feed an affine logistic
classifier. Surviving windows go through greedy non-maximum suppression.

With ``grid=1`` the pooling is a plain global average and the descriptor is a
C-vector per window.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .annotations import BoundingBox, Dataset
from .episodes import EpisodeSampler, ReferenceCrop, TrainingEpisode
from .matcheval import Detection, iou_matrix

MODEL_MAGIC = b"SIAMDET1"
FORMAT_VERSION = 3


class DetectorError(ValueError):
    pass


@dataclass
class FeatureMap:
    grid: np.ndarray  # (H, W, C)
    stride: int


@dataclass
class DetectorModel:
    conv: list[tuple[np.ndarray, np.ndarray]]  # per layer: kernel (3, 3, Cin, Cout), bias (Cout,)
    head_w: np.ndarray  # (2 * C * grid**2 + len(window_set),)
    head_b: float = 0.0
    window_set: tuple[int, ...] = (4, 5, 6, 7)  # window sides in cells
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    reference_size: int = 24
    max_detections: int = 100
    aggregation: Literal["mean", "max"] = "mean"
    grid: int = 3
    # per-channel standardization of the extractor output
    feature_shift: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    # subtracted from the [descriptor, |descriptor - ref|] head inputs; centering keeps SGD well conditioned
    input_shift: Optional[np.ndarray] = None

    def __post_init__(self):
        c = self.channels
        if self.feature_shift is None:
            self.feature_shift = np.zeros(c)
        if self.feature_scale is None:
            self.feature_scale = np.ones(c)
        if self.input_shift is None:
            self.input_shift = np.zeros(2 * self.descriptor_size)
        if self.input_shift.shape != (2 * self.descriptor_size,):
            raise DetectorError("input_shift must have one entry per descriptor and difference input")
        if self.feature_shift.shape != (c,) or self.feature_scale.shape != (c,):
            raise DetectorError("feature normalization must have one entry per channel")
        if np.any(self.feature_scale <= 0):
            raise DetectorError("feature_scale must be positive")
        if self.grid < 1:
            raise DetectorError("grid must be >= 1")
        if self.head_w.shape != (self.head_size,):
            raise DetectorError(f"head expects {self.head_size} inputs, got {self.head_w.shape}")
        if not (0 < self.score_threshold < 1 and 0 < self.nms_iou < 1):
            raise DetectorError("thresholds must lie in (0, 1)")
        if self.aggregation not in ("mean", "max"):
            raise DetectorError(f"unknown aggregation {self.aggregation!r}")

    @property
    def channels(self) -> int:
        return self.conv[-1][0].shape[-1]

    @property
    def stride(self) -> int:
        return 2 ** len(self.conv)

    @property
    def descriptor_size(self) -> int:
        return self.channels * self.grid * self.grid

    @property
    def head_size(self) -> int:
        return 2 * self.descriptor_size + len(self.window_set)

    def copy(self) -> "DetectorModel":
        return replace(
            self,
            conv=[(k.copy(), b.copy()) for k, b in self.conv],
            head_w=self.head_w.copy(),
            feature_shift=self.feature_shift.copy(),
            feature_scale=self.feature_scale.copy(),
            input_shift=self.input_shift.copy(),
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 8
    batch_episodes: int = 16
    negative_ratio: float = 3.0
    hard_negative_fraction: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    extractor_mode: Literal["fixed_random", "trained"] = "fixed_random"
    extractor_learning_rate: float = 0.01
    # "cosine" anneals both learning rates to zero over the run; "constant" keeps them fixed
    lr_schedule: Literal["constant", "cosine"] = "constant"
    channels: tuple[int, ...] = (16, 32)
    window_set: tuple[int, ...] = (4, 5, 6, 7)
    grid: int = 3
    reference_size: int = 24
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    positive_iou: float = 0.5
    calibration_images: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.extractor_mode not in ("fixed_random", "trained"):
            raise ValueError(f"unknown extractor_mode {self.extractor_mode!r}")
        self.channels = tuple(int(c) for c in self.channels)
        self.window_set = tuple(int(s) for s in self.window_set)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["channels"] = list(self.channels)
        d["window_set"] = list(self.window_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)


def init_model(cfg: TrainConfig, in_channels: int = 1) -> DetectorModel:
    """He-initialized extractor; the head starts as a negative mean L1 distance."""
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    conv = []
    cin = in_channels
    for cout in cfg.channels:
        k = rng.normal(0.0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        conv.append((k, np.full(cout, 0.01)))
        cin = cout
    d = cin * cfg.grid * cfg.grid
    head = np.zeros(2 * d + len(cfg.window_set))
    head[d : 2 * d] = -1.0 / d
    return DetectorModel(
        conv,
        head,
        0.0,
        tuple(cfg.window_set),
        cfg.score_threshold,
        cfg.nms_iou,
        cfg.reference_size,
        grid=cfg.grid,
    )


# -- feature extraction --------------------------------------------------------

def _as_input(pixels: np.ndarray) -> np.ndarray:
    x = np.asarray(pixels, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _conv_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 'same' convolution with edge padding; returns output and the patch view."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    patches = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    out = np.einsum("hwcij,ijco->hwo", patches, k, optimize=True) + b
    return out, patches


def _pool_forward(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _forward_raw(pixels: np.ndarray, model: DetectorModel, keep: bool = False):
    x = _as_input(pixels)
    if min(x.shape[:2]) < model.stride:
        raise DetectorError(f"raster {x.shape[:2]} smaller than the receptive stride {model.stride}")
    if x.shape[2] != model.conv[0][0].shape[2]:
        raise DetectorError(f"raster has {x.shape[2]} channels, extractor expects {model.conv[0][0].shape[2]}")
    caches = []
    for k, b in model.conv:
        pre, patches = _conv_forward(x, k, b)
        act = np.maximum(pre, 0.0)
        if keep:
            caches.append((x.shape, patches, pre))
        x = _pool_forward(act)
    return x, caches


def _forward(pixels: np.ndarray, model: DetectorModel, keep: bool = False):
    raw, caches = _forward_raw(pixels, model, keep)
    return (raw - model.feature_shift) / model.feature_scale, caches


def extract_features(pixels: np.ndarray, model: DetectorModel) -> FeatureMap:
    grid, _ = _forward(pixels, model)
    return FeatureMap(grid, model.stride)


def calibrate_features(model: DetectorModel, rasters: Iterable[np.ndarray]) -> DetectorModel:
    """Copy of ``model`` whose extractor output is standardized per channel on ``rasters``."""
    total = None
    n = 0
    for px in rasters:
        raw, _ = _forward_raw(px, model)
        flat = raw.reshape(-1, raw.shape[-1])
        s = np.stack([flat.sum(0), (flat * flat).sum(0)])
        total = s if total is None else total + s
        n += len(flat)
    if not n:
        raise DetectorError("no rasters to calibrate on")
    mean = total[0] / n
    var = np.maximum(total[1] / n - mean * mean, 0.0)
    out = model.copy()
    out.feature_shift = mean
    out.feature_scale = np.sqrt(var) + 1e-6
    return out


def pool_weights(n: int, g: int) -> np.ndarray:
    """(g, n) matrix averaging ``n`` cells into ``g`` equal bins, with fractional overlap at bin edges."""
    edges = np.arange(g + 1) * (n / g)
    lo = np.maximum(edges[:-1, None], np.arange(n)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) * (g / n)


def grid_pool(grid: np.ndarray, g: int) -> np.ndarray:
    """Layout-preserving average pooling of an (H, W, C) map to a flat (g*g*C,) descriptor."""
    a, b = pool_weights(grid.shape[0], g), pool_weights(grid.shape[1], g)
    return np.einsum("uvc,au,bv->abc", grid, a, b, optimize=True).reshape(-1)


def embed_reference(crop: ReferenceCrop | np.ndarray | Sequence[ReferenceCrop], model: DetectorModel) -> np.ndarray:
    """Grid-pooled reference features; k crops are averaged into one descriptor."""
    if isinstance(crop, (list, tuple)):
        return np.mean([embed_reference(c, model) for c in crop], axis=0)
    pixels = crop.pixels if isinstance(crop, ReferenceCrop) else crop
    if pixels is None:
        raise DetectorError("reference crop carries no pixels")
    return grid_pool(extract_features(pixels, model).grid, model.grid)


def match_features(img: FeatureMap | np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Concatenate image features with their feature-wise L1 difference to ``ref``."""
    grid = img.grid if isinstance(img, FeatureMap) else np.asarray(img)
    ref = np.asarray(ref)
    if grid.shape[-1] != ref.shape[-1]:
        raise DetectorError(f"channel mismatch: image {grid.shape[-1]} vs reference {ref.shape[-1]}")
    return np.concatenate([grid, np.abs(grid - ref)], axis=-1)


def window_pool(grid: np.ndarray, side: int, g: int = 1) -> np.ndarray:
    """Grid-pooled descriptor of every ``side``×``side`` window (valid positions): (nh, nw, g*g*C)."""
    v = sliding_window_view(grid, (side, side), axis=(0, 1))  # (nh, nw, C, side, side)
    a = pool_weights(side, g)
    out = np.einsum("hwcuv,au,bv->hwabc", v, a, a, optimize=True)
    return out.reshape(out.shape[0], out.shape[1], -1)


def window_boxes(shape: tuple[int, int], model: DetectorModel) -> tuple[np.ndarray, np.ndarray]:
    """Pixel boxes (x1, y1, x2, y2) of all windows and the window-size index of each.

    Ordering matches :func:`window_pool` flattened per size, sizes in
    ``model.window_set`` order.
    """
    h, w = shape
    st = model.stride
    boxes, sizes = [], []
    for si, side in enumerate(model.window_set):
        nh, nw = h - side + 1, w - side + 1
        if nh <= 0 or nw <= 0:
            continue
        ii, jj = np.mgrid[0:nh, 0:nw]
        x1, y1 = (jj.ravel() * st).astype(float), (ii.ravel() * st).astype(float)
        boxes.append(np.stack([x1, y1, x1 + side * st, y1 + side * st], axis=1))
        sizes.append(np.full(nh * nw, si))
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=int)
    return np.concatenate(boxes), np.concatenate(sizes)


@dataclass
class WindowFeatures:
    """Pooled scene descriptors for every window, reusable across queries."""

    pooled: np.ndarray  # (N, D)
    sizes: np.ndarray  # (N,) index into window_set
    boxes: np.ndarray  # (N, 4) pixel x1, y1, x2, y2

    @classmethod
    def compute(cls, fmap: FeatureMap, model: DetectorModel) -> "WindowFeatures":
        pooled = []
        for side in model.window_set:
            if side <= min(fmap.grid.shape[:2]):
                pooled.append(window_pool(fmap.grid, side, model.grid).reshape(-1, model.descriptor_size))
        boxes, sizes = window_boxes(fmap.grid.shape[:2], model)
        pooled_arr = np.concatenate(pooled) if pooled else np.zeros((0, model.descriptor_size))
        return cls(pooled_arr, sizes, boxes)


def head_inputs(pooled: np.ndarray, sizes: np.ndarray, ref: np.ndarray, model: DetectorModel) -> np.ndarray:
    geometry = np.eye(len(model.window_set))[sizes]
    return np.concatenate([match_features(pooled, ref) - model.input_shift, geometry], axis=1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def window_scores(wf: WindowFeatures, refs: Sequence[np.ndarray], model: DetectorModel) -> np.ndarray:
    if model.aggregation == "mean" or len(refs) == 1:
        ref = np.mean(refs, axis=0)
        z = head_inputs(wf.pooled, wf.sizes, ref, model) @ model.head_w + model.head_b
        return _sigmoid(z)
    return np.max([window_scores(wf, [r], model) for r in refs], axis=0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression: keep the best box, drop boxes overlapping it by more than the threshold."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    if not len(order):
        return []
    overlaps = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return keep


def detect(
    pixels: Optional[np.ndarray],
    references: Sequence[ReferenceCrop],
    model: DetectorModel,
    image_id: int = 0,
    category_id: Optional[int] = None,
    window_features: Optional[WindowFeatures] = None,
    pre_nms_top: int = 400,
) -> list[Detection]:
    if not references:
        raise DetectorError("detect needs at least one reference")
    if category_id is None:
        category_id = references[0].category_id
    wf = window_features or WindowFeatures.compute(extract_features(pixels, model), model)
    refs = [embed_reference(r, model) for r in references]
    scores = window_scores(wf, refs, model)
    cand = np.flatnonzero(scores > model.score_threshold)
    if len(cand) > pre_nms_top:
        cand = cand[np.argsort(-scores[cand], kind="stable")[:pre_nms_top]]
    keep = nms(wf.boxes[cand], scores[cand], model.nms_iou)[: model.max_detections]
    out = []
    for i in keep:
        x1, y1, x2, y2 = wf.boxes[cand[i]]
        out.append(Detection(image_id, category_id, BoundingBox(x1, y1, x2 - x1, y2 - y1), float(scores[cand[i]])))
    return out


def run_queries(model: DetectorModel, ds: Dataset, queries: Iterable) -> list[Detection]:
    """Detections for every query, computing each scene's window features once."""
    by_image: dict[int, list] = {}
    for q in queries:
        by_image.setdefault(q.image_id, []).append(q)
    out = []
    for image_id in sorted(by_image):
        im = ds.image_by_id[image_id]
        if im.pixels is None:
            raise DetectorError(f"image {image_id} has no pixels")
        wf = WindowFeatures.compute(extract_features(im.pixels, model), model)
        for q in by_image[image_id]:
            out.extend(detect(None, q.references, model, image_id, q.category_id, window_features=wf))
    return out


# -- training --------------------------------------------------------------------

def logistic_loss_and_grad(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy of an affine logistic head and its gradients.

    Returns ``(loss, dloss/dw, dloss/db, dloss/dz)``.
    """
    z = x @ w + b
    # log(1 + exp(-|z|)) form keeps the loss finite for large logits
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) + 0.5 * l2 * float(w @ w)
    g = (_sigmoid(z) - y) / len(y)
    return float(loss), x.T @ g + l2 * w, float(g.sum()), g


@dataclass
class _Sample:
    pooled: np.ndarray
    sizes: np.ndarray
    labels: np.ndarray
    ref: np.ndarray
    windows: np.ndarray  # indices into the image's window list
    episode: TrainingEpisode


def _label_windows(boxes: np.ndarray, episode: TrainingEpisode, cfg: TrainConfig, rng: np.random.Generator):
    gt = np.array([b.xyxy() for b in episode.boxes]).reshape(-1, 4)
    labels = np.asarray(episode.labels, dtype=bool)
    ious = iou_matrix(boxes, gt)
    pos_iou = ious[:, labels].max(axis=1) if labels.any() else np.zeros(len(boxes))
    neg_iou = ious[:, ~labels].max(axis=1) if (~labels).any() else np.zeros(len(boxes))
    pos = np.flatnonzero(pos_iou >= cfg.positive_iou)
    negatives = np.flatnonzero(pos_iou < cfg.positive_iou)
    n_neg = int(math.ceil(cfg.negative_ratio * max(len(pos), 1)))
    # half of the negative budget goes to windows on objects of other categories
    hard = negatives[neg_iou[negatives] >= cfg.positive_iou]
    n_hard = min(len(hard), int(round(cfg.hard_negative_fraction * n_neg)))
    picked_hard = rng.choice(hard, size=n_hard, replace=False) if n_hard else np.zeros(0, dtype=int)
    rest = np.setdiff1d(negatives, picked_hard)
    n_rest = min(len(rest), n_neg - n_hard)
    picked_rest = rng.choice(rest, size=n_rest, replace=False) if n_rest else np.zeros(0, dtype=int)
    idx = np.concatenate([pos, picked_hard, picked_rest]).astype(int)
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(picked_hard) + len(picked_rest))])
    return idx, y


class _FeatureCache:
    """Scene feature maps (fixed extractor) and reference descriptors, keyed by id."""

    def __init__(self, ds: Dataset, model: DetectorModel, enabled: bool):
        self.ds, self.model, self.enabled = ds, model, enabled
        self._maps: dict[int, np.ndarray] = {}
        self._refs: dict[int, np.ndarray] = {}

    def feature_map(self, image_id: int) -> np.ndarray:
        if self.enabled and image_id in self._maps:
            return self._maps[image_id]
        pixels = self.ds.image_by_id[image_id].pixels
        if pixels is None:
            raise DetectorError(f"image {image_id} has no pixels")
        grid = extract_features(pixels, self.model).grid
        if self.enabled:
            self._maps[image_id] = grid
        return grid

    def reference(self, crop: ReferenceCrop) -> np.ndarray:
        key = crop.source_annotation_id
        if self.enabled and key is not None and key in self._refs:
            return self._refs[key]
        emb = embed_reference(crop, self.model)
        if self.enabled and key is not None:
            self._refs[key] = emb
        return emb


def _window_cells(boxes: np.ndarray, idx: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i0 = (boxes[idx, 1] // stride).astype(int)
    j0 = (boxes[idx, 0] // stride).astype(int)
    side = ((boxes[idx, 2] - boxes[idx, 0]) // stride).astype(int)
    return i0, j0, side


def _pool_selected(grid: np.ndarray, idx: np.ndarray, boxes: np.ndarray, model: DetectorModel) -> np.ndarray:
    """Descriptors of the windows ``idx`` only, grouped by window side."""
    i0, j0, side = _window_cells(boxes, idx, model.stride)
    out = np.zeros((len(idx), model.descriptor_size))
    for s in np.unique(side):
        rows = np.flatnonzero(side == s)
        patches = np.stack([grid[i : i + s, j : j + s] for i, j in zip(i0[rows], j0[rows])])
        a = pool_weights(int(s), model.grid)
        out[rows] = np.einsum("nuvc,au,bv->nabc", patches, a, a, optimize=True).reshape(len(rows), -1)
    return out


def build_batch(
    ds: Dataset,
    episodes: Iterable[TrainingEpisode],
    model: DetectorModel,
    cfg: TrainConfig,
    rng: np.random.Generator,
    cache: Optional[_FeatureCache] = None,
) -> list[_Sample]:
    cache = cache or _FeatureCache(ds, model, enabled=False)
    samples = []
    for ep in episodes:
        im = ds.image_by_id[ep.image_id]
        cells = (im.height // model.stride, im.width // model.stride)
        boxes, sizes = window_boxes(cells, model)
        idx, y = _label_windows(boxes, ep, cfg, rng)
        if not len(idx):
            continue
        pooled = _pool_selected(cache.feature_map(ep.image_id), idx, boxes, model)
        samples.append(_Sample(pooled, sizes[idx], y, cache.reference(ep.reference), idx, ep))
    return samples


def stack_batch(samples: Sequence[_Sample], model: DetectorModel) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([head_inputs(s.pooled, s.sizes, s.ref, model) for s in samples])
    y = np.concatenate([s.labels for s in samples])
    return x, y


def batch_loss(model: DetectorModel, samples: Sequence[_Sample]) -> float:
    x, y = stack_batch(samples, model)
    return logistic_loss_and_grad(model.head_w, model.head_b, x, y)[0]


@dataclass
class TrainResult:
    model: DetectorModel
    loss_trace: list[dict] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["epoch", "step", "loss", "n_windows"], lineterminator="\n")
        w.writeheader()
        for row in self.loss_trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def center_head_inputs(
    model: DetectorModel, ds: Dataset, episode_stream: Optional[EpisodeSampler], cfg: TrainConfig
) -> DetectorModel:
    """Copy of ``model`` whose head inputs are centred on labelled training windows.

    The bias absorbs the shift, so scores are unchanged; only the
    parametrization SGD sees is better conditioned.
    """
    if episode_stream is None:
        episode_stream = EpisodeSampler(ds, cfg.seed, model.reference_size)
    episodes = list(episode_stream.epoch(0))[: max(cfg.calibration_images, 1)]
    samples = build_batch(ds, episodes, model, cfg, np.random.default_rng([cfg.seed, 0xCE17]))
    if not samples:
        return model.copy()
    x, _ = stack_batch(samples, model)
    d2 = 2 * model.descriptor_size
    out = model.copy()
    delta = x[:, :d2].mean(axis=0)
    out.input_shift = model.input_shift + delta
    out.head_b = float(model.head_b + model.head_w[:d2] @ delta)
    return out


def _calibration_rasters(ds: Dataset, n: int) -> list[np.ndarray]:
    ids = sorted(im.id for im in ds.images if im.pixels is not None)
    if not ids:
        raise DetectorError("dataset carries no pixels")
    step = max(len(ids) // max(n, 1), 1)
    return [ds.image_by_id[i].pixels for i in ids[::step][:n]]


def _lr_factor(schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def train_detector(
    ds: Dataset,
    episode_stream: Optional[EpisodeSampler],
    cfg: TrainConfig,
    model: Optional[DetectorModel] = None,
) -> TrainResult:
    """Fit the head (and, in ``trained`` mode, the extractor) by mini-batch SGD.

    Window labels: positive iff IoU with a label-1 box reaches
    ``cfg.positive_iou``; negatives are capped at ``negative_ratio`` per
    positive, split between windows on other objects and random windows.
    A fresh model has its extractor output standardized on a sample of the
    training scenes first; with ``epochs=0`` the model is returned unchanged.
    """
    if not ds.annotations:
        raise DetectorError("dataset has no annotations to train on")
    if model is None:
        first = ds.images[0].pixels
        in_ch = first.shape[2] if first is not None and first.ndim == 3 else 1
        model = init_model(cfg, in_ch)
        if cfg.epochs > 0:
            model = calibrate_features(model, _calibration_rasters(ds, cfg.calibration_images))
            model = center_head_inputs(model, ds, episode_stream, cfg)
    model = model.copy()
    if episode_stream is None:
        episode_stream = EpisodeSampler(ds, cfg.seed, model.reference_size)
    rng = np.random.default_rng([cfg.seed, 0x7A11])
    trained = cfg.extractor_mode == "trained"
    cache = _FeatureCache(ds, model, enabled=not trained)
    vw = np.zeros_like(model.head_w)
    vb = 0.0
    vconv = [(np.zeros_like(k), np.zeros_like(b)) for k, b in model.conv]
    trace: list[dict] = []
    n_pos_total = 0
    step = 0
    total_steps = None
    for epoch in range(cfg.epochs):
        episodes = list(episode_stream.epoch(epoch))
        if total_steps is None:
            total_steps = cfg.epochs * math.ceil(len(episodes) / cfg.batch_episodes)
        for start in range(0, len(episodes), cfg.batch_episodes):
            decay = _lr_factor(cfg.lr_schedule, step, total_steps)
            chunk = episodes[start : start + cfg.batch_episodes]
            samples = build_batch(ds, chunk, model, cfg, rng, cache)
            if not samples:
                continue
            x, y = stack_batch(samples, model)
            n_pos_total += int(y.sum())
            loss, gw, gb, gz = logistic_loss_and_grad(model.head_w, model.head_b, x, y, cfg.weight_decay)
            if trained:
                gconv = _extractor_grads(ds, samples, model, gz)
                for (k, b), (gk, gbias), (vk, vbias) in zip(model.conv, gconv, vconv):
                    vk *= cfg.momentum
                    vk -= decay * cfg.extractor_learning_rate * (gk + cfg.weight_decay * k)
                    vbias *= cfg.momentum
                    vbias -= decay * cfg.extractor_learning_rate * gbias
                    k += vk
                    b += vbias
            vw = cfg.momentum * vw - decay * cfg.learning_rate * gw
            vb = cfg.momentum * vb - decay * cfg.learning_rate * gb
            model.head_w = model.head_w + vw
            model.head_b = float(model.head_b + vb)
            trace.append({"epoch": epoch, "step": step, "loss": loss, "n_windows": int(len(y))})
            step += 1
        if epoch == 0 and n_pos_total == 0:
            raise DetectorError("no positive windows in the first epoch; dataset is degenerate for training")
    return TrainResult(model, trace)


# -- extractor backward (trained mode) -------------------------------------------

def _conv_backward(dout: np.ndarray, patches: np.ndarray, k: np.ndarray, in_shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dk = np.einsum("hwcij,hwo->ijco", patches, dout, optimize=True)
    db = dout.sum(axis=(0, 1))
    h, w, cin = in_shape
    dxp = np.zeros((h + 2, w + 2, cin))
    for i in range(3):
        for j in range(3):
            dxp[i : i + h, j : j + w] += dout @ k[i, j].T
    # edge padding: fold the border gradient back onto the replicated pixels
    dxp[1, :] += dxp[0, :]
    dxp[-2, :] += dxp[-1, :]
    dxp[:, 1] += dxp[:, 0]
    dxp[:, -2] += dxp[:, -1]
    return dxp[1:-1, 1:-1], dk, db


def _pool_backward(dout: np.ndarray, in_shape) -> np.ndarray:
    dx = np.zeros(in_shape)
    up = 0.25 * np.repeat(np.repeat(dout, 2, axis=0), 2, axis=1)
    dx[: up.shape[0], : up.shape[1]] = up
    return dx


def _backprop_extractor(dgrid: np.ndarray, caches, model: DetectorModel, grads):
    # gradient w.r.t. the standardized map -> raw extractor output
    d = dgrid / model.feature_scale
    for li in range(len(model.conv) - 1, -1, -1):
        in_shape, patches, pre = caches[li]
        dact = _pool_backward(d, pre.shape)
        dpre = dact * (pre > 0)
        d, dk, db = _conv_backward(dpre, patches, model.conv[li][0], in_shape)
        grads[li][0][...] += dk
        grads[li][1][...] += db


def _extractor_grads(ds: Dataset, samples: Sequence[_Sample], model: DetectorModel, gz: np.ndarray):
    """Gradient of the batch loss w.r.t. the conv weights via both Siamese branches."""
    d = model.descriptor_size
    w_img, w_l1 = model.head_w[:d], model.head_w[d : 2 * d]
    g_ = model.grid
    grads = [(np.zeros_like(k), np.zeros_like(b)) for k, b in model.conv]
    offset = 0
    for s in samples:
        n = len(s.labels)
        gzs = gz[offset : offset + n]
        offset += n
        sign = np.sign(s.pooled - s.ref)
        dpooled = gzs[:, None] * (w_img[None, :] + w_l1[None, :] * sign)  # (n, D)
        dref = -(gzs[:, None] * w_l1[None, :] * sign).sum(axis=0)
        im = ds.image_by_id[s.episode.image_id]
        grid, caches = _forward(im.pixels, model, keep=True)
        boxes, _ = window_boxes(grid.shape[:2], model)
        i0, j0, side = _window_cells(boxes, s.windows, model.stride)
        dgrid = np.zeros_like(grid)
        for row in range(n):
            sd = int(side[row])
            a = pool_weights(sd, g_)
            dd = dpooled[row].reshape(g_, g_, -1)
            dgrid[i0[row] : i0[row] + sd, j0[row] : j0[row] + sd] += np.einsum("abc,au,bv->uvc", dd, a, a)
        _backprop_extractor(dgrid, caches, model, grads)
        rgrid, rcaches = _forward(s.episode.reference.pixels, model, keep=True)
        ra, rb = pool_weights(rgrid.shape[0], g_), pool_weights(rgrid.shape[1], g_)
        drgrid = np.einsum("abc,au,bv->uvc", dref.reshape(g_, g_, -1), ra, rb)
        _backprop_extractor(drgrid, rcaches, model, grads)
    return grads


# -- serialization -----------------------------------------------------------------

def _tensors(model: DetectorModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (k, b) in enumerate(model.conv):
        out += [(f"conv{i}.kernel", k), (f"conv{i}.bias", b)]
    out += [
        ("features.shift", model.feature_shift),
        ("features.scale", model.feature_scale),
        ("head.input_shift", model.input_shift),
        ("head.weight", model.head_w),
    ]
    return out


def model_to_bytes(model: DetectorModel) -> bytes:
    """``MAGIC | uint32 header length | JSON header | little-endian float64 tensors``."""
    tensors = _tensors(model)
    header = {
        "version": FORMAT_VERSION,
        "config": {
            "head_bias": model.head_b,
            "window_set": list(model.window_set),
            "score_threshold": model.score_threshold,
            "nms_iou": model.nms_iou,
            "reference_size": model.reference_size,
            "max_detections": model.max_detections,
            "aggregation": model.aggregation,
            "grid": model.grid,
            "n_conv": len(model.conv),
        },
        "tensors": [{"name": n, "shape": list(t.shape), "dtype": "<f8"} for n, t in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in tensors)
    return MODEL_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body


def model_from_bytes(data: bytes) -> DetectorModel:
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise DetectorError("not a serialized detector model")
    pos = len(MODEL_MAGIC)
    (hlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise DetectorError(f"unsupported model version {header.get('version')}")
    pos += hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if pos + 8 * n > len(data):
            raise DetectorError(f"truncated tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(data[pos : pos + 8 * n], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise DetectorError("trailing bytes after the last tensor")
    cfg = header["config"]
    conv = [(tensors[f"conv{i}.kernel"], tensors[f"conv{i}.bias"]) for i in range(cfg["n_conv"])]
    return DetectorModel(
        conv,
        tensors["head.weight"],
        float(cfg["head_bias"]),
        tuple(cfg["window_set"]),
        float(cfg["score_threshold"]),
        float(cfg["nms_iou"]),
        int(cfg["reference_size"]),
        int(cfg["max_detections"]),
        cfg["aggregation"],
        int(cfg["grid"]),
        tensors["features.shift"],
        tensors["features.scale"],
        tensors["head.input_shift"],
    )


def save_model(model: DetectorModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> DetectorModel:
    return model_from_bytes(Path(path).read_bytes())
