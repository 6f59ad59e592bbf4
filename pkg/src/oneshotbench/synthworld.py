"""Seeded synthetic cluttered scenes of procedural glyph categories.

Each category is a glyph built from 3-7 random stroke primitives (polylines,
arcs and small filled polygons) in the unit square. Scenes scatter jittered
glyph instances over a noisy grayscale canvas; every instance gets a box equal
to the bounding box of its rendered mask, so labelling is exhaustive and tight.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import BoundingBox, CategoryRecord, Dataset, ImageRecord, InstanceAnnotation, load_dataset, save_dataset
from .matcheval import iou_matrix

_GLYPH_STREAM = 0x676C7970  # separates glyph seeds from scene seeds
MAX_INSTANCES_PER_IMAGE = 1000


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str  # "line" | "arc" | "blob"
    points: tuple[tuple[float, float], ...]

    @property
    def filled(self) -> bool:
        return self.kind == "blob"


@dataclass(frozen=True)
class GlyphSpec:
    category_id: int
    strokes: tuple[Primitive, ...]
    thickness: float  # stroke width as a fraction of glyph size
    fill_rule: str = "evenodd"


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (128, 128)  # (height, width)
    n_categories: int = 64
    instances_per_image: float = 14.0
    categories_per_image: float = 6.0
    glyph_size: float = 22.0
    scale_jitter: tuple[float, float] = (0.8, 1.2)
    rotation_jitter: tuple[float, float] = (-15.0, 15.0)
    overlap_cap: float = 0.2
    noise: float = 0.15
    seed: int = 0
    max_retries: int = 60
    max_attempts: int = 20

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))
        object.__setattr__(self, "scale_jitter", tuple(float(v) for v in self.scale_jitter))
        object.__setattr__(self, "rotation_jitter", tuple(float(v) for v in self.rotation_jitter))
        if not (0.0 <= self.overlap_cap < 1.0):
            raise ValueError("overlap_cap must be in [0, 1)")
        if self.n_categories < 1:
            raise ValueError("n_categories must be >= 1")
        if self.categories_per_image < 1 or self.instances_per_image < self.categories_per_image:
            raise ValueError("need 1 <= categories_per_image <= instances_per_image")
        lo, hi = self.scale_jitter
        if not (0 < lo <= hi):
            raise ValueError("scale_jitter must be a positive (low, high) range")
        if self.glyph_size * hi * math.sqrt(2) >= min(self.canvas):
            raise ValueError("glyphs do not fit on the canvas")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["canvas"] = list(self.canvas)
        d["scale_jitter"] = list(self.scale_jitter)
        d["rotation_jitter"] = list(self.rotation_jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


PRESETS = {
    # Pascal-VOC-like clutter
    "low-clutter": dict(instances_per_image=3.0, categories_per_image=1.5),
    # Objects365-like clutter
    "high-clutter": dict(instances_per_image=14.0, categories_per_image=6.0),
}


def preset(name: str, **overrides) -> SceneConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SceneConfig(**{**PRESETS[name], **overrides})


# -- glyphs --------------------------------------------------------------------

def make_glyph(category_id: int, seed: int = 0) -> GlyphSpec:
    rng = np.random.default_rng([seed, _GLYPH_STREAM, category_id])
    prims = []
    for _ in range(int(rng.integers(3, 8))):
        kind = rng.choice(["line", "line", "arc", "blob"])
        if kind == "line":
            pts = rng.random((int(rng.integers(2, 5)), 2))
        elif kind == "arc":
            c = rng.uniform(0.25, 0.75, 2)
            r = rng.uniform(0.15, 0.45)
            a0 = rng.uniform(0, 2 * math.pi)
            t = a0 + np.linspace(0, rng.uniform(0.6, 1.8) * math.pi, 10)
            pts = np.stack([c[0] + r * np.cos(t), c[1] + r * np.sin(t)], axis=1)
        else:
            c = rng.uniform(0.2, 0.8, 2)
            n = int(rng.integers(3, 6))
            ang = np.sort(rng.uniform(0, 2 * math.pi, n))
            rad = rng.uniform(0.08, 0.2, n)
            pts = np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)], axis=1)
        prims.append((str(kind), pts))
    # stretch the composition to fill the unit square on both axes
    allpts = np.concatenate([p for _, p in prims])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    scale = np.where(hi - lo > 1e-6, hi - lo, 1.0)
    strokes = tuple(
        Primitive(k, tuple((float(x), float(y)) for x, y in (p - lo) / scale)) for k, p in prims
    )
    return GlyphSpec(category_id, strokes, float(rng.uniform(0.08, 0.13)))


def _segments_distance(px: np.ndarray, py: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Minimum distance from points (P,) to any of the segments (S, 4)."""
    ax, ay, bx, by = seg[:, 0], seg[:, 1], seg[:, 2], seg[:, 3]
    dx, dy = bx - ax, by - ay
    denom = np.maximum(dx * dx + dy * dy, 1e-12)
    t = ((px[:, None] - ax) * dx + (py[:, None] - ay) * dy) / denom
    t = np.clip(t, 0.0, 1.0)
    qx, qy = ax + t * dx - px[:, None], ay + t * dy - py[:, None]
    return np.sqrt(qx * qx + qy * qy).min(axis=1)


def _inside_evenodd(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


@dataclass(frozen=True)
class Placement:
    category_id: int
    cx: float
    cy: float
    size: float
    angle: float  # degrees
    intensity: float


def _transform(glyph: GlyphSpec, pl: Placement) -> list[tuple[Primitive, np.ndarray]]:
    th = math.radians(pl.angle)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    out = []
    for prim in glyph.strokes:
        p = (np.asarray(prim.points) - 0.5) * pl.size
        out.append((prim, p @ rot.T + np.array([pl.cx, pl.cy])))
    return out


def render_mask(glyph: GlyphSpec, pl: Placement, shape: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    """Rasterize one glyph instance; returns the local mask and its (row, col) origin."""
    prims = _transform(glyph, pl)
    half = glyph.thickness * pl.size / 2
    allpts = np.concatenate([p for _, p in prims])
    x0 = max(int(math.floor(allpts[:, 0].min() - half)) - 1, 0)
    y0 = max(int(math.floor(allpts[:, 1].min() - half)) - 1, 0)
    x1 = min(int(math.ceil(allpts[:, 0].max() + half)) + 1, shape[1])
    y1 = min(int(math.ceil(allpts[:, 1].max() + half)) + 1, shape[0])
    if x1 <= x0 or y1 <= y0:
        return np.zeros((0, 0), dtype=bool), (y0, x0)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    px, py = xx.ravel() + 0.5, yy.ravel() + 0.5
    segs = []
    mask = np.zeros(px.shape, dtype=bool)
    for prim, p in prims:
        if prim.filled:
            mask |= _inside_evenodd(px, py, p)
            p = np.vstack([p, p[:1]])  # outline the blob too
        segs.append(np.hstack([p[:-1], p[1:]]))
    mask |= _segments_distance(px, py, np.vstack(segs)) <= half
    return mask.reshape(y1 - y0, x1 - x0), (y0, x0)


def mask_box(mask: np.ndarray, origin: tuple[int, int]) -> Optional[BoundingBox]:
    rows, cols = np.nonzero(mask)
    if not len(rows):
        return None
    y0, x0 = origin
    return BoundingBox(float(x0 + cols.min()), float(y0 + rows.min()),
                       float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1))


def canonical_render(glyph: GlyphSpec, size: int = 32, angle: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Glyph centred on a ``size``×``size`` raster, mainly for inspection and tests."""
    pl = Placement(glyph.category_id, size / 2, size / 2, 0.8 * size * scale, angle, 1.0)
    mask, (y0, x0) = render_mask(glyph, pl, (size, size))
    out = np.zeros((size, size))
    out[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]] = mask
    return out


# -- scenes --------------------------------------------------------------------

@dataclass
class SceneResult:
    pixels: np.ndarray
    placements: list[Placement]
    boxes: list[BoundingBox]
    attempt: int = 0


def _scene_counts(cfg: SceneConfig, rng: np.random.Generator) -> tuple[int, int]:
    n_cat = int(np.clip(1 + rng.poisson(cfg.categories_per_image - 1), 1, cfg.n_categories))
    n_inst = n_cat + int(rng.poisson(max(cfg.instances_per_image - cfg.categories_per_image, 0.0)))
    return n_cat, n_inst


def _scene_content(cfg: SceneConfig, rng: np.random.Generator) -> list[int]:
    n_cat, n_inst = _scene_counts(cfg, rng)
    cats = sorted(int(c) for c in rng.choice(np.arange(1, cfg.n_categories + 1), size=n_cat, replace=False))
    return cats + [cats[int(i)] for i in rng.integers(n_cat, size=n_inst - n_cat)]


def _approx_box(glyph: GlyphSpec, pl: Placement) -> tuple[float, float, float, float]:
    pts = np.concatenate([p for _, p in _transform(glyph, pl)])
    half = glyph.thickness * pl.size / 2
    return (pts[:, 0].min() - half, pts[:, 1].min() - half, pts[:, 0].max() + half, pts[:, 1].max() + half)


def _try_scene(
    cfg: SceneConfig, glyphs: dict[int, GlyphSpec], assigned: list[int], rng: np.random.Generator
) -> Optional[SceneResult]:
    h, w = cfg.canvas
    order = rng.permutation(len(assigned))
    pixels = rng.random((h, w)) * cfg.noise
    placements, boxes, xyxy = [], [], []
    for j in order:
        cat = assigned[int(j)]
        glyph = glyphs[cat]
        for _ in range(cfg.max_retries):
            size = cfg.glyph_size * rng.uniform(*cfg.scale_jitter)
            angle = rng.uniform(*cfg.rotation_jitter)
            margin = size * math.sqrt(2) / 2 + glyph.thickness * size
            if 2 * margin >= min(h, w):
                continue
            cx = rng.uniform(margin, w - margin)
            cy = rng.uniform(margin, h - margin)
            pl = Placement(cat, float(cx), float(cy), float(size), float(angle), float(rng.uniform(0.75, 1.0)))
            # cheap rejection on the outline box before rasterizing
            if xyxy and iou_matrix(np.array([_approx_box(glyph, pl)]), np.array(xyxy)).max() > cfg.overlap_cap + 0.25:
                continue
            mask, origin = render_mask(glyph, pl, (h, w))
            box = mask_box(mask, origin)
            if box is None:
                continue
            if xyxy and iou_matrix(np.array([box.xyxy()]), np.array(xyxy)).max() > cfg.overlap_cap:
                continue
            y0, x0 = origin
            region = pixels[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]]
            np.maximum(region, mask * pl.intensity, out=region)
            placements.append(pl)
            boxes.append(box)
            xyxy.append(box.xyxy())
            break
        else:
            return None
    # quantize so rasters round-trip exactly through 8-bit image files
    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    return SceneResult(pixels, placements, boxes)


def generate_scene(cfg: SceneConfig, image_id: int, glyphs: Optional[dict[int, GlyphSpec]] = None) -> SceneResult:
    glyphs = glyphs or glyph_universe(cfg)
    # scene content is fixed per image; only placement is redrawn on failure,
    # so retries do not bias the clutter statistics
    assigned = _scene_content(cfg, np.random.default_rng([cfg.seed, image_id]))
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([cfg.seed, image_id, attempt + 1])
        scene = _try_scene(cfg, glyphs, assigned, rng)
        if scene is not None:
            scene.attempt = attempt
            return scene
    raise PlacementError(f"could not place glyphs for image {image_id} after {cfg.max_attempts} attempts; cfg={cfg}")


def glyph_universe(cfg: SceneConfig) -> dict[int, GlyphSpec]:
    return {c: make_glyph(c, cfg.seed) for c in range(1, cfg.n_categories + 1)}


@dataclass
class GenerationLog:
    """Ground-truth counters kept while emitting scenes."""

    n_images: int = 0
    n_instances: int = 0
    categories_per_image: list[int] = field(default_factory=list)
    placements: dict[int, list[Placement]] = field(default_factory=dict)


def generate_dataset(
    cfg: SceneConfig, n_images: int, first_image_id: int = 1, log: Optional[GenerationLog] = None
) -> Dataset:
    """Deterministic dataset of ``n_images`` scenes with rasters attached.

    ``first_image_id`` selects a disjoint block of scenes over the same glyph
    universe, e.g. a validation set.
    """
    glyphs = glyph_universe(cfg)
    log = log if log is not None else GenerationLog()
    h, w = cfg.canvas
    images, anns = [], []
    for image_id in range(first_image_id, first_image_id + n_images):
        scene = generate_scene(cfg, image_id, glyphs)
        images.append(ImageRecord(image_id, w, h, f"images/{image_id:06d}.pgm", scene.pixels))
        for k, (pl, box) in enumerate(zip(scene.placements, scene.boxes)):
            anns.append(InstanceAnnotation(image_id * MAX_INSTANCES_PER_IMAGE + k, image_id, pl.category_id, box))
        log.n_images += 1
        log.n_instances += len(scene.placements)
        log.categories_per_image.append(len({p.category_id for p in scene.placements}))
        log.placements[image_id] = scene.placements
    categories = [CategoryRecord(c, f"glyph_{c:03d}") for c in range(1, cfg.n_categories + 1)]
    return Dataset(tuple(images), tuple(anns), tuple(categories)).tagged(scene_config=cfg.to_dict())


def rerender(cfg: SceneConfig, placements: Sequence[Placement]) -> list[Optional[BoundingBox]]:
    """Boxes recomputed from a placement manifest."""
    glyphs = glyph_universe(cfg)
    return [mask_box(*render_mask(glyphs[p.category_id], p, cfg.canvas)) for p in placements]


# -- files ---------------------------------------------------------------------

def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_dataset(ds: Dataset, out_dir: str | Path, cfg: SceneConfig, n_images: int, first_image_id: int = 1) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        if im.pixels is not None and im.file_name:
            write_pgm(out / im.file_name, im.pixels)
    save_dataset(ds, out / "annotations.json")
    manifest = {"scene_config": cfg.to_dict(), "n_images": n_images, "first_image_id": first_image_id}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    return out / "annotations.json"


def load_with_pixels(annotations_path: str | Path) -> Dataset:
    """Load an annotation file and attach rasters found next to it."""
    path = Path(annotations_path)
    ds = load_dataset(path)
    images = []
    for im in ds.images:
        raster = path.parent / im.file_name if im.file_name else None
        pixels = read_pgm(raster) if raster is not None and raster.exists() else None
        images.append(dataclasses.replace(im, pixels=pixels))
    return dataclasses.replace(ds, images=tuple(images))
