"""Config-driven experiment orchestration and the ``bench`` command line.

A run trains one detector per (condition, split), where a condition is a
subsampled training set, then evaluates it for every evaluation variant
(k-shot, empty references) and repetition. Every (condition, variant, split,
repetition) result is written as its own JSON cell before aggregation, so an
interrupted run resumes where it stopped and all reported numbers can be
recomputed from the cells.

Output layout::

    out/
      config.resolved.json   provenance.json   gap_report.json   curves.csv
      models/<condition>/split<i>.siamdet  (+ .loss.csv, .subsample.json)
      cells/<condition>/<variant>/split<i>/rep<r>.json
      reports/<condition>/<variant>.json|.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .annotations import Dataset, DatasetError, load_dataset, save_dataset
from .episodes import EpisodeSampler, build_eval_queries, query_record, write_manifest, read_query_manifest
from .matcheval import (
    EvalConfig,
    EvalResult,
    GapReport,
    ProtocolViolation,
    evaluate_run,
    gap_report,
    read_detections,
    write_detections,
    write_report,
)
from .protocol import (
    CategorySplit,
    ProtocolError,
    SplitSpec,
    SubsampleSpec,
    apply_split,
    load_splits,
    make_splits,
    save_splits,
    split_manifest,
    subsample_training_set,
)
from .siamdet import DetectorError, TrainConfig, load_model, run_queries, save_model, train_detector
from .synthworld import SceneConfig, generate_dataset, load_with_pixels, preset, write_dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_STAGE = 0, 2, 3, 4
EVAL_FIRST_IMAGE_ID = 100001


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and cell coordinates."""

    def __init__(self, stage: str, coords: dict, cause: BaseException):
        self.stage, self.coords, self.cause = stage, coords, cause
        where = ", ".join(f"{k}={v}" for k, v in coords.items())
        super().__init__(f"stage {stage!r} failed at {where}: {type(cause).__name__}: {cause}")


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSource:
    """Either a synthetic scene config or COCO-style annotation files (with PGM rasters)."""

    synth: Optional[SceneConfig] = None
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    n_train_images: int = 300
    n_eval_images: int = 80

    def __post_init__(self):
        if (self.synth is None) == (self.train_path is None):
            raise ConfigError("dataset needs exactly one of a synthetic preset/scene or a train path")

    def to_dict(self) -> dict:
        return {
            "synth": None if self.synth is None else self.synth.to_dict(),
            "train_path": self.train_path,
            "eval_path": self.eval_path,
            "n_train_images": self.n_train_images,
            "n_eval_images": self.n_eval_images,
        }


@dataclass(frozen=True)
class Condition:
    mode: str  # "full" or a SubsampleSpec mode
    fraction: float = 1.0
    sampling: str = "instances"

    @property
    def name(self) -> str:
        return "full" if self.mode == "full" else f"{self.mode}-{self.fraction:g}"

    def spec(self, seed: int) -> Optional[SubsampleSpec]:
        if self.mode == "full":
            return None
        return SubsampleSpec(self.mode, self.fraction, seed, self.sampling)


@dataclass(frozen=True)
class EvalVariant:
    k_shots: int = 1
    empty_refs: bool = False

    @property
    def name(self) -> str:
        return f"k{self.k_shots}" + ("-empty" if self.empty_refs else "")


@dataclass
class ExperimentConfig:
    dataset: DatasetSource
    split: SplitSpec = field(default_factory=SplitSpec)
    split_indices: tuple[int, ...] = ()  # empty: all splits
    conditions: tuple[Condition, ...] = (Condition("full"),)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variants: tuple[EvalVariant, ...] = (EvalVariant(),)
    reference_context: float = 0.0
    out_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        names = [c.name for c in self.conditions]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate conditions: {names}")
        bad = [i for i in self.split_indices if not 0 <= i < self.split.n_splits]
        if bad:
            raise ConfigError(f"split indices {bad} outside 0..{self.split.n_splits - 1}")

    @property
    def active_splits(self) -> tuple[int, ...]:
        return self.split_indices or tuple(range(self.split.n_splits))

    def resolved(self) -> dict:
        """Fully expanded config; its hash identifies the run."""
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "split": {"n_splits": self.split.n_splits, "ordering": self.split.ordering, "indices": list(self.active_splits)},
            "conditions": [dataclasses.asdict(c) for c in self.conditions],
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "variants": [dataclasses.asdict(v) for v in self.variants],
            "reference_context": self.reference_context,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _variants(ks: Sequence[int], empties: Sequence[bool]) -> tuple[EvalVariant, ...]:
    # every empty reference embeds identically, so k only matters with real crops
    out = []
    for e in empties:
        for k in ks:
            v = EvalVariant(1 if e else k, e)
            if v not in out:
                out.append(v)
    return tuple(out)


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _take(table: dict, allowed: set[str], where: str) -> dict:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return table


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed TOML document."""
    try:
        return _config_from_dict(dict(raw), base_dir)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _config_from_dict(raw: dict, base_dir: Path) -> ExperimentConfig:
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    _take(raw, {"seed", "out", "workers", "dataset", "split", "conditions", "train", "eval", "reference_context"}, "top level")
    seed = int(raw.get("seed", 0))

    ds = _take(dict(raw.get("dataset", {})), {"preset", "scene", "train", "eval", "n_train_images", "n_eval_images"}, "dataset")
    synth = None
    if "preset" in ds or "scene" in ds:
        scene = {"seed": seed, **ds.get("scene", {})}
        scene = {k: (tuple(v) if isinstance(v, list) else v) for k, v in scene.items()}
        synth = preset(ds["preset"], **scene) if "preset" in ds else SceneConfig(**scene)

    def _path(key):
        if key not in ds:
            return None
        p = (base_dir / ds[key]).resolve()
        if not p.exists():
            raise ConfigError(f"dataset.{key}: {p} does not exist")
        return str(p)

    source = DatasetSource(
        synth, _path("train"), _path("eval"), int(ds.get("n_train_images", 300)), int(ds.get("n_eval_images", 80))
    )

    sp = _take(dict(raw.get("split", {})), {"n_splits", "ordering", "indices"}, "split")
    split = SplitSpec(int(sp.get("n_splits", 4)), sp.get("ordering", "id"))

    conditions = []
    for c in raw.get("conditions", []):
        c = _take(dict(c), {"mode", "fractions", "fraction", "sampling"}, "conditions")
        mode = c.get("mode", "full")
        if mode == "full":
            conditions.append(Condition("full"))
            continue
        for f in _as_list(c.get("fractions", c.get("fraction", 1.0))):
            cond = Condition(mode, float(f), c.get("sampling", "instances"))
            cond.spec(0)  # validates mode, fraction and sampling
            conditions.append(cond)

    train = TrainConfig.from_dict({k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.get("train", {}).items()})
    train = dataclasses.replace(train, seed=seed)

    ev = dict(raw.get("eval", {}))
    ks = [int(k) for k in _as_list(ev.pop("k_shots", 1))]
    empties = [bool(e) for e in _as_list(ev.pop("empty_refs", False))]
    variants = _variants(ks, empties)
    eval_cfg = EvalConfig(**_take(ev, set(EvalConfig.__dataclass_fields__) - {"k_shots"}, "eval"))

    return ExperimentConfig(
        dataset=source,
        split=split,
        split_indices=tuple(int(i) for i in sp.get("indices", ())),
        conditions=tuple(conditions) or (Condition("full"),),
        train=train,
        eval=eval_cfg,
        variants=variants,
        reference_context=float(raw.get("reference_context", 0.0)),
        out_dir=str(raw.get("out", "runs/default")),
        seed=seed,
        workers=int(raw.get("workers", 1)),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent)


def with_overrides(
    cfg: ExperimentConfig,
    out: Optional[str] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    empty_refs: Optional[bool] = None,
    k_shots: Optional[int] = None,
) -> ExperimentConfig:
    """Apply command-line overrides. A new seed reseeds every stochastic stage."""
    cfg = dataclasses.replace(cfg)
    if out is not None:
        cfg.out_dir = out
    if workers is not None:
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        cfg.workers = workers
    if seed is not None:
        old = cfg.seed
        cfg.seed = seed
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        synth = cfg.dataset.synth
        if synth is not None and synth.seed == old:
            cfg.dataset = dataclasses.replace(cfg.dataset, synth=dataclasses.replace(synth, seed=seed))
    if empty_refs is not None or k_shots is not None:
        ks = sorted({v.k_shots for v in cfg.variants}) if k_shots is None else [k_shots]
        es = sorted({v.empty_refs for v in cfg.variants}) if empty_refs is None else [empty_refs]
        cfg.variants = _variants(ks, es)
    return cfg


# -- seeds ---------------------------------------------------------------------------

_TRAIN_STREAM, _QUERY_STREAM = 1, 2


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 31-bit seed for a stage, a function of the global seed and cell keys only."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0] >> 1)


def train_seed(cfg: ExperimentConfig, split_index: int) -> int:
    # the same across conditions, so conditions differ only in their data
    return derive_seed(cfg.seed, _TRAIN_STREAM, split_index)


def query_seed(cfg: ExperimentConfig, split_index: int, repetition: int) -> int:
    return derive_seed(cfg.seed, _QUERY_STREAM, split_index, repetition)


# -- data ---------------------------------------------------------------------------

def load_data(source: DatasetSource) -> tuple[Dataset, Dataset]:
    """(training pool, evaluation pool). Without an eval path, evaluation uses the training file."""
    if source.synth is not None:
        train = generate_dataset(source.synth, source.n_train_images)
        held = generate_dataset(source.synth, source.n_eval_images, first_image_id=EVAL_FIRST_IMAGE_ID)
        return train, held
    train = load_with_pixels(source.train_path)
    held = load_with_pixels(source.eval_path) if source.eval_path else train
    return train, held


# -- pipeline ------------------------------------------------------------------------

@dataclass
class ReportBundle:
    reports: dict[tuple[str, str], GapReport]  # (condition, variant) -> report
    curves: list[dict]
    provenance: dict
    out_dir: Path


def _cell_path(out: Path, cond: str, variant: str, split_index: int, rep: int) -> Path:
    return out / "cells" / cond / variant / f"split{split_index}" / f"rep{rep}.json"


def _model_path(out: Path, cond: str, split_index: int) -> Path:
    return out / "models" / cond / f"split{split_index}.siamdet"


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _train_set(cfg: ExperimentConfig, train_pool: Dataset, split: CategorySplit, cond: Condition) -> tuple[Dataset, dict]:
    tr = apply_split(train_pool, split, "train")
    spec = cond.spec(cfg.seed)
    if spec is None:
        cats = sorted(split.train_category_ids)
        manifest = {"mode": "full", "fraction": 1.0, "seed": cfg.seed, "category_ids": cats, "n_instances": len(tr.annotations)}
        return tr, manifest
    sub = subsample_training_set(tr, split.train_category_ids, spec)
    return sub, sub.meta["subsample"]


_STATE: dict[str, Any] = {}


def _run_job(job: tuple[str, int]) -> list[str]:
    """Train (or load) the detector of one (condition, split) and evaluate all its missing cells."""
    cfg: ExperimentConfig = _STATE["cfg"]
    train_pool, eval_pool = _STATE["data"]
    splits = _STATE["splits"]
    cond = next(c for c in cfg.conditions if c.name == job[0])
    split = splits[job[1]]
    out = Path(cfg.out_dir)
    coords = {"condition": cond.name, "split": split.split_index}

    todo = [
        (v, r)
        for v in cfg.variants
        for r in range(cfg.eval.n_repetitions)
        if not _cell_path(out, cond.name, v.name, split.split_index, r).exists()
    ]
    if not todo:
        return []

    try:
        train_ds, manifest = _train_set(cfg, train_pool, split, cond)
    except (ProtocolError, DatasetError) as exc:
        raise StageError("subsample", coords, exc) from exc

    mpath = _model_path(out, cond.name, split.split_index)
    if mpath.exists():
        model = load_model(mpath)
    else:
        try:
            tcfg = dataclasses.replace(cfg.train, seed=train_seed(cfg, split.split_index))
            sampler = EpisodeSampler(train_ds, tcfg.seed, tcfg.reference_size, cfg.reference_context)
            result = train_detector(train_ds, sampler, tcfg)
        except Exception as exc:
            raise StageError("train", coords, exc) from exc
        model = result.model
        _write_atomic(mpath.with_suffix(".loss.csv"), result.trace_csv())
        _write_atomic(mpath.with_suffix(".subsample.json"), json.dumps(
            split_manifest(split, manifest, cfg.seed) | {"category_ids": manifest["category_ids"], "n_instances": manifest["n_instances"]},
            sort_keys=True, indent=1,
        ))
        mpath.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, mpath.with_suffix(".tmp"))
        os.replace(mpath.with_suffix(".tmp"), mpath)

    used = manifest["category_ids"]
    categories = set(used) | split.heldout_category_ids
    eval_cfg = cfg.eval
    written = []
    for variant, rep in todo:
        cell = {**coords, "variant": variant.name, "repetition": rep}
        try:
            queries = build_eval_queries(
                eval_pool, split, variant.k_shots, variant.empty_refs,
                query_seed(cfg, split.split_index, rep), model.reference_size, cfg.reference_context, categories,
            )
            dets = run_queries(model, eval_pool, queries)
        except Exception as exc:
            raise StageError("eval", cell, exc) from exc
        result = evaluate_run(dets, queries, eval_pool, split, dataclasses.replace(eval_cfg, k_shots=variant.k_shots), used, rep)
        record = {
            **cell,
            "k_shots": variant.k_shots,
            "empty_refs": variant.empty_refs,
            "mode": cond.mode,
            "fraction": cond.fraction,
            "n_train_categories": len(used),
            "n_train_instances": manifest["n_instances"],
            "n_queries": len(queries),
            "n_detections": len(dets),
            "result": result.to_dict(),
        }
        path = _cell_path(out, cond.name, variant.name, split.split_index, rep)
        _write_atomic(path, json.dumps(record, sort_keys=True, indent=1))
        written.append(str(path))
    return written


def _check_run_dir(cfg: ExperimentConfig, out: Path) -> None:
    snap = out / "config.resolved.json"
    if snap.exists():
        old = json.loads(snap.read_text(encoding="utf-8"))
        if old.get("config_hash") != cfg.config_hash():
            raise ConfigError(f"{out} holds a run with a different configuration; choose another --out")


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Run (or resume) every (condition, split) job, then aggregate all cells."""
    out = Path(cfg.out_dir)
    _check_run_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(
        out / "config.resolved.json",
        json.dumps({"config_hash": cfg.config_hash(), "config": cfg.resolved()}, sort_keys=True, indent=1),
    )
    try:
        data = load_data(cfg.dataset)
    except Exception as exc:
        raise StageError("data", {"source": cfg.dataset.train_path or "synth"}, exc) from exc
    try:
        splits = {s.split_index: s for s in make_splits(data[0].categories, cfg.split)}
    except ProtocolError as exc:
        raise StageError("split", {}, exc) from exc

    _STATE.update(cfg=cfg, data=data, splits=splits)
    jobs = [(c.name, i) for c in cfg.conditions for i in cfg.active_splits]
    try:
        if cfg.workers == 1 or len(jobs) == 1:
            for job in jobs:
                _run_job(job)
        else:
            # forked workers inherit the loaded data; results land in per-cell files
            import multiprocessing

            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(min(cfg.workers, len(jobs)), mp_context=ctx) as pool:
                list(pool.map(_run_job, jobs))
    finally:
        _STATE.clear()
    return write_reports(out)


# -- aggregation ---------------------------------------------------------------------

def load_cells(out: str | Path) -> list[dict]:
    cells = []
    for path in sorted(Path(out).glob("cells/*/*/split*/rep*.json")):
        cells.append(json.loads(path.read_text(encoding="utf-8")))
    return cells


CURVE_FIELDS = ["mode", "fraction", "n_train_categories", "n_train_instances", "variant", "group", "ap50", "ci95", "n_splits", "n_repetitions"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def aggregate(cells: Sequence[dict]) -> tuple[dict[tuple[str, str], GapReport], list[dict], dict]:
    """Group cells by (condition, variant) and reduce each group to a report and curve rows."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for c in cells:
        groups.setdefault((c["condition"], c["variant"]), []).append(c)
    reports, rows, info = {}, [], {}
    for key in sorted(groups, key=lambda k: (groups[k][0]["mode"], groups[k][0]["fraction"], k[1])):
        members = groups[key]
        results = [EvalResult.from_dict(c["result"]) for c in members]
        rep = gap_report(results)
        reports[key] = rep
        first = members[0]
        by_split = {c["result"]["split_index"]: c for c in members}
        n_cats = math.fsum(c["n_train_categories"] for c in by_split.values()) / len(by_split)
        n_inst = math.fsum(c["n_train_instances"] for c in by_split.values()) / len(by_split)
        info[key] = {"results": results, "mode": first["mode"], "fraction": first["fraction"],
                     "k_shots": first["k_shots"], "empty_refs": first["empty_refs"],
                     "n_train_categories": n_cats, "n_train_instances": n_inst}
        for group, ap, ci in (("train", rep.train_ap, rep.ci95_train), ("heldout", rep.heldout_ap, rep.ci95_heldout)):
            rows.append({
                "mode": first["mode"], "fraction": first["fraction"], "n_train_categories": n_cats,
                "n_train_instances": n_inst, "variant": key[1], "group": group, "ap50": ap, "ci95": ci,
                "n_splits": rep.n_splits, "n_repetitions": rep.n_repetitions,
            })
    return reports, rows, info


def curves_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in CURVE_FIELDS})
    return buf.getvalue()


def provenance(out: Path) -> dict:
    snap = out / "config.resolved.json"
    resolved = json.loads(snap.read_text(encoding="utf-8")) if snap.exists() else {}
    return {
        "config_hash": resolved.get("config_hash"),
        "seed": resolved.get("config", {}).get("seed"),
        "versions": {
            "oneshotbench": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def write_reports(out: str | Path) -> ReportBundle:
    """(Re)build gap_report.json, curves.csv and per-condition reports from stored cells."""
    out = Path(out)
    cells = load_cells(out)
    if not cells:
        raise ConfigError(f"no result cells under {out}")
    reports, rows, info = aggregate(cells)
    prov = provenance(out)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "provenance": prov,
        "conditions": [
            {
                "condition": cond,
                "variant": variant,
                "mode": info[(cond, variant)]["mode"],
                "fraction": info[(cond, variant)]["fraction"],
                "k_shots": info[(cond, variant)]["k_shots"],
                "empty_refs": info[(cond, variant)]["empty_refs"],
                "n_train_categories": info[(cond, variant)]["n_train_categories"],
                "n_train_instances": info[(cond, variant)]["n_train_instances"],
                "report": rep.to_dict(),
            }
            for (cond, variant), rep in reports.items()
        ],
    }
    _write_atomic(out / "gap_report.json", json.dumps(doc, sort_keys=True, indent=1))
    _write_atomic(out / "curves.csv", curves_csv(rows))
    _write_atomic(out / "provenance.json", json.dumps(prov, sort_keys=True, indent=1))
    for (cond, variant), rep in reports.items():
        d = out / "reports" / cond
        d.mkdir(parents=True, exist_ok=True)
        write_report(info[(cond, variant)]["results"], rep, d / f"{variant}.json", d / f"{variant}.csv")
    return ReportBundle(reports, rows, prov, out)


# -- command line --------------------------------------------------------------------

def _load_annotations(path: str, pixels: bool = False) -> Dataset:
    return load_with_pixels(path) if pixels else load_dataset(path)


def _pick_split(args) -> CategorySplit:
    splits = load_splits(args.splits)
    match = [s for s in splits if s.split_index == args.split_index]
    if not match:
        raise ConfigError(f"{args.splits} has no split {args.split_index}")
    return match[0]


def cmd_split(args) -> int:
    ds = _load_annotations(args.annotations)
    splits = make_splits(ds.categories, SplitSpec(args.n_splits, args.ordering))
    save_splits(splits, args.out, seed=args.seed)
    for s in splits:
        print(f"split {s.split_index}: {len(s.train_category_ids)} train / {len(s.heldout_category_ids)} held-out")
    return EXIT_OK


def cmd_subsample(args) -> int:
    ds = _load_annotations(args.annotations)
    split = _pick_split(args)
    tr = apply_split(ds, split, "train")
    sub = subsample_training_set(tr, split.train_category_ids, SubsampleSpec(args.mode, args.fraction, args.seed or 0, args.sampling))
    save_dataset(sub, args.out)
    manifest = split_manifest(split, sub.meta["subsample"])
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest | sub.meta["subsample"], sort_keys=True, indent=1), encoding="utf-8")
    print(f"{sub.meta['subsample']['n_instances']} instances over {len(sub.meta['subsample']['category_ids'])} categories")
    return EXIT_OK


def cmd_synth(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.config:
        cfg = load_config(args.config)
        if cfg.dataset.synth is None:
            raise ConfigError("config has no synthetic dataset")
        scene = dataclasses.replace(cfg.dataset.synth, **overrides)
    else:
        scene = preset(args.preset, **overrides)
    ds = generate_dataset(scene, args.n_images, args.first_image_id)
    path = write_dataset(ds, args.out, scene, args.n_images, args.first_image_id)
    print(f"wrote {len(ds.images)} images, {len(ds.annotations)} instances to {path}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    tcfg = load_config(args.config).train if args.config else TrainConfig()
    return tcfg if args.seed is None else dataclasses.replace(tcfg, seed=args.seed)


def cmd_train(args) -> int:
    ds = _load_annotations(args.annotations, pixels=True)
    split = _pick_split(args)
    tr = apply_split(ds, split, "train")
    tcfg = _train_config(args)
    try:
        result = train_detector(tr, EpisodeSampler(tr, tcfg.seed, tcfg.reference_size), tcfg)
    except Exception as exc:
        raise StageError("train", {"split": split.split_index}, exc) from exc
    save_model(result.model, args.out)
    Path(str(args.out) + ".loss.csv").write_text(result.trace_csv(), encoding="utf-8")
    print(f"trained on {len(tr.annotations)} instances; final loss {result.loss_trace[-1]['loss']:.4f}" if result.loss_trace else "no training steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_annotations(args.annotations, pixels=args.model is not None)
    split = _pick_split(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k = args.k_shots or 1
    if args.model:
        model = load_model(args.model)
        queries = build_eval_queries(ds, split, k, bool(args.empty_refs), args.seed or 0, model.reference_size)
        dets = run_queries(model, ds, queries)
        write_manifest((query_record(q, args.seed) for q in queries), out / "queries.jsonl")
        write_detections(dets, out / "detections.jsonl")
    else:
        if not (args.detections and args.queries):
            raise ConfigError("eval needs --model, or both --detections and --queries")
        queries = read_query_manifest(args.queries)
        dets = read_detections(args.detections)
    result = evaluate_run(dets, queries, ds, split, EvalConfig(k_shots=k))
    rep = gap_report([result])
    write_report([result], rep, out / "report.json", out / "report.csv")
    print(f"train AP50 {rep.train_ap:.1f}  held-out AP50 {rep.heldout_ap:.1f}  delta {rep.delta:.1f}")
    return EXIT_OK


def cmd_report(args) -> int:
    bundle = write_reports(args.out)
    _print_summary(bundle)
    return EXIT_OK


def _print_summary(bundle: ReportBundle) -> None:
    for (cond, variant), rep in bundle.reports.items():
        rel = "n/a" if rep.relative is None else f"{100 * rep.relative:.1f}%"
        print(f"{cond:<32} {variant:<9} train {rep.train_ap:5.1f}  held-out {rep.heldout_ap:5.1f}  delta {rep.delta:5.1f}  rel {rel}")


def cmd_run(args) -> int:
    cfg = with_overrides(load_config(args.config), args.out, args.workers, args.seed, args.empty_refs, args.k_shots)
    bundle = run_experiment(cfg)
    _print_summary(bundle)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="One-shot detection benchmark toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str):
        sp.add_argument("--config", help="experiment TOML")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int)

    def split_args(sp):
        sp.add_argument("--splits", required=True, help="split manifest from `bench split`")
        sp.add_argument("--split-index", type=int, default=0)

    sp = sub.add_parser("split", help="write category hold-out splits")
    common(sp, "split manifest JSON")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--n-splits", type=int, default=4)
    sp.add_argument("--ordering", choices=["id", "listed"], default="id")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("subsample", help="write a subsampled training annotation file")
    common(sp, "output annotation JSON")
    sp.add_argument("--annotations", required=True)
    split_args(sp)
    sp.add_argument("--mode", required=True, choices=["category_fraction", "instance_matched_subset", "instance_matched_all"])
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--sampling", choices=["instances", "per_category"], default="instances")
    sp.set_defaults(func=cmd_subsample)

    sp = sub.add_parser("synth", help="generate a synthetic glyph dataset")
    common(sp, "output directory")
    sp.add_argument("--preset", default="high-clutter")
    sp.add_argument("--n-images", type=int, default=100)
    sp.add_argument("--first-image-id", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the desk-scale detector on one split")
    common(sp, "model file")
    sp.add_argument("--annotations", required=True, help="annotation JSON with PGM rasters alongside")
    split_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score detections (or run a model) on one split")
    common(sp, "report directory")
    sp.add_argument("--annotations", required=True)
    split_args(sp)
    sp.add_argument("--model")
    sp.add_argument("--detections")
    sp.add_argument("--queries")
    sp.add_argument("--empty-refs", action="store_true", default=None)
    sp.add_argument("--k-shots", type=int, choices=[1, 5])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="rebuild reports from stored cells")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="full pipeline from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--empty-refs", action="store_true", default=None)
    sp.add_argument("--k-shots", type=int, choices=[1, 5])
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConfigError, tomllib.TOMLDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (ProtocolError, DatasetError, DetectorError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
