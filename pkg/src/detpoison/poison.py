"""Clean-label training-set poisoning: background scattering (ODA),
target-class center patching (OGA), and the combined mode.

The annotation file is never rewritten; the pipeline byte-copies it and the
manifest records exactly which pixels changed where.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coco_io import (
    DatasetIndex,
    annotations_digest,
    is_lossless,
    load_image,
    save_image,
)
from .errors import (
    ConfigError,
    EmptySelectionError,
    PlacementExhaustedError,
)
from .geometry import BBox, centered_region, iou, round_half_up
from .trigger import Trigger, blend_patch

logger = logging.getLogger(__name__)

MODES = ("oda", "oga", "both")
EXHAUSTION_POLICIES = ("skip", "partial", "fatal")


@dataclass(frozen=True)
class PoisonConfig:
    mode: str
    seed: int = 0
    trigger_oda: Trigger | None = None
    trigger_oga: Trigger | None = None
    poison_rate: float = 0.1
    triggers_per_image: int = 5
    target_class: int | None = None
    max_placement_attempts: int = 1000
    on_exhaustion: str = "skip"
    oga_rate: float | None = None  # rate-limited OGA variant; None = all instances
    crowd_as_obstacle: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.on_exhaustion not in EXHAUSTION_POLICIES:
            raise ConfigError(
                f"on_exhaustion must be one of {EXHAUSTION_POLICIES}, "
                f"got {self.on_exhaustion!r}"
            )
        if self.mode in ("oda", "both"):
            if self.trigger_oda is None:
                raise ConfigError("ODA poisoning requires trigger_oda")
            if not (0.0 < self.poison_rate <= 1.0):
                raise ConfigError(f"poison_rate {self.poison_rate} outside (0, 1]")
            if self.triggers_per_image < 1:
                raise ConfigError("triggers_per_image must be >= 1")
        if self.mode in ("oga", "both"):
            if self.trigger_oga is None:
                raise ConfigError("OGA poisoning requires trigger_oga")
            if self.target_class is None:
                raise ConfigError("OGA poisoning requires target_class")
            if self.oga_rate is not None and not (0.0 < self.oga_rate <= 1.0):
                raise ConfigError(f"oga_rate {self.oga_rate} outside (0, 1]")
        if self.mode == "both":
            if self.trigger_oda.pattern_id == self.trigger_oga.pattern_id:
                raise ConfigError(
                    "simultaneous mode needs distinct trigger patterns; both are "
                    f"{self.trigger_oda.pattern_id!r}"
                )
        if self.max_placement_attempts < 1:
            raise ConfigError("max_placement_attempts must be >= 1")


@dataclass(frozen=True)
class PlacedRegion:
    region: BBox  # integer-pixel placement
    pattern_id: str


@dataclass(frozen=True)
class ManifestEntry:
    image_id: int
    mode: str
    regions: tuple[PlacedRegion, ...]
    seed: int


@dataclass
class PoisonManifest:
    mode: str
    seed: int
    entries: list[ManifestEntry]
    skipped: list[dict] = field(default_factory=list)
    triggers: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "poison_manifest",
            "mode": self.mode,
            "seed": self.seed,
            "triggers": self.triggers,
            "entries": [
                {
                    "image_id": e.image_id,
                    "mode": e.mode,
                    "regions": [
                        {
                            "x": int(p.region.x),
                            "y": int(p.region.y),
                            "w": int(p.region.w),
                            "h": int(p.region.h),
                            "pattern_id": p.pattern_id,
                        }
                        for p in e.regions
                    ],
                    "seed": e.seed,
                }
                for e in self.entries
            ],
            "skipped": self.skipped,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def per_image_rng(seed: int, image_id: int, lane: int = 0) -> np.random.Generator:
    """Deterministic per-image stream; output independent of worker scheduling."""
    return np.random.default_rng([seed, image_id, lane])


def select_poison_subset(index: DatasetIndex, rate: float, seed: int) -> set[int]:
    """Uniform random image subset of size round_half_up(rate * |images|)."""
    if not (0.0 < rate <= 1.0):
        raise ConfigError(f"poison rate {rate} outside (0, 1]")
    ids = sorted(im.id for im in index.images)
    k = round_half_up(rate * len(ids))
    if k < 1:
        raise EmptySelectionError(
            f"rate {rate} over {len(ids)} images selects no image"
        )
    if k >= len(ids):
        return set(ids)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.asarray(ids, dtype=np.int64), size=k, replace=False)
    return {int(i) for i in chosen}


def select_target_class_images(index: DatasetIndex, target_class: int) -> set[int]:
    """All images containing at least one GT box of the target class."""
    return {
        image_id
        for image_id, anns in index.gt.items()
        if any(a.bbox.category_id == target_class for a in anns)
    }


def scatter_triggers(
    img: np.ndarray,
    gt: list[BBox],
    trig: Trigger,
    n: int,
    seed,
    max_attempts: int = 1000,
    extra_obstacles: list[BBox] | None = None,
) -> tuple[np.ndarray, list[BBox]]:
    """Blend ``n`` non-overlapping triggers into background regions.

    Every placed region has zero IOU with every GT box, every previously
    placed region, and any extra obstacle, and lies fully in-frame. Positions
    are sampled uniformly; the caller's GT list is never modified.

    Raises PlacementExhaustedError after ``max_attempts`` rejected samples,
    carrying the partial image and regions for keep-partial policies.
    """
    if n < 1:
        raise ConfigError(f"trigger count must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = img.shape[:2]
    max_x = w - trig.width
    max_y = h - trig.height
    obstacles = list(gt) + list(extra_obstacles or [])
    placed: list[BBox] = []
    out = img
    if max_x < 0 or max_y < 0:
        raise PlacementExhaustedError(0, n, image=img.copy(), regions=[])
    rejected = 0
    while len(placed) < n:
        x = int(rng.integers(0, max_x + 1))
        y = int(rng.integers(0, max_y + 1))
        region = BBox(float(x), float(y), float(trig.width), float(trig.height))
        if any(iou(region, o) != 0.0 for o in obstacles):
            rejected += 1
            if rejected >= max_attempts:
                raise PlacementExhaustedError(
                    len(placed), n, image=out.copy() if out is img else out,
                    regions=placed,
                )
            continue
        out = blend_patch(out, trig, (x, y))
        obstacles.append(region)
        placed.append(region)
    return out, placed


def patch_target_class_centers(
    img: np.ndarray,
    gt: list[BBox],
    target_class: int,
    trig: Trigger,
) -> tuple[np.ndarray, list[BBox]]:
    """Blend one trigger at the center of every target-class box that can
    fully contain it; too-small boxes are skipped with a warning."""
    out = img
    placed: list[BBox] = []
    for box in gt:
        if box.category_id != target_class:
            continue
        if box.w < trig.width or box.h < trig.height:
            logger.warning(
                "target box %.0fx%.0f cannot contain %dx%d trigger; skipped",
                box.w, box.h, trig.width, trig.height,
            )
            continue
        region = centered_region(box, trig.width, trig.height)
        out = blend_patch(out, trig, (int(region.x), int(region.y)))
        placed.append(region)
    return out, placed


def poison_dataset(
    index: DatasetIndex,
    images_dir,
    cfg: PoisonConfig,
    out_dir,
    workers: int = 1,
) -> PoisonManifest:
    """Write a poisoned copy of the dataset under ``out_dir``.

    Layout: ``out_dir/images/`` (poisoned + benign copies),
    ``out_dir/annotations.json`` (verbatim byte copy of the source file), and
    ``out_dir/manifest.json``. The write is atomic: the directory appears only
    on success.
    """
    cfg.validate()
    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    if index.source_path is None:
        raise ConfigError(
            "index has no source annotation file; poison_dataset needs one for "
            "the byte-identical annotation copy"
        )
    if out_dir.exists():
        raise ConfigError(f"output directory {out_dir} already exists")
    out_dir.parent.mkdir(parents=True, exist_ok=True)

    oda_ids: set[int] = set()
    oga_ids: set[int] = set()
    if cfg.mode in ("oda", "both"):
        oda_ids = select_poison_subset(index, cfg.poison_rate, cfg.seed)
    if cfg.mode in ("oga", "both"):
        oga_ids = select_target_class_images(index, cfg.target_class)
        if cfg.oga_rate is not None and oga_ids:
            keep = select_poison_subset(
                DatasetIndex(
                    images=[im for im in index.images if im.id in oga_ids],
                    categories=index.categories,
                    gt={i: index.gt[i] for i in oga_ids},
                ),
                cfg.oga_rate,
                cfg.seed,
            )
            oga_ids = keep
        if not oga_ids:
            raise EmptySelectionError(
                f"no image contains target class {cfg.target_class}"
            )
    if not oda_ids and not oga_ids:
        raise EmptySelectionError("poison selection is empty")

    staging = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp-", dir=out_dir.parent))
    try:
        (staging / "images").mkdir()
        entries: list[ManifestEntry] = []
        skipped: list[dict] = []

        def benign_copy(src: Path, file_name: str) -> None:
            dest = staging / "images" / file_name
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dest)

        def process(im) -> tuple[ManifestEntry | None, dict | None]:
            src = images_dir / im.file_name
            do_oda = im.id in oda_ids
            do_oga = im.id in oga_ids
            if not do_oda and not do_oga:
                benign_copy(src, im.file_name)
                return None, None
            img = load_image(src)
            obstacles = [
                a.bbox for a in index.gt[im.id]
                if cfg.crowd_as_obstacle or not a.iscrowd
            ]
            regions: list[PlacedRegion] = []
            if do_oga:
                img, oga_regions = patch_target_class_centers(
                    img, index.gt_boxes(im.id), cfg.target_class, cfg.trigger_oga
                )
                regions += [
                    PlacedRegion(r, cfg.trigger_oga.pattern_id) for r in oga_regions
                ]
                if not oga_regions:
                    do_oga = False  # every target box was too small
            if do_oda:
                rng = per_image_rng(cfg.seed, im.id)
                try:
                    img, oda_regions = scatter_triggers(
                        img,
                        obstacles,
                        cfg.trigger_oda,
                        cfg.triggers_per_image,
                        rng,
                        cfg.max_placement_attempts,
                        extra_obstacles=[p.region for p in regions],
                    )
                except PlacementExhaustedError as e:
                    if cfg.on_exhaustion == "fatal":
                        raise
                    if cfg.on_exhaustion == "partial" and (e.placed or do_oga):
                        img = e.image
                        oda_regions = list(e.regions)
                        logger.warning(
                            "image %d: kept partial placement %d/%d",
                            im.id, e.placed, cfg.triggers_per_image,
                        )
                    else:
                        logger.warning(
                            "image %d: placement exhausted at %d/%d; skipped",
                            im.id, e.placed, cfg.triggers_per_image,
                        )
                        benign_copy(src, im.file_name)
                        return None, {
                            "image_id": im.id,
                            "placed": e.placed,
                            "requested": cfg.triggers_per_image,
                        }
                regions += [
                    PlacedRegion(r, cfg.trigger_oda.pattern_id) for r in oda_regions
                ]
                do_oda = bool(oda_regions)
            if not regions:
                benign_copy(src, im.file_name)
                return None, None
            out_name = im.file_name
            if not is_lossless(src):
                out_name = str(Path(im.file_name).with_suffix(".ppm"))
                logger.warning(
                    "lossy input %s re-encoded losslessly as %s; the annotation "
                    "file still references the original name",
                    im.file_name, out_name,
                )
            dest = staging / "images" / out_name
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_image(img, dest)
            mode = "both" if (do_oda and do_oga) else ("oda" if do_oda else "oga")
            return (
                ManifestEntry(
                    image_id=im.id, mode=mode, regions=tuple(regions), seed=cfg.seed
                ),
                None,
            )

        images_sorted = sorted(index.images, key=lambda im: im.id)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(process, images_sorted))
        else:
            results = [process(im) for im in images_sorted]
        for entry, skip in results:
            if entry is not None:
                entries.append(entry)
            if skip is not None:
                skipped.append(skip)

        shutil.copyfile(index.source_path, staging / "annotations.json")
        in_digest = annotations_digest(index.source_path)
        out_digest = annotations_digest(staging / "annotations.json")
        assert in_digest == out_digest, "clean-label contract violated"

        manifest = PoisonManifest(
            mode=cfg.mode,
            seed=cfg.seed,
            entries=entries,
            skipped=skipped,
            triggers=_trigger_meta(cfg),
        )
        manifest.save(staging / "manifest.json")
        os.rename(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return manifest


def _trigger_meta(cfg: PoisonConfig) -> dict[str, dict]:
    meta = {}
    for trig in (cfg.trigger_oda, cfg.trigger_oga):
        if trig is None:
            continue
        meta[trig.pattern_id] = {
            "width": trig.width,
            "height": trig.height,
            "alpha": trig.alpha,
            "sha256": hashlib.sha256(trig.pattern.tobytes()).hexdigest(),
        }
    return meta


def load_manifest(path) -> PoisonManifest:
    with open(path) as f:
        doc = json.load(f)
    entries = [
        ManifestEntry(
            image_id=e["image_id"],
            mode=e["mode"],
            regions=tuple(
                PlacedRegion(
                    BBox(float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"])),
                    r["pattern_id"],
                )
                for r in e["regions"]
            ),
            seed=e["seed"],
        )
        for e in doc["entries"]
    ]
    return PoisonManifest(
        mode=doc["mode"],
        seed=doc["seed"],
        entries=entries,
        skipped=doc.get("skipped", []),
        triggers=doc.get("triggers", {}),
    )
