"""Seeded behavioral stand-in for a backdoored detector.

The simulator answers from the trigger manifest, not from pixels: it exists to
close the loop on the harness's accounting (planning, ASR, mAP) at desk scale,
not to model perception. Four independent per-image RNG lanes (emission,
suppression, generation, clutter) keep the blank-control output bit-identical
with or without a manifest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .coco_io import DatasetIndex, Detection
from .errors import ConfigError, ManifestMismatchError
from .geometry import BBox, contains_point, iou
from .testset import ActivationPlan

logger = logging.getLogger(__name__)

_LANE_EMIT = 0
_LANE_SUPPRESS = 1
_LANE_GENERATE = 2
_LANE_CLUTTER = 3


@dataclass(frozen=True)
class SimProfile:
    """Behavioral knobs for the simulated detector."""

    p_detect: float = 1.0
    p_oda_suppress: float = 0.0
    p_oga_generate: float = 0.0
    false_positive_rate: float = 0.0  # Poisson mean clutter boxes per image
    target_class: int | None = None
    seed: int = 0
    min_tp_iou: float = 0.8  # jittered TP boxes keep at least this IOU vs GT
    score_lo: float = 0.5
    score_hi: float = 1.0

    def validate(self) -> None:
        for name in ("p_detect", "p_oda_suppress", "p_oga_generate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} {v} outside [0, 1]")
        if self.false_positive_rate < 0:
            raise ConfigError("false_positive_rate must be >= 0")
        if not (0.0 < self.min_tp_iou <= 1.0):
            raise ConfigError("min_tp_iou must be in (0, 1]")
        if not (0.0 <= self.score_lo <= self.score_hi <= 1.0):
            raise ConfigError("score range must satisfy 0 <= lo <= hi <= 1")


def clean_profile(profile: SimProfile) -> SimProfile:
    """The blank-control arm: trigger-insensitive copy of a profile."""
    return replace(profile, p_oda_suppress=0.0, p_oga_generate=0.0)


def _rng(profile: SimProfile, image_id: int, lane: int,
         key: int | None = None) -> np.random.Generator:
    seed = [profile.seed, image_id, lane]
    if key is not None:
        seed.append(key)
    return np.random.default_rng(seed)


def _jitter_box(box: BBox, rng: np.random.Generator, min_iou: float) -> BBox:
    """Translate/scale a GT box while keeping IOU >= min_iou against it."""
    # translation fraction that alone keeps IOU >= min_iou (see tests)
    f = 1.0 - (2.0 * min_iou / (1.0 + min_iou)) ** 0.5
    for _ in range(10):
        dx = float(rng.uniform(-f, f)) * box.w
        dy = float(rng.uniform(-f, f)) * box.h
        s = float(rng.uniform(1.0 - f / 2.0, 1.0 + f / 2.0))
        cand = BBox(box.x + dx, box.y + dy, box.w * s, box.h * s, box.category_id)
        if iou(cand, box) >= min_iou:
            return cand
    return box


def simulate(
    gt: DatasetIndex,
    manifest: ActivationPlan | None,
    profile: SimProfile,
) -> list[Detection]:
    """Emit detections for every image in the index, deterministic per seed.

    Per GT object: emitted with probability p_detect (jittered, scored); if an
    ODA-mode manifest region's center lies in its box, the emission is
    suppressed with probability p_oda_suppress. Per OGA-mode region: a
    target-class detection containing the region center appears with
    probability p_oga_generate. Clutter is Poisson per image.
    """
    profile.validate()
    image_ids = {im.id for im in gt.images}
    oda_centers: dict[int, list[tuple[float, float]]] = {}
    oga_regions: dict[int, list[BBox]] = {}
    if manifest is not None:
        for e in manifest.entries:
            if e.image_id not in image_ids:
                raise ManifestMismatchError(
                    f"manifest references image id {e.image_id} absent from the dataset"
                )
            if e.mode == "oda":
                cx = e.region.x + e.region.w / 2.0
                cy = e.region.y + e.region.h / 2.0
                oda_centers.setdefault(e.image_id, []).append((cx, cy))
            else:
                oga_regions.setdefault(e.image_id, []).append(e.region)

    target = profile.target_class
    if profile.p_oga_generate > 0 and target is None:
        raise ConfigError("p_oga_generate > 0 requires target_class")

    out: list[Detection] = []
    for im in sorted(gt.images, key=lambda im: im.id):
        emit_rng = _rng(profile, im.id, _LANE_EMIT)
        centers = oda_centers.get(im.id, [])
        for ann in gt.gt[im.id]:
            if ann.iscrowd:
                continue
            emitted = float(emit_rng.random()) < profile.p_detect
            box = _jitter_box(ann.bbox, emit_rng, profile.min_tp_iou)
            score = float(emit_rng.uniform(profile.score_lo, profile.score_hi))
            if not emitted:
                continue
            if profile.p_oda_suppress > 0 and any(
                contains_point(ann.bbox, cx, cy) for cx, cy in centers
            ):
                # one keyed coin per annotation: suppression decisions never
                # depend on iteration order or on the emission lane
                coin = float(_rng(profile, im.id, _LANE_SUPPRESS, ann.id).random())
                if coin < profile.p_oda_suppress:
                    continue
            out.append(
                Detection(
                    image_id=im.id,
                    category_id=ann.bbox.category_id,
                    bbox=box,
                    score=score,
                )
            )
        if profile.p_oga_generate > 0:
            gen_rng = _rng(profile, im.id, _LANE_GENERATE)
            for region in oga_regions.get(im.id, []):
                if float(gen_rng.random()) >= profile.p_oga_generate:
                    continue
                grow = [float(gen_rng.uniform(0.0, 1.0)) for _ in range(4)]
                score = float(gen_rng.uniform(profile.score_lo, profile.score_hi))
                out.append(
                    Detection(
                        image_id=im.id,
                        category_id=target,
                        bbox=BBox(
                            region.x - grow[0] * region.w,
                            region.y - grow[1] * region.h,
                            region.w * (1.0 + grow[0] + grow[2]),
                            region.h * (1.0 + grow[1] + grow[3]),
                            target,
                        ),
                        score=score,
                    )
                )
        if profile.false_positive_rate > 0:
            clutter_rng = _rng(profile, im.id, _LANE_CLUTTER)
            n = int(clutter_rng.poisson(profile.false_positive_rate))
            cats = [c.id for c in gt.categories]
            for _ in range(n):
                w = float(clutter_rng.uniform(4.0, max(8.0, im.width / 3.0)))
                h = float(clutter_rng.uniform(4.0, max(8.0, im.height / 3.0)))
                x = float(clutter_rng.uniform(0.0, max(1e-6, im.width - w)))
                y = float(clutter_rng.uniform(0.0, max(1e-6, im.height - h)))
                cat = int(cats[int(clutter_rng.integers(0, len(cats)))])
                score = float(clutter_rng.uniform(profile.score_lo, profile.score_hi))
                out.append(
                    Detection(
                        image_id=im.id, category_id=cat,
                        bbox=BBox(x, y, w, h, cat), score=score,
                    )
                )
    return out
