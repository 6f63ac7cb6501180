"""Rigorously restricted poisoned test sets for backdoor activation.

ODA triggers go only onto true-positive objects whose box dwarfs the trigger
by a factor of five per side; OGA triggers go only into background, defined as
pixels where the clean run of the same detector predicted nothing.
"""

from __future__ import annotations

import base64
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coco_io import DatasetIndex, Detection, load_image, save_image
from .geometry import BBox, centered_region, iou, shift_into_frame
from .trigger import Trigger, blend_patch

logger = logging.getLogger(__name__)

# Minimum object-to-trigger side ratio for an ODA activation anchor.
MIN_SIZE_RATIO = 5.0
DEFAULT_SCORE_THRESH = 0.25


@dataclass(frozen=True)
class TPMatch:
    """A detection that correctly found a GT object on the clean test set
    (IOU strictly above 0.5, same class)."""

    image_id: int
    gt_box: BBox
    det_box: BBox
    category_id: int
    iou: float


@dataclass(frozen=True)
class PlanEntry:
    image_id: int
    mode: str  # "oda" | "oga"
    region: BBox  # integer-pixel placement
    pattern_id: str
    anchor: TPMatch | None = None  # ODA only
    shifted: bool = False


@dataclass
class ActivationPlan:
    mode: str
    score_thresh: float
    seed: int
    triggers: dict[str, Trigger]
    entries: list[PlanEntry] = field(default_factory=list)

    def image_ids(self) -> set[int]:
        return {e.image_id for e in self.entries}


def match_true_positives(
    gt: DatasetIndex,
    dets: list[Detection],
    score_thresh: float = DEFAULT_SCORE_THRESH,
) -> list[TPMatch]:
    """Greedy per-image matching of clean-run detections to GT.

    Detections above the score threshold claim, in descending score order,
    the unmatched same-class GT box of highest IOU, provided that IOU is
    strictly greater than 0.5. Crowd regions are not objects and are never
    match targets.
    """
    by_image: dict[int, list[Detection]] = {}
    for d in dets:
        if d.score > score_thresh:
            by_image.setdefault(d.image_id, []).append(d)

    matches: list[TPMatch] = []
    for im in gt.images:
        candidates = by_image.get(im.id)
        if not candidates:
            continue
        boxes = [a.bbox for a in gt.gt[im.id] if not a.iscrowd]
        taken = [False] * len(boxes)
        order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
        for di in order:
            det = candidates[di]
            best, best_iou = -1, 0.5  # strictly-greater bar
            for gi, box in enumerate(boxes):
                if taken[gi] or box.category_id != det.category_id:
                    continue
                v = iou(det.bbox, box)
                if v > best_iou:
                    best, best_iou = gi, v
            if best >= 0:
                taken[best] = True
                matches.append(
                    TPMatch(
                        image_id=im.id,
                        gt_box=boxes[best],
                        det_box=det.bbox,
                        category_id=det.category_id,
                        iou=best_iou,
                    )
                )
    return matches


def plan_oda(
    tps: list[TPMatch],
    trig: Trigger,
    image_dims: dict[int, tuple[int, int]] | None = None,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    seed: int = 0,
) -> ActivationPlan:
    """One trigger at the GT-box center of every TP whose box is big enough:
    min(H/h_t, W/w_t) >= 5, boundary inclusive."""
    plan = ActivationPlan(
        mode="oda", score_thresh=score_thresh, seed=seed,
        triggers={trig.pattern_id: trig},
    )
    for tp in tps:
        if min(tp.gt_box.h / trig.height, tp.gt_box.w / trig.width) < MIN_SIZE_RATIO:
            continue
        region = centered_region(tp.gt_box, trig.width, trig.height)
        shifted = False
        if image_dims is not None:
            w, h = image_dims[tp.image_id]
            region, shifted = shift_into_frame(region, w, h)
            if shifted:
                logger.warning(
                    "image %d: ODA placement shifted in-frame to (%d, %d)",
                    tp.image_id, int(region.x), int(region.y),
                )
        plan.entries.append(
            PlanEntry(
                image_id=tp.image_id,
                mode="oda",
                region=region,
                pattern_id=trig.pattern_id,
                anchor=tp,
                shifted=shifted,
            )
        )
    return plan


def plan_oga(
    dets: list[Detection],
    image_dims: dict[int, tuple[int, int]],
    trig: Trigger,
    k_per_image: int = 1,
    seed: int = 0,
    max_attempts: int = 1000,
    score_thresh: float = DEFAULT_SCORE_THRESH,
) -> ActivationPlan:
    """Sample up to k background regions per image, each disjoint from every
    clean-run detection and every other planned region. Per-image exhaustion
    plans fewer regions; it never fails globally."""
    occupied: dict[int, list[BBox]] = {}
    for d in dets:
        if d.score > score_thresh:
            occupied.setdefault(d.image_id, []).append(d.bbox)

    plan = ActivationPlan(
        mode="oga", score_thresh=score_thresh, seed=seed,
        triggers={trig.pattern_id: trig},
    )
    for image_id in sorted(image_dims):
        w, h = image_dims[image_id]
        max_x = w - trig.width
        max_y = h - trig.height
        if max_x < 0 or max_y < 0:
            logger.warning("image %d too small for trigger; no OGA region", image_id)
            continue
        rng = np.random.default_rng([seed, image_id])
        obstacles = list(occupied.get(image_id, []))
        planned = 0
        rejected = 0
        while planned < k_per_image and rejected < max_attempts:
            x = int(rng.integers(0, max_x + 1))
            y = int(rng.integers(0, max_y + 1))
            region = BBox(float(x), float(y), float(trig.width), float(trig.height))
            if any(iou(region, o) != 0.0 for o in obstacles):
                rejected += 1
                continue
            obstacles.append(region)
            planned += 1
            plan.entries.append(
                PlanEntry(
                    image_id=image_id,
                    mode="oga",
                    region=region,
                    pattern_id=trig.pattern_id,
                )
            )
        if planned < k_per_image:
            logger.warning(
                "image %d: planned %d/%d OGA regions before exhausting attempts",
                image_id, planned, k_per_image,
            )
    return plan


def materialize(
    plan: ActivationPlan,
    images_dir,
    out_dir,
    index: DatasetIndex,
    workers: int = 1,
) -> ActivationPlan:
    """Write patched test images for every planned placement.

    Only images with placements are written. Returns the manifest (the plan
    itself; every entry doubles as the audit record binding trigger to anchor).
    """
    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_image: dict[int, list[PlanEntry]] = {}
    for e in plan.entries:
        by_image.setdefault(e.image_id, []).append(e)

    def patch_one(image_id: int) -> None:
        im = index.image_by_id(image_id)
        img = load_image(images_dir / im.file_name)
        for e in by_image[image_id]:
            trig = plan.triggers[e.pattern_id]
            img = blend_patch(img, trig, (int(e.region.x), int(e.region.y)))
        dest = out_dir / im.file_name
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, dest)

    ids = sorted(by_image)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(patch_one, ids))
    else:
        for image_id in ids:
            patch_one(image_id)
    return plan


# --- JSON round-trip --------------------------------------------------------


def _box_to_dict(b: BBox) -> dict:
    d = {"x": b.x, "y": b.y, "w": b.w, "h": b.h}
    if b.category_id is not None:
        d["category_id"] = b.category_id
    return d


def _box_from_dict(d: dict) -> BBox:
    return BBox(
        float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]),
        d.get("category_id"),
    )


def plan_to_dict(plan: ActivationPlan) -> dict:
    triggers = {}
    for pid, t in plan.triggers.items():
        triggers[pid] = {
            "width": t.width,
            "height": t.height,
            "alpha": t.alpha,
            "pixels_b64": base64.b64encode(t.pattern.tobytes()).decode("ascii"),
        }
    entries = []
    for e in plan.entries:
        rec: dict = {
            "image_id": e.image_id,
            "mode": e.mode,
            "region": {
                "x": int(e.region.x), "y": int(e.region.y),
                "w": int(e.region.w), "h": int(e.region.h),
                "pattern_id": e.pattern_id,
            },
        }
        if e.anchor is not None:
            rec["anchor"] = {
                "gt_box": _box_to_dict(e.anchor.gt_box),
                "det_box": _box_to_dict(e.anchor.det_box),
                "category_id": e.anchor.category_id,
                "iou": e.anchor.iou,
            }
        if e.shifted:
            rec["shifted"] = True
        entries.append(rec)
    return {
        "kind": "activation_plan",
        "mode": plan.mode,
        "score_thresh": plan.score_thresh,
        "seed": plan.seed,
        "triggers": triggers,
        "entries": entries,
    }


def plan_from_dict(doc: dict) -> ActivationPlan:
    triggers = {}
    for pid, t in doc["triggers"].items():
        pattern = np.frombuffer(
            base64.b64decode(t["pixels_b64"]), dtype=np.uint8
        ).reshape(t["height"], t["width"], 3).copy()
        triggers[pid] = Trigger(pattern=pattern, alpha=t["alpha"], pattern_id=pid)
    entries = []
    for rec in doc["entries"]:
        anchor = None
        if "anchor" in rec:
            a = rec["anchor"]
            anchor = TPMatch(
                image_id=rec["image_id"],
                gt_box=_box_from_dict(a["gt_box"]),
                det_box=_box_from_dict(a["det_box"]),
                category_id=a["category_id"],
                iou=a["iou"],
            )
        r = rec["region"]
        entries.append(
            PlanEntry(
                image_id=rec["image_id"],
                mode=rec["mode"],
                region=BBox(float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"])),
                pattern_id=r["pattern_id"],
                anchor=anchor,
                shifted=rec.get("shifted", False),
            )
        )
    return ActivationPlan(
        mode=doc["mode"],
        score_thresh=doc["score_thresh"],
        seed=doc["seed"],
        triggers=triggers,
        entries=entries,
    )


def save_plan(plan: ActivationPlan, path) -> None:
    with open(path, "w") as f:
        json.dump(plan_to_dict(plan), f, indent=1)


def load_plan(path) -> ActivationPlan:
    with open(path) as f:
        return plan_from_dict(json.load(f))
