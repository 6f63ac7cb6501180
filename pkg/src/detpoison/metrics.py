"""Attack success rates and COCO-style mAP@0.5:0.95.

ASR counts are kept as exact integers (hits / triggers); percentages are
derived views. The mAP evaluator follows the COCO protocol: ten IOU
thresholds 0.50:0.05:0.95, greedy score-descending matching with crowd
absorption, 101-point interpolated AP, averaged over categories that have
ground truth, then over thresholds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coco_io import DatasetIndex, Detection
from .errors import DanglingReferenceError, DataError, ManifestMismatchError
from .geometry import BBox, contains_point, intersection_area, iou
from .testset import ActivationPlan, PlanEntry

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}


@dataclass(frozen=True)
class TriggerOutcome:
    image_id: int
    mode: str
    outcome: str  # "hit" | "miss"
    anchor: dict
    witness: Detection | None = None


@dataclass
class AsrResult:
    mode: str
    hits: int
    total: int
    outcomes: list[TriggerOutcome]
    score_thresh: float

    @property
    def percent(self) -> float:
        return 100.0 * self.hits / self.total

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "hits": self.hits,
            "total": self.total,
            "percent": self.percent,
            "score_thresh": self.score_thresh,
            "outcomes": [
                {
                    "image_id": o.image_id,
                    "mode": o.mode,
                    "outcome": o.outcome,
                    "anchor": o.anchor,
                    "witness": None
                    if o.witness is None
                    else {
                        "category_id": o.witness.category_id,
                        "bbox": [o.witness.bbox.x, o.witness.bbox.y,
                                 o.witness.bbox.w, o.witness.bbox.h],
                        "score": o.witness.score,
                    },
                }
                for o in self.outcomes
            ],
        }


@dataclass
class MapResult:
    mean_ap: float  # percent, headline mAP@0.5:0.95
    per_iou: dict[float, float]
    per_class: dict[int, float]
    per_area: dict[str, float]
    num_images: int
    num_detections: int

    def to_dict(self) -> dict:
        return {
            "map_50_95": self.mean_ap,
            "per_iou": {f"{t:.2f}": v for t, v in self.per_iou.items()},
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "per_area": self.per_area,
            "num_images": self.num_images,
            "num_detections": self.num_detections,
        }


def _entries(manifest: ActivationPlan, mode: str) -> list[PlanEntry]:
    entries = [e for e in manifest.entries if e.mode == mode]
    if not entries:
        raise DataError(f"manifest contains no {mode} entries")
    return entries


def _check_coverage(entries: list[PlanEntry], dets: list[Detection]) -> None:
    # A detector may emit zero boxes for an image, so require only that the
    # manifest and detections are not fully disjoint image sets.
    if not dets:
        return
    manifest_ids = {e.image_id for e in entries}
    det_ids = {d.image_id for d in dets}
    if manifest_ids.isdisjoint(det_ids):
        raise ManifestMismatchError(
            "detections reference none of the manifest's images; "
            "wrong detections file?"
        )


def _dets_by_image(dets: list[Detection], score_thresh: float) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for d in dets:
        if d.score > score_thresh:
            out.setdefault(d.image_id, []).append(d)
    return out


def asr_oda(
    manifest: ActivationPlan,
    dets: list[Detection],
    score_thresh: float = 0.25,
) -> AsrResult:
    """Disappearance rate: a trigger hits iff no same-class detection above
    the threshold has IOU > 0.5 with its anchor's GT box."""
    entries = _entries(manifest, "oda")
    _check_coverage(entries, dets)
    by_image = _dets_by_image(dets, score_thresh)
    outcomes: list[TriggerOutcome] = []
    hits = 0
    for e in entries:
        anchor = e.anchor
        survivors = [
            d
            for d in by_image.get(e.image_id, [])
            if d.category_id == anchor.category_id
            and iou(d.bbox, anchor.gt_box) > 0.5
        ]
        if survivors:
            witness = max(survivors, key=lambda d: iou(d.bbox, anchor.gt_box))
            outcome = "miss"
        else:
            witness = None
            outcome = "hit"
            hits += 1
        outcomes.append(
            TriggerOutcome(
                image_id=e.image_id,
                mode="oda",
                outcome=outcome,
                anchor={
                    "gt_box": [anchor.gt_box.x, anchor.gt_box.y,
                               anchor.gt_box.w, anchor.gt_box.h],
                    "category_id": anchor.category_id,
                },
                witness=witness,
            )
        )
    return AsrResult("oda", hits, len(entries), outcomes, score_thresh)


def asr_oga(
    manifest: ActivationPlan,
    dets: list[Detection],
    target_class: int,
    score_thresh: float = 0.25,
) -> AsrResult:
    """Generation rate: iterating triggers in manifest order, a trigger hits
    iff an unclaimed target-class detection contains its center; each
    detection is claimable once (greedy by score), so clusters of boxes
    around one trigger count once."""
    entries = _entries(manifest, "oga")
    _check_coverage(entries, dets)
    by_image = _dets_by_image(dets, score_thresh)
    pools: dict[int, list[Detection]] = {}
    claimed: dict[int, list[bool]] = {}
    for image_id, ds in by_image.items():
        pool = [d for d in ds if d.category_id == target_class]
        pool.sort(key=lambda d: -d.score)  # stable: ties keep file order
        pools[image_id] = pool
        claimed[image_id] = [False] * len(pool)

    outcomes: list[TriggerOutcome] = []
    hits = 0
    for e in entries:
        cx = e.region.x + e.region.w / 2.0
        cy = e.region.y + e.region.h / 2.0
        witness = None
        pool = pools.get(e.image_id, [])
        flags = claimed.get(e.image_id, [])
        for i, d in enumerate(pool):
            if flags[i]:
                continue
            if contains_point(d.bbox, cx, cy):
                flags[i] = True
                witness = d
                break
        if witness is not None:
            hits += 1
        outcomes.append(
            TriggerOutcome(
                image_id=e.image_id,
                mode="oga",
                outcome="hit" if witness is not None else "miss",
                anchor={"center": [cx, cy],
                        "region": [e.region.x, e.region.y, e.region.w, e.region.h]},
                witness=witness,
            )
        )
    return AsrResult("oga", hits, len(entries), outcomes, score_thresh)


def asr_blank(
    manifest: ActivationPlan,
    clean_model_dets: list[Detection],
    mode: str,
    target_class: int | None = None,
    score_thresh: float = 0.25,
) -> AsrResult:
    """Control arm: the same ASR computation fed with a clean model's
    detections on the poisoned test set."""
    if mode == "oda":
        return asr_oda(manifest, clean_model_dets, score_thresh)
    if mode == "oga":
        if target_class is None:
            raise DataError("OGA blank control needs the target class")
        return asr_oga(manifest, clean_model_dets, target_class, score_thresh)
    raise DataError(f"unknown ASR mode {mode!r}")


# --- COCO-style mAP ---------------------------------------------------------


def _match_iou(det: BBox, gt: BBox, crowd: bool) -> float:
    # COCO convention: against a crowd region, overlap is intersection over
    # detection area (the crowd box is a region, not an instance).
    if crowd:
        inter = intersection_area(det, gt)
        return inter / det.area if det.area > 0 else 0.0
    return iou(det, gt)


def coco_map(
    gt: DatasetIndex,
    dets: list[Detection],
    max_dets: int = MAX_DETS,
) -> MapResult:
    """mAP@0.5:0.95 plus per-IOU, per-class, and area-range AP tables.

    Detections are capped to the top ``max_dets`` per image by score. AP uses
    101-point interpolation; categories without GT are excluded from means.
    """
    image_ids = {im.id for im in gt.images}
    cat_ids = [c.id for c in gt.categories]
    cat_set = set(cat_ids)
    for d in dets:
        if d.image_id not in image_ids:
            raise DanglingReferenceError(
                f"detection references unknown image id {d.image_id}"
            )
        if d.category_id not in cat_set:
            raise DanglingReferenceError(
                f"detection references unknown category id {d.category_id}"
            )

    capped: dict[int, list[Detection]] = {}
    for d in dets:
        capped.setdefault(d.image_id, []).append(d)
    for image_id, ds in capped.items():
        ds.sort(key=lambda d: -d.score)  # stable
        del ds[max_dets:]

    image_order = [im.id for im in gt.images]
    t_list = list(IOU_THRESHOLDS)

    def evaluate(area_rng: tuple[float, float]) -> np.ndarray:
        """AP matrix [thresholds x categories]; NaN where a category has no GT."""
        lo, hi = area_rng
        ap = np.full((len(t_list), len(cat_ids)), np.nan)
        for ci, cat in enumerate(cat_ids):
            # gather per-image matching results, in image order
            scores: list[float] = []
            tp_flags: list[list[bool]] = [[] for _ in t_list]
            ignore_flags: list[list[bool]] = [[] for _ in t_list]
            npig = 0
            for image_id in image_order:
                gts = [a for a in gt.gt[image_id] if a.bbox.category_id == cat]
                ds = [d for d in capped.get(image_id, []) if d.category_id == cat]
                if not gts and not ds:
                    continue
                gt_ignore = [
                    a.iscrowd or not (lo <= a.bbox.area <= hi) for a in gts
                ]
                # ignored GT last, stable
                order = sorted(range(len(gts)), key=lambda i: gt_ignore[i])
                gts = [gts[i] for i in order]
                gt_ignore = [gt_ignore[i] for i in order]
                npig += sum(1 for ig in gt_ignore if not ig)
                for ti, t in enumerate(t_list):
                    bar = min(t, 1.0 - 1e-10)
                    taken = [False] * len(gts)
                    for d in ds:
                        best, best_iou = -1, bar
                        for gi, a in enumerate(gts):
                            if taken[gi] and not a.iscrowd:
                                continue
                            if best > -1 and not gt_ignore[best] and gt_ignore[gi]:
                                break
                            v = _match_iou(d.bbox, a.bbox, a.iscrowd)
                            if v < best_iou:
                                continue
                            best, best_iou = gi, v
                        if best == -1:
                            d_area = d.bbox.area
                            tp_flags[ti].append(False)
                            ignore_flags[ti].append(not (lo <= d_area <= hi))
                        else:
                            taken[best] = True
                            tp_flags[ti].append(not gt_ignore[best])
                            ignore_flags[ti].append(gt_ignore[best])
                scores.extend(d.score for d in ds)
            if npig == 0:
                continue
            order = np.argsort(
                -np.asarray(scores), kind="mergesort"
            ) if scores else np.array([], dtype=int)
            for ti in range(len(t_list)):
                tp = np.asarray(tp_flags[ti], dtype=bool)[order]
                ig = np.asarray(ignore_flags[ti], dtype=bool)[order]
                tps = np.cumsum(np.logical_and(tp, ~ig))
                fps = np.cumsum(np.logical_and(~tp, ~ig))
                ap[ti, ci] = _interpolated_ap(tps, fps, npig)
        return ap

    ap_all = evaluate(AREA_RANGES["all"])

    def mean_pct(a: np.ndarray) -> float:
        return 0.0 if np.all(np.isnan(a)) else float(np.nanmean(a)) * 100.0

    per_iou = {t: mean_pct(ap_all[ti]) for ti, t in enumerate(t_list)}
    per_class = {
        cat: mean_pct(ap_all[:, ci]) for ci, cat in enumerate(cat_ids)
        if not np.all(np.isnan(ap_all[:, ci]))
    }
    per_area = {
        name: mean_pct(evaluate(rng))
        for name, rng in AREA_RANGES.items()
        if name != "all"
    }
    return MapResult(
        mean_ap=mean_pct(ap_all),
        per_iou=per_iou,
        per_class=per_class,
        per_area=per_area,
        num_images=len(image_ids),
        num_detections=len(dets),
    )


def _interpolated_ap(tps: np.ndarray, fps: np.ndarray, npig: int) -> float:
    """101-point interpolated AP from cumulative TP/FP counts."""
    if len(tps) == 0:
        return 0.0
    rc = tps / npig
    pr = tps / np.maximum(tps + fps, np.spacing(1))
    pr = pr.copy()
    for i in range(len(pr) - 1, 0, -1):  # precision envelope
        if pr[i] > pr[i - 1]:
            pr[i - 1] = pr[i]
    inds = np.searchsorted(rc, RECALL_GRID, side="left")
    q = np.zeros(len(RECALL_GRID))
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean())
