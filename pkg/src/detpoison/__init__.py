"""detpoison: clean-label backdoor poisoning and evaluation for COCO-format
object-detection datasets.

Pipeline: poison a training set (background-scatter or target-class center
triggers, annotations untouched), build rigorously restricted activation test
sets, and score ASR / ASR_blank / mAP@0.5:0.95 — with a seeded behavioral
detector simulator so the whole loop is verifiable without training a model.
"""

from .coco_io import (
    DatasetIndex,
    Detection,
    annotations_digest,
    load_annotations,
    load_detections,
    load_image,
    save_annotations,
    save_detections,
    save_image,
)
from .geometry import BBox, center, centered_region, contains_point, iou
from .metrics import asr_blank, asr_oda, asr_oga, coco_map
from .poison import (
    PoisonConfig,
    PoisonManifest,
    patch_target_class_centers,
    poison_dataset,
    scatter_triggers,
    select_poison_subset,
)
from .sim_detector import SimProfile, clean_profile, simulate
from .testset import (
    ActivationPlan,
    TPMatch,
    match_true_positives,
    materialize,
    plan_oda,
    plan_oga,
)
from .trigger import Trigger, blend_patch, blend_values, load_trigger, synth_gaussian_trigger

__version__ = "0.1.0"

__all__ = [
    "ActivationPlan",
    "BBox",
    "DatasetIndex",
    "Detection",
    "PoisonConfig",
    "PoisonManifest",
    "SimProfile",
    "TPMatch",
    "Trigger",
    "annotations_digest",
    "asr_blank",
    "asr_oda",
    "asr_oga",
    "blend_patch",
    "blend_values",
    "center",
    "centered_region",
    "clean_profile",
    "coco_map",
    "contains_point",
    "iou",
    "load_annotations",
    "load_detections",
    "load_image",
    "load_trigger",
    "match_true_positives",
    "materialize",
    "patch_target_class_centers",
    "plan_oda",
    "plan_oga",
    "poison_dataset",
    "save_annotations",
    "save_detections",
    "save_image",
    "scatter_triggers",
    "select_poison_subset",
    "simulate",
    "synth_gaussian_trigger",
]
