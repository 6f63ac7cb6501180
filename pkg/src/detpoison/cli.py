"""Command-line surface: poison -> testset -> simulate -> eval.

Every command accepts a JSON config file (flat keys matching flag names) with
explicit flags taking precedence, and records the fully resolved config next
to its outputs so any run can be reproduced.

Exit codes: 0 success, 2 config error, 3 data error, 4 placement exhaustion
when --on-exhaustion=fatal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import coco_io, metrics, poison, sim_detector, testset
from .errors import (
    ConfigError,
    DanglingReferenceError,
    DataError,
    PlacementExhaustedError,
)
from .trigger import Trigger, load_trigger, synth_gaussian_trigger

logger = logging.getLogger(__name__)

# fixed lanes so ODA/OGA gaussian triggers derived from one master seed differ
_TRIGGER_LANES = {"oda": 101, "oga": 102}


def build_trigger(spec: str, alpha: float, role: str, seed: int) -> Trigger:
    """Trigger mini-grammar: ``gaussian:<W>x<H>`` or ``file:<path>``."""
    if spec.startswith("gaussian:"):
        dims = spec.split(":", 1)[1]
        try:
            w_s, h_s = dims.lower().split("x")
            w, h = int(w_s), int(h_s)
        except ValueError:
            raise ConfigError(f"bad gaussian trigger size {dims!r}; want <W>x<H>")
        return synth_gaussian_trigger(
            (w, h), [seed, _TRIGGER_LANES[role]], alpha,
            pattern_id=f"{role}:{spec}",
        )
    if spec.startswith("file:"):
        path = spec.split(":", 1)[1]
        return load_trigger(path, alpha, pattern_id=f"{role}:file:{Path(path).name}")
    raise ConfigError(
        f"unknown trigger spec {spec!r}; want gaussian:<W>x<H> or file:<path>"
    )


def _resolve_category(index: coco_io.DatasetIndex | None, value: str | None):
    if value is None:
        return None
    if index is None:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(
                f"target class {value!r} is a name; an annotations file is "
                "needed to resolve it"
            )
    try:
        return index.resolve_category(value)
    except DanglingReferenceError as e:
        raise ConfigError(str(e)) from e


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")


def _record_config(args: argparse.Namespace, path: Path) -> None:
    resolved = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("config", "command", "func") and v is not None
    }
    resolved["command"] = args.command
    with open(path, "w") as f:
        json.dump(resolved, f, indent=1)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="detpoison",
        description="Clean-label backdoor poisoning and evaluation for "
        "COCO-format detection datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("poison", help="stage 1: poison a training set")
    registry["poison"] = p
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=poison.MODES, required=True)
    p.add_argument("--rate", type=float, default=0.1,
                   help="fraction of training images to poison (ODA)")
    p.add_argument("--triggers-per-image", type=int, default=5)
    p.add_argument("--trigger", help="trigger spec for single-trigger modes")
    p.add_argument("--trigger-oda", help="ODA trigger spec (mode both)")
    p.add_argument("--trigger-oga", help="OGA trigger spec (mode both)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--alpha-oda", type=float)
    p.add_argument("--alpha-oga", type=float)
    p.add_argument("--target-class", help="OGA target category id or name")
    p.add_argument("--oga-rate", type=float,
                   help="rate-limit OGA to a fraction of target-class images")
    p.add_argument("--max-attempts", type=int, default=1000)
    p.add_argument("--on-exhaustion", choices=poison.EXHAUSTION_POLICIES,
                   default="skip")
    p.add_argument("--ignore-crowd-obstacles", action="store_true",
                   help="let ODA triggers overlap iscrowd regions")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("testset", help="stage 2: build a restricted activation test set")
    registry["testset"] = p
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--detections", required=True,
                   help="the model's detections on the clean test set")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("oda", "oga"), required=True)
    p.add_argument("--trigger", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--score-thresh", type=float, default=testset.DEFAULT_SCORE_THRESH)
    p.add_argument("--k-per-image", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_testset)

    p = sub.add_parser("simulate", help="produce detections with the behavioral simulator")
    registry["simulate"] = p
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--manifest", help="activation manifest (omit for a clean run)")
    p.add_argument("--out", required=True)
    p.add_argument("--p-detect", type=float, default=1.0)
    p.add_argument("--p-oda-suppress", type=float, default=0.0)
    p.add_argument("--p-oga-generate", type=float, default=0.0)
    p.add_argument("--false-positive-rate", type=float, default=0.0)
    p.add_argument("--target-class")
    p.add_argument("--min-tp-iou", type=float, default=0.8)
    p.add_argument("--score-lo", type=float, default=0.5)
    p.add_argument("--score-hi", type=float, default=1.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="stage 3: ASR / ASR_blank / mAP report")
    registry["eval"] = p
    _add_common(p)
    p.add_argument("--manifest", required=True, help="activation manifest")
    p.add_argument("--detections", required=True,
                   help="detections on the poisoned test set")
    p.add_argument("--blank-detections",
                   help="clean model's detections on the poisoned test set")
    p.add_argument("--annotations", help="clean test set GT (for mAP)")
    p.add_argument("--benign-detections",
                   help="infected model's detections on the clean test set")
    p.add_argument("--normal-detections",
                   help="clean model's detections on the clean test set")
    p.add_argument("--target-class", help="OGA target category id or name")
    p.add_argument("--score-thresh", type=float, default=testset.DEFAULT_SCORE_THRESH)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    return parser, registry


def parse_args(argv) -> argparse.Namespace:
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as f:
                overrides = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}") from e
        if not isinstance(overrides, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        sub = registry[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(
                f"config file {args.config} has unknown keys: {sorted(unknown)}"
            )
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def cmd_poison(args) -> int:
    index = coco_io.load_annotations(args.annotations)
    if args.mode == "both":
        if not args.trigger_oda or not args.trigger_oga:
            raise ConfigError("mode both requires --trigger-oda and --trigger-oga")
        spec_oda, spec_oga = args.trigger_oda, args.trigger_oga
    else:
        if not args.trigger:
            raise ConfigError(f"mode {args.mode} requires --trigger")
        spec_oda = args.trigger if args.mode == "oda" else None
        spec_oga = args.trigger if args.mode == "oga" else None
    alpha_oda = args.alpha_oda if args.alpha_oda is not None else args.alpha
    alpha_oga = args.alpha_oga if args.alpha_oga is not None else args.alpha
    cfg = poison.PoisonConfig(
        mode=args.mode,
        seed=args.seed,
        trigger_oda=build_trigger(spec_oda, alpha_oda, "oda", args.seed)
        if spec_oda else None,
        trigger_oga=build_trigger(spec_oga, alpha_oga, "oga", args.seed)
        if spec_oga else None,
        poison_rate=args.rate,
        triggers_per_image=args.triggers_per_image,
        target_class=_resolve_category(index, args.target_class),
        max_placement_attempts=args.max_attempts,
        on_exhaustion=args.on_exhaustion,
        oga_rate=args.oga_rate,
        crowd_as_obstacle=not args.ignore_crowd_obstacles,
    )
    manifest = poison.poison_dataset(
        index, args.images_dir, cfg, args.out_dir, workers=args.workers
    )
    _record_config(args, Path(args.out_dir) / "resolved_config.json")
    print(
        f"poisoned {len(manifest.entries)} images "
        f"({len(manifest.skipped)} skipped) -> {args.out_dir}"
    )
    return 0


def cmd_testset(args) -> int:
    index = coco_io.load_annotations(args.annotations)
    dets = coco_io.load_detections(args.detections)
    out_dir = Path(args.out_dir)
    if out_dir.exists():
        raise ConfigError(f"output directory {out_dir} already exists")
    trig = build_trigger(args.trigger, args.alpha, args.mode, args.seed)
    dims = {im.id: (im.width, im.height) for im in index.images}
    if args.mode == "oda":
        tps = testset.match_true_positives(index, dets, args.score_thresh)
        plan = testset.plan_oda(tps, trig, dims, args.score_thresh, args.seed)
    else:
        plan = testset.plan_oga(
            dets, dims, trig, args.k_per_image, args.seed,
            args.max_attempts, args.score_thresh,
        )
    out_dir.mkdir(parents=True)
    testset.save_plan(plan, out_dir / "plan.json")
    testset.materialize(plan, args.images_dir, out_dir / "images", index,
                        workers=args.workers)
    doc = testset.plan_to_dict(plan)
    doc["kind"] = "activation_manifest"
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(doc, f, indent=1)
    _record_config(args, out_dir / "resolved_config.json")
    print(
        f"planned {len(plan.entries)} {args.mode} triggers over "
        f"{len(plan.image_ids())} images -> {out_dir}"
    )
    return 0


def cmd_simulate(args) -> int:
    index = coco_io.load_annotations(args.annotations)
    manifest = testset.load_plan(args.manifest) if args.manifest else None
    profile = sim_detector.SimProfile(
        p_detect=args.p_detect,
        p_oda_suppress=args.p_oda_suppress,
        p_oga_generate=args.p_oga_generate,
        false_positive_rate=args.false_positive_rate,
        target_class=_resolve_category(index, args.target_class),
        seed=args.seed,
        min_tp_iou=args.min_tp_iou,
        score_lo=args.score_lo,
        score_hi=args.score_hi,
    )
    dets = sim_detector.simulate(index, manifest, profile)
    coco_io.save_detections(dets, args.out)
    _record_config(args, Path(str(args.out) + ".config.json"))
    print(f"simulated {len(dets)} detections -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = testset.load_plan(args.manifest)
    dets = coco_io.load_detections(args.detections)
    index = (
        coco_io.load_annotations(args.annotations) if args.annotations else None
    )
    target = _resolve_category(index, args.target_class)
    if manifest.mode == "oga" and target is None:
        raise ConfigError("OGA evaluation requires --target-class")

    if manifest.mode == "oda":
        asr = metrics.asr_oda(manifest, dets, args.score_thresh)
    else:
        asr = metrics.asr_oga(manifest, dets, target, args.score_thresh)

    blank = None
    if args.blank_detections:
        blank = metrics.asr_blank(
            manifest,
            coco_io.load_detections(args.blank_detections),
            manifest.mode,
            target_class=target,
            score_thresh=args.score_thresh,
        )

    map_benign = map_normal = None
    if args.benign_detections:
        if index is None:
            raise ConfigError("--benign-detections needs --annotations for GT")
        map_benign = metrics.coco_map(
            index, coco_io.load_detections(args.benign_detections)
        )
    if args.normal_detections:
        if index is None:
            raise ConfigError("--normal-detections needs --annotations for GT")
        map_normal = metrics.coco_map(
            index, coco_io.load_detections(args.normal_detections)
        )

    report = {
        "kind": "eval_report",
        "settings": {
            "mode": manifest.mode,
            "score_thresh": args.score_thresh,
            "target_class": target,
            "manifest_seed": manifest.seed,
            "manifest_score_thresh": manifest.score_thresh,
            "crowd_convention": "coco-absorb",  # crowd GT matches without penalty
            "map_iou_thresholds": list(metrics.IOU_THRESHOLDS),
            "map_max_dets": metrics.MAX_DETS,
        },
        "metrics": {
            "map_normal": None if map_normal is None else map_normal.to_dict(),
            "map_benign": None if map_benign is None else map_benign.to_dict(),
            "asr": asr.to_dict(),
            "asr_blank": None if blank is None else blank.to_dict(),
        },
    }
    with open(args.out, "w") as f:
        json.dump(report, f, indent=1)
    _record_config(args, Path(str(args.out) + ".config.json"))

    def fmt(v) -> str:
        return "-" if v is None else f"{v:.1f}"

    print(f"scenario: {manifest.mode.upper()}  (crowd convention: coco-absorb)")
    rows = [
        ("mAP_normal", None if map_normal is None else map_normal.mean_ap),
        ("mAP_benign", None if map_benign is None else map_benign.mean_ap),
        ("ASR", asr.percent),
        ("ASR_blank", None if blank is None else blank.percent),
    ]
    for name, value in rows:
        print(f"{name:<12} {fmt(value):>7}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = parse_args(argv if argv is not None else sys.argv[1:])
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except PlacementExhaustedError as e:
        print(f"placement exhausted: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
