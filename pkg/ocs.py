#!/usr/bin/env python3
"""
Object-centric crop sampling toolkit
Usage: python ocs.py <command> [options]    (python ocs.py --help for the list)

Diagnostics go to stderr; results are written to the files named by --out.
Exit codes: 0 success, 1 operational error, 2 usage error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from services.classifier_service import CropClassifierService
from services.crop_sampler import (
    build_crop_distribution, export_probability_map, probability_map_image,
)
from services.detector_service import RegionletDetector
from services.evaluation import detection_report
from services.experiment import (
    TEST_MANIFEST, TRAIN_MANIFEST, aligned_detections, boxes_from_detections,
    boxes_from_ground_truth, classification_report, fit_classifier, ground_truths,
    labeled_images, open_manifest, predict_manifest, run_benchmark, run_detector,
    train_detector, use_detection_crops, write_synthetic_dataset,
)
from services.geometry import Rect, resize_shorter_side, scale_rect
from utils.config import KEY_ROUTES, RunConfig, build_run_config, load_config_file
from utils.errors import ConfigurationError, GeometryError, OCSError
from utils.manifest_io import load_detections, save_detections
from utils.pixmap_io import read_pixmap, write_pixmap
from utils.progress import set_progress_enabled

logger = logging.getLogger("ocs")


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    logger.info(f"💾 wrote {path}")


def _parse_box(text: str) -> Rect:
    try:
        x0, y0, x1, y1 = (int(v) for v in text.split(","))
        return Rect(x0, y0, x1, y1)
    except (ValueError, GeometryError) as e:
        raise ConfigurationError(f"--box expects x0,y0,x1,y1 with x0<x1 and y0<y1, got {text!r}") from e


# commands

def cmd_synth_gen(args, run: RunConfig) -> None:
    write_synthetic_dataset(args.out, run.scene, run.experiment.train_count,
                            run.experiment.test_count, run.workers)


def cmd_det_train(args, run: RunConfig) -> None:
    detector = train_detector(open_manifest(args.manifest), run)
    detector.save_model(args.out)


def cmd_det_run(args, run: RunConfig) -> None:
    detector = RegionletDetector(args.model, run.detector)
    data = open_manifest(args.manifest)
    found = run_detector(detector, data, run.workers, relocalize=not args.no_relocalize)
    save_detections([(path, det) for path, det in found if det is not None], args.out)


def cmd_det_eval(args, run: RunConfig) -> None:
    data = open_manifest(args.manifest)
    detections = aligned_detections(data, load_detections(args.detections))
    ev = run.evaluation
    _write_text(args.out, detection_report(detections, ground_truths(data), ev.iou_threshold,
                                           ev.ap_mode, ev.size_bins, ev.size_bin_mode))


def _boxes(args, data):
    if args.detections:
        return boxes_from_detections(data, load_detections(args.detections))
    logger.info("📦 no --detections given, using salient ground-truth boxes")
    return boxes_from_ground_truth(data)


def cmd_cls_train(args, run: RunConfig) -> None:
    data = open_manifest(args.manifest)
    items = labeled_images(data, _boxes(args, data))
    classifier = fit_classifier(items, data.manifest.num_classes, run, run.train.sampler, run.seed)
    classifier.save_model(args.out)


def cmd_cls_eval(args, run: RunConfig) -> None:
    classifier = CropClassifierService(args.model, run.train, run.sampling)
    data = open_manifest(args.manifest)
    if classifier.num_classes != data.manifest.num_classes:
        raise ConfigurationError(
            f"model has {classifier.num_classes} classes, manifest has {data.manifest.num_classes}")
    use_det = use_detection_crops(run.evaluation.test_crops, run.train.sampler)
    predictions = predict_manifest(classifier, data, _boxes(args, data), use_det, run.workers)
    _write_text(args.out, classification_report(run.train.sampler, predictions, data))


def cmd_sample_map(args, run: RunConfig) -> None:
    img = read_pixmap(args.image)
    box: Optional[Rect] = _parse_box(args.box) if args.box else None
    if not args.no_resize:
        resized = resize_shorter_side(img, run.train.resize_target)
        if box is not None:
            box = scale_rect(box, resized.width / img.width, resized.height / img.height,
                             resized.width, resized.height)
        img = resized
    dist = build_crop_distribution(img.width, img.height, box, run.sampling)
    if dist.fallback_uniform:
        logger.warning("⚠️ no usable box, map shows the uniform fallback")
    write_pixmap(probability_map_image(export_probability_map(dist)), args.out)


def cmd_benchmark(args, run: RunConfig) -> None:
    data_dir = Path(args.data)
    modes = ["uniform", "multinomial"] + (["detection-crop"] if args.detection_crop else [])
    table, report = run_benchmark(open_manifest(data_dir / TRAIN_MANIFEST),
                                  open_manifest(data_dir / TEST_MANIFEST), run, modes)
    _write_text(args.out, table)
    if args.report:
        _write_text(args.report, report)


# parser

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override its values")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument("--workers", type=int, dest="workers")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="no progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocs.py", description="Object-centric crop sampling toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-gen", help="generate a synthetic saliency dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, dest="num_classes")
    p.add_argument("--train", type=int, dest="train_count")
    p.add_argument("--test", type=int, dest="test_count")
    p.set_defaults(handler=cmd_synth_gen)

    p = sub.add_parser("det-train", help="train the cascade detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int, dest="num_stages")
    p.add_argument("--weak-per-stage", type=int, dest="weak_per_stage")
    p.add_argument("--partition-measure", choices=["iou", "iogt"], dest="partition_measure")
    p.set_defaults(handler=cmd_det_train)

    p = sub.add_parser("det-run", help="write one max-response detection per image")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-relocalize", action="store_true")
    p.add_argument("--fast-path", action="store_const", const=True, dest="cascade_fast_path")
    p.set_defaults(handler=cmd_det_run)

    p = sub.add_parser("det-eval", help="AP and score-vs-size report for a detection file")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", type=float, dest="iou_threshold")
    p.add_argument("--ap-mode", choices=["11-point", "every-point"], dest="ap_mode")
    p.add_argument("--size-bins", type=int, dest="size_bins")
    p.add_argument("--size-bin-mode", choices=["quantile", "equal-width"], dest="size_bin_mode")
    p.set_defaults(handler=cmd_det_eval)

    for name, handler, help_text in (("cls-train", cmd_cls_train, "train the crop classifier"),
                                     ("cls-eval", cmd_cls_eval, "test-time ensemble accuracy")):
        p = sub.add_parser(name, help=help_text)
        if name == "cls-eval":
            p.add_argument("--model", required=True)
            p.add_argument("--test-crops", choices=["auto", "image", "image+detection"], dest="test_crops")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--detections", help="detection file; salient ground truth when omitted")
        p.add_argument("--sampler", choices=["uniform", "multinomial", "detection-crop"], dest="sampler")
        p.add_argument("--epochs", type=int, dest="epochs")
        p.add_argument("--crops-per-image", type=int, dest="crops_per_image")
        p.set_defaults(handler=handler)

    p = sub.add_parser("sample-map", help="write the crop probability map as a grayscale pixmap")
    p.add_argument("--image", required=True)
    p.add_argument("--box", help="detection as x0,y0,x1,y1 in image pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--no-resize", action="store_true", help="skip the shorter-side resize")
    p.add_argument("--crop-size", type=int, dest="crop_size")
    p.add_argument("--tau", type=int, dest="tau")
    p.set_defaults(handler=cmd_sample_map)

    p = sub.add_parser("benchmark", help="uniform vs object-centric sampling over repeated seeds")
    p.add_argument("--data", required=True, help="directory written by synth-gen")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--repeats", type=int, dest="repeats")
    p.add_argument("--boxes", choices=["ground-truth", "detector"], dest="boxes")
    p.add_argument("--test-crops", choices=["auto", "image", "image+detection"], dest="test_crops")
    p.add_argument("--detection-crop", action="store_true", help="add the detection-crop sampler row")
    p.set_defaults(handler=cmd_benchmark)

    for subparser in sub.choices.values():
        _common(subparser)
    return parser


def resolve_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides: Dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in KEY_ROUTES:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return build_run_config(file_values, overrides)


def configure_logging(level: str, quiet: bool) -> None:
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    set_progress_enabled(not quiet)


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    configure_logging(args.log_level, args.quiet)
    try:
        run = resolve_config(args)
        args.handler(args, run)
    except (OCSError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(dispatch())
