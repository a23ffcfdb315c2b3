"""
Multi-image orchestration behind the CLI: dataset generation, detector
training and runs, classifier training and evaluation, and the repeated
uniform-vs-object-centric benchmark.

Per-image stages optionally fan out over a process pool; executor.map keeps
input order so every reduction is deterministic.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from services.cascade_trainer import TrainingImage
from services.classifier_service import CropClassifierService
from services.crop_classifier import LabeledImage, topk_accuracy
from services.detector_service import RegionletDetector
from services.evaluation import ClassificationResult, benchmark_table, format_report
from services.geometry import Rect
from services.regionlet_detector import Detection
from services.saliency_dataset import (
    AnnotationRecord, DatasetManifest, SceneSpec, default_class_names, generate_indexed_scene,
)
from utils.config import RunConfig
from utils.errors import ConfigurationError
from utils.manifest_io import load_manifest, save_manifest
from utils.pixmap_io import read_pixmap, write_pixmap
from utils.progress import progress

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

TRAIN_MANIFEST = "train_manifest.txt"
TEST_MANIFEST = "test_manifest.txt"
METHOD_NAMES = {"uniform": "Uniform", "multinomial": "Multinomial", "detection-crop": "DetectionCrop"}


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1, desc: str = "") -> List[R]:
    """Ordered map, in-process for one worker, process pool otherwise"""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in progress(items, desc=desc)]
    chunksize = max(1, len(items) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(progress(executor.map(fn, items, chunksize=chunksize), total=len(items), desc=desc))


@dataclass(frozen=True)
class LoadedManifest:
    path: Path
    manifest: DatasetManifest

    @property
    def root(self) -> Path:
        return self.path.parent

    def image_path(self, record: AnnotationRecord) -> Path:
        return self.root / record.image_path


def open_manifest(path) -> LoadedManifest:
    path = Path(path)
    return LoadedManifest(path, load_manifest(path))


# dataset

def _write_scene(job: Tuple[SceneSpec, str, int, Path]) -> AnnotationRecord:
    spec, split, index, root = job
    img, record = generate_indexed_scene(spec, split, index)
    write_pixmap(img, root / record.image_path)
    return record


def write_synthetic_dataset(out_dir, spec: SceneSpec, train_count: int, test_count: int,
                            workers: int = 1) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for split, count, name in (("train", train_count, TRAIN_MANIFEST), ("test", test_count, TEST_MANIFEST)):
        jobs = [(spec, split, i, out_dir) for i in range(count)]
        records = parallel_map(_write_scene, jobs, workers, desc=f"{split} scenes")
        manifest = DatasetManifest(tuple(records), default_class_names(spec.num_classes), split)
        save_manifest(manifest, out_dir / name)
        written[split] = out_dir / name
    logger.info(f"✅ synthetic dataset written to {out_dir}: {train_count} train / {test_count} test")
    return written


# detector

def detector_training_set(data: LoadedManifest, limit: int, seed: int) -> List[TrainingImage]:
    usable = [r for r in data.manifest.records if r.salient_box is not None]
    skipped = len(data.manifest.records) - len(usable)
    if skipped:
        logger.warning(f"⚠️ {skipped} records without a salient ground truth left out of detector training")
    if len(usable) > limit:
        keep = np.sort(np.random.default_rng(seed).choice(len(usable), size=limit, replace=False))
        usable = [usable[i] for i in keep]
    return [TrainingImage(read_pixmap(data.image_path(r)), r.salient_box, r.image_path)
            for r in progress(usable, desc="load images")]


def train_detector(data: LoadedManifest, run: RunConfig) -> RegionletDetector:
    images = detector_training_set(data, run.experiment.max_detector_images, run.seed)
    if not images:
        raise ConfigurationError(f"{data.path}: no records with a salient ground truth")
    return RegionletDetector.train(images, run.detector, np.random.default_rng(run.seed))


def _detect_one(job: Tuple[RegionletDetector, Path, bool]) -> Optional[Detection]:
    detector, path, relocalize = job
    return detector.detect_best(read_pixmap(path), relocalize, str(path))


def run_detector(detector: RegionletDetector, data: LoadedManifest, workers: int = 1,
                 relocalize: bool = True) -> List[Tuple[str, Optional[Detection]]]:
    jobs = [(detector, data.image_path(r), relocalize) for r in data.manifest.records]
    found = parallel_map(_detect_one, jobs, workers, desc="detect")
    return [(r.image_path, d) for r, d in zip(data.manifest.records, found)]


def ground_truths(data: LoadedManifest) -> List[Rect]:
    missing = [r.image_path for r in data.manifest.records if r.salient_box is None]
    if missing:
        raise ConfigurationError(f"{len(missing)} records lack a salient ground truth, e.g. {missing[0]}")
    return [r.salient_box for r in data.manifest.records]


def aligned_detections(data: LoadedManifest, detections: Dict[str, Detection]) -> List[Optional[Detection]]:
    return [detections.get(r.image_path) for r in data.manifest.records]


# classifier

def boxes_from_ground_truth(data: LoadedManifest) -> Dict[str, Optional[Rect]]:
    return {r.image_path: r.salient_box for r in data.manifest.records}


def boxes_from_detections(data: LoadedManifest, detections: Dict[str, Detection]) -> Dict[str, Optional[Rect]]:
    return {r.image_path: (detections[r.image_path].rect if r.image_path in detections else None)
            for r in data.manifest.records}


def labeled_images(data: LoadedManifest, boxes: Dict[str, Optional[Rect]]) -> List[LabeledImage]:
    return [LabeledImage(read_pixmap(data.image_path(r)), r.label, boxes.get(r.image_path), r.image_path)
            for r in progress(data.manifest.records, desc="load images")]


def fit_classifier(items: Sequence[LabeledImage], num_classes: int, run: RunConfig, mode: str,
                   seed: int) -> CropClassifierService:
    train_cfg = run.train.model_copy(update={"sampler": mode, "rng_seed": seed})
    sampler_cfg = run.sampling.model_copy(update={"rng_seed": seed})
    return CropClassifierService.train(items, num_classes, train_cfg, sampler_cfg,
                                       np.random.default_rng(seed))


def use_detection_crops(test_crops: str, mode: str) -> bool:
    if test_crops == "auto":
        return mode != "uniform"
    return test_crops == "image+detection"


def _predict_one(job: Tuple[CropClassifierService, Path, Optional[Rect]]) -> np.ndarray:
    classifier, path, box = job
    return classifier.predict(read_pixmap(path), box)


def predict_manifest(classifier: CropClassifierService, data: LoadedManifest,
                     boxes: Dict[str, Optional[Rect]], use_detection: bool, workers: int = 1) -> np.ndarray:
    jobs = [(classifier, data.image_path(r), boxes.get(r.image_path) if use_detection else None)
            for r in data.manifest.records]
    return np.stack(parallel_map(_predict_one, jobs, workers, desc="predict"))


def accuracy(predictions: np.ndarray, labels: Sequence[int]) -> Tuple[float, float]:
    k5 = min(5, predictions.shape[1])
    return topk_accuracy(predictions, labels, 1), topk_accuracy(predictions, labels, k5)


def classification_report(method: str, predictions: np.ndarray, data: LoadedManifest) -> str:
    labels = [r.label for r in data.manifest.records]
    top1, top5 = accuracy(predictions, labels)
    items = [("method", method), ("images", len(labels)), ("classes", predictions.shape[1]),
             ("top1", top1), ("top5", top5)]
    for path, row in zip(data.manifest.image_paths(), predictions):
        items.append((f"pred:{path}", " ".join(repr(float(p)) for p in row)))
    return format_report(items)


# benchmark

def _summarize(method: str, runs: Iterable[Tuple[float, float]], test_set: Tuple[str, ...]) -> ClassificationResult:
    values = np.array(list(runs), dtype=np.float64)
    sd = values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(2)
    return ClassificationResult(method, float(values[:, 0].mean()), float(values[:, 1].mean()), test_set,
                                float(sd[0]), float(sd[1]), int(values.shape[0]))


def run_benchmark(train: LoadedManifest, test: LoadedManifest, run: RunConfig,
                  modes: Sequence[str] = ("uniform", "multinomial")) -> Tuple[str, str]:
    """(benchmark table, per-run key-value report)"""
    if train.manifest.num_classes != test.manifest.num_classes:
        raise ConfigurationError("train and test manifests disagree on the class count")
    if set(train.manifest.image_paths()) & set(test.manifest.image_paths()):
        raise ConfigurationError("train and test manifests share images")

    if run.experiment.boxes == "detector":
        logger.info("🔄 training the detector for benchmark boxes")
        detector = train_detector(train, run)
        train_boxes = boxes_from_detections(train, {p: d for p, d in run_detector(detector, train, run.workers) if d})
        test_boxes = boxes_from_detections(test, {p: d for p, d in run_detector(detector, test, run.workers) if d})
    else:
        train_boxes, test_boxes = boxes_from_ground_truth(train), boxes_from_ground_truth(test)

    items = labeled_images(train, train_boxes)
    labels = [r.label for r in test.manifest.records]
    per_mode: Dict[str, List[Tuple[float, float]]] = {m: [] for m in modes}
    report_items = [("boxes", run.experiment.boxes), ("repeats", run.experiment.repeats),
                    ("train_images", len(items)), ("test_images", len(labels))]

    for repeat in range(run.experiment.repeats):
        seed = run.seed + repeat
        for mode in modes:
            classifier = fit_classifier(items, train.manifest.num_classes, run, mode, seed)
            use_det = use_detection_crops(run.evaluation.test_crops, mode)
            predictions = predict_manifest(classifier, test, test_boxes, use_det, run.workers)
            top1, top5 = accuracy(predictions, labels)
            per_mode[mode].append((top1, top5))
            report_items.append((f"run{repeat}:{mode}:seed", seed))
            report_items.append((f"run{repeat}:{mode}:top1", top1))
            report_items.append((f"run{repeat}:{mode}:top5", top5))
            logger.info(f"📊 repeat {repeat + 1}/{run.experiment.repeats} {mode}: top1 {top1:.4f} top5 {top5:.4f}")

    test_set = test.manifest.image_paths()
    results = {m: _summarize(METHOD_NAMES[m], per_mode[m], test_set) for m in modes}
    extra = [results[m] for m in modes if m not in ("uniform", "multinomial")]
    table = benchmark_table(results["uniform"], results["multinomial"], extra)
    return table, format_report(report_items)
