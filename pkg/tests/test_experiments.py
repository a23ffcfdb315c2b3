"""Full-size synthetic experiments; run with -m slow"""
import os

import numpy as np
import pytest

from services.evaluation import average_precision, parse_benchmark_table, score_vs_size_curve
from services.experiment import (
    aligned_detections, ground_truths, open_manifest, run_benchmark, run_detector, train_detector,
    write_synthetic_dataset,
)
from services.saliency_dataset import SceneSpec
from utils.config import ExperimentOptions, RunConfig

pytestmark = pytest.mark.slow

WORKERS = min(4, os.cpu_count() or 1)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    written = write_synthetic_dataset(tmp_path_factory.mktemp("synthetic"), SceneSpec(), 2000, 500, WORKERS)
    return open_manifest(written["train"]), open_manifest(written["test"])


@pytest.fixture(scope="module")
def detections(dataset):
    train, test = dataset
    detector = train_detector(train, RunConfig(workers=WORKERS))
    found = dict((p, d) for p, d in run_detector(detector, test, WORKERS) if d is not None)
    return aligned_detections(test, found), ground_truths(test)


class TestDetector:
    def test_average_precision_at_point_eight(self, detections):
        dets, gts = detections
        assert average_precision(dets, gts, 0.80) >= 0.90

    def test_score_grows_with_object_size(self, detections):
        dets, gts = detections
        curve = score_vs_size_curve(dets, gts, 5, "quantile")
        means = [b.mean_score for b in curve.bins]
        assert None not in means
        assert all(b >= a for a, b in zip(means, means[1:]))
        assert curve.value >= 0.8


class TestSamplingBenchmark:
    @pytest.mark.parametrize("boxes, gap", [("ground-truth", 0.05), ("detector", 0.03)])
    def test_multinomial_beats_uniform(self, dataset, boxes, gap):
        train, test = dataset
        run = RunConfig(workers=WORKERS, experiment=ExperimentOptions(boxes=boxes))
        table, _ = run_benchmark(train, test, run)
        rows = parse_benchmark_table(table)
        assert rows["Delta"]["top1"] >= gap
        assert np.isclose(rows["Delta"]["top1"], rows["Multinomial"]["top1"] - rows["Uniform"]["top1"])
