import pytest

from conftest import random_image
from ocs import dispatch
from utils.manifest_io import load_detections, load_manifest
from utils.model_io import load_cascade, load_classifier
from utils.pixmap_io import read_pixmap, write_pixmap

TINY = ["--quiet", "--set", "image_width_range=64,80", "--set", "image_height_range=64,80"]
SMALL_CROPS = ["--set", "crop_size=48", "--set", "resize_target=64"]


def _synth(out, *extra):
    return dispatch(["synth-gen", "--out", str(out), "--classes", "2", "--train", "6", "--test", "4",
                     "--seed", "5", *TINY, *extra])


class TestUsage:
    def test_no_command(self):
        assert dispatch([]) == 2

    def test_unknown_command(self):
        assert dispatch(["frobnicate"]) == 2

    def test_missing_required_flag(self):
        assert dispatch(["synth-gen"]) == 2

    def test_help(self):
        assert dispatch(["--help"]) == 0

    def test_unknown_config_key(self, tmp_path):
        assert dispatch(["synth-gen", "--out", str(tmp_path), "--set", "nonsense=1"]) == 1

    def test_missing_manifest(self, tmp_path):
        assert dispatch(["det-eval", "--detections", str(tmp_path / "d.txt"),
                         "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "r.txt")]) == 1


class TestSynthGen:
    def test_layout(self, tmp_path):
        assert _synth(tmp_path) == 0
        train = load_manifest(tmp_path / "train_manifest.txt")
        test = load_manifest(tmp_path / "test_manifest.txt")
        assert len(train.records) == 6 and len(test.records) == 4
        assert not set(train.image_paths()) & set(test.image_paths())
        assert all(r.salient_index is not None for r in train.records)

    def test_same_seed_same_bytes(self, tmp_path):
        assert _synth(tmp_path / "a") == 0
        assert _synth(tmp_path / "b") == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_parallel_matches_serial(self, tmp_path):
        assert _synth(tmp_path / "serial") == 0
        assert _synth(tmp_path / "pool", "--workers", "2") == 0
        for name in ("train_manifest.txt", "images/train_00003.ppm"):
            assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()


class TestSampleMap:
    def test_map_size_and_peak(self, rng, tmp_path):
        write_pixmap(random_image(rng, 341, 256), tmp_path / "img.ppm")
        out = tmp_path / "map.pgm"
        code = dispatch(["sample-map", "--image", str(tmp_path / "img.ppm"), "--box", "100,40,260,200",
                         "--out", str(out), "--quiet"])
        assert code == 0
        prob_map = read_pixmap(out)
        assert prob_map.size == (118, 33)
        assert prob_map.channels == 1
        assert int(prob_map.pixels.max()) == 255

    def test_bad_box(self, rng, tmp_path):
        write_pixmap(random_image(rng, 300, 256), tmp_path / "img.ppm")
        code = dispatch(["sample-map", "--image", str(tmp_path / "img.ppm"), "--box", "5,5,2,9",
                         "--out", str(tmp_path / "map.pgm"), "--quiet"])
        assert code == 1

    def test_rerun_same_bytes(self, rng, tmp_path):
        write_pixmap(random_image(rng, 300, 256), tmp_path / "img.ppm")
        for name in ("a.pgm", "b.pgm"):
            assert dispatch(["sample-map", "--image", str(tmp_path / "img.ppm"), "--box", "60,40,220,200",
                             "--out", str(tmp_path / name), "--quiet"]) == 0
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


@pytest.mark.slow
class TestPipeline:
    def test_end_to_end(self, tmp_path):
        data = tmp_path / "data"
        assert _synth(data) == 0
        train, test = str(data / "train_manifest.txt"), str(data / "test_manifest.txt")
        detector = ["--stages", "2", "--weak-per-stage", "3", "--set", "candidates_per_round=10",
                    "--set", "negatives_per_stage=100", "--quiet"]

        assert dispatch(["det-train", "--manifest", train, "--out", str(tmp_path / "cascade.txt"),
                         *detector]) == 0
        assert len(load_cascade(tmp_path / "cascade.txt").stages) == 2

        assert dispatch(["det-run", "--model", str(tmp_path / "cascade.txt"), "--manifest", test,
                         "--out", str(tmp_path / "dets.txt"), "--quiet"]) == 0
        assert len(load_detections(tmp_path / "dets.txt")) == 4

        assert dispatch(["det-eval", "--detections", str(tmp_path / "dets.txt"), "--manifest", test,
                         "--out", str(tmp_path / "det_report.txt"), "--quiet"]) == 0
        assert "ap@0.8\t" in (tmp_path / "det_report.txt").read_text()

        assert dispatch(["cls-train", "--manifest", train, "--out", str(tmp_path / "cls.txt"),
                         "--epochs", "2", *SMALL_CROPS, "--quiet"]) == 0
        assert load_classifier(tmp_path / "cls.txt").num_classes == 2

        assert dispatch(["cls-eval", "--model", str(tmp_path / "cls.txt"), "--manifest", test,
                         "--detections", str(tmp_path / "dets.txt"), "--out", str(tmp_path / "cls_report.txt"),
                         *SMALL_CROPS, "--quiet"]) == 0
        assert "top1\t" in (tmp_path / "cls_report.txt").read_text()

    def test_benchmark_is_reproducible(self, tmp_path):
        data = tmp_path / "data"
        assert _synth(data) == 0
        args = ["benchmark", "--data", str(data), "--repeats", "2", "--set", "epochs=2", *SMALL_CROPS,
                "--seed", "3", "--quiet"]
        assert dispatch([*args, "--out", str(tmp_path / "a.tsv"), "--report", str(tmp_path / "a.txt")]) == 0
        assert dispatch([*args, "--out", str(tmp_path / "b.tsv")]) == 0
        table = (tmp_path / "a.tsv").read_text()
        assert table == (tmp_path / "b.tsv").read_text()
        assert "\nDelta\t" in table
        assert "run1:multinomial:top1" in (tmp_path / "a.txt").read_text()


@pytest.mark.slow
class TestReruns:
    def test_every_stage_writes_identical_bytes(self, tmp_path):
        data = tmp_path / "data"
        assert _synth(data) == 0
        train, test = str(data / "train_manifest.txt"), str(data / "test_manifest.txt")
        detector = ["--stages", "2", "--weak-per-stage", "3", "--set", "candidates_per_round=10",
                    "--set", "negatives_per_stage=100", "--seed", "7", "--quiet"]
        for run in ("a", "b"):
            out = tmp_path / run
            out.mkdir()
            assert dispatch(["det-train", "--manifest", train, "--out", str(out / "cascade.txt"),
                             *detector]) == 0
            assert dispatch(["det-run", "--model", str(out / "cascade.txt"), "--manifest", test,
                             "--out", str(out / "dets.txt"), "--quiet"]) == 0
            assert dispatch(["det-eval", "--detections", str(out / "dets.txt"), "--manifest", test,
                             "--out", str(out / "det_report.txt"), "--quiet"]) == 0
            assert dispatch(["cls-train", "--manifest", train, "--out", str(out / "cls.txt"),
                             "--epochs", "2", "--seed", "7", *SMALL_CROPS, "--quiet"]) == 0
            assert dispatch(["cls-eval", "--model", str(out / "cls.txt"), "--manifest", test,
                             "--detections", str(out / "dets.txt"), "--out", str(out / "cls_report.txt"),
                             *SMALL_CROPS, "--quiet"]) == 0
        for name in ("cascade.txt", "dets.txt", "det_report.txt", "cls.txt", "cls_report.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
