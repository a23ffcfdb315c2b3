"""
Line-delimited text formats for dataset manifests and detection files

Manifest:   OCSMANIFEST v1 <split> <num_classes>
            [#class<TAB><id><TAB><name>]...
            <image-path><TAB><label><TAB><salient_idx><TAB><n_objects>{<TAB>x0,y0,x1,y1,label,occ,trunc}
Detections: OCSDET v1
            <image-path><TAB><x0> <y0> <x1> <y1><TAB><score>
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

from services.geometry import Rect
from services.regionlet_detector import Detection
from services.saliency_dataset import (
    SPLITS, AnnotationRecord, DatasetManifest, ObjectAnnotation, default_class_names,
)
from utils.errors import GeometryError, ManifestFormatError, PixmapFormatError
from utils.pixmap_io import read_pixmap_size

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "OCSMANIFEST"
DETECTION_MAGIC = "OCSDET"
VERSION = "v1"
_CLASS_PREFIX = "#class"


def _flag(text: str, line_number: int) -> bool:
    if text not in ("0", "1"):
        raise ManifestFormatError(f"flag must be 0 or 1, got {text!r}", line_number)
    return text == "1"


def _int(text: str, what: str, line_number: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ManifestFormatError(f"{what} is not an integer: {text!r}", line_number) from None


def _check_field(text: str, what: str, line_number: Optional[int] = None) -> str:
    if not text or any(c in text for c in "\t\n\r"):
        raise ManifestFormatError(f"{what} must be non-empty and free of tabs/newlines: {text!r}",
                                  line_number)
    return text


def format_object(obj: ObjectAnnotation) -> str:
    return ",".join(str(v) for v in (*obj.box.as_tuple(), obj.label,
                                     int(obj.occluded), int(obj.truncated)))


def parse_object(text: str, line_number: int) -> ObjectAnnotation:
    parts = text.split(",")
    if len(parts) != 7:
        raise ManifestFormatError(f"object needs 7 comma-separated fields, got {len(parts)}", line_number)
    x0, y0, x1, y1, label = (_int(p, "object field", line_number) for p in parts[:5])
    try:
        box = Rect(x0, y0, x1, y1)
    except GeometryError as e:
        raise ManifestFormatError(str(e), line_number) from e
    return ObjectAnnotation(box, label, _flag(parts[5], line_number), _flag(parts[6], line_number))


def format_record(record: AnnotationRecord) -> str:
    salient = -1 if record.salient_index is None else record.salient_index
    fields = [_check_field(record.image_path, "image path"), str(record.label), str(salient),
              str(len(record.objects))]
    fields.extend(format_object(o) for o in record.objects)
    return "\t".join(fields)


def format_manifest(manifest: DatasetManifest) -> str:
    lines = [f"{MANIFEST_MAGIC} {VERSION} {manifest.split} {manifest.num_classes}"]
    defaults = default_class_names(manifest.num_classes)
    if manifest.class_names != defaults:
        for k, name in enumerate(manifest.class_names):
            lines.append(f"{_CLASS_PREFIX}\t{k}\t{_check_field(name, 'class name')}")
    lines.extend(format_record(r) for r in manifest.records)
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(manifest), encoding="utf-8", newline="\n")
    logger.info(f"💾 wrote {manifest.split} manifest with {len(manifest.records)} records to {path}")


def _parse_header(line: str) -> Tuple[str, int]:
    parts = line.split(" ")
    if len(parts) != 4 or parts[0] != MANIFEST_MAGIC:
        raise ManifestFormatError(f"expected '{MANIFEST_MAGIC} {VERSION} <split> <classes>'", 1)
    if parts[1] != VERSION:
        raise ManifestFormatError(f"unsupported manifest version {parts[1]!r}", 1)
    if parts[2] not in SPLITS:
        raise ManifestFormatError(f"unknown split {parts[2]!r}", 1)
    num_classes = _int(parts[3], "class count", 1)
    if num_classes < 1:
        raise ManifestFormatError("class count must be >= 1", 1)
    return parts[2], num_classes


def parse_manifest(text: str, image_root: Optional[Path] = None) -> DatasetManifest:
    """Parse manifest text; with image_root, boxes are checked against each pixmap's size"""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestFormatError("empty manifest, header missing", 1)
    split, num_classes = _parse_header(lines[0])
    names = list(default_class_names(num_classes))
    seen_names = set()
    records: List[AnnotationRecord] = []
    seen_paths = set()

    for line_number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if fields[0] == _CLASS_PREFIX:
            if records or len(fields) != 3:
                raise ManifestFormatError("class-name lines must follow the header and have 3 fields",
                                          line_number)
            k = _int(fields[1], "class id", line_number)
            if not 0 <= k < num_classes or k in seen_names:
                raise ManifestFormatError(f"bad or repeated class id {k}", line_number)
            seen_names.add(k)
            names[k] = _check_field(fields[2], "class name", line_number)
            continue
        if len(fields) < 4:
            raise ManifestFormatError(f"record needs at least 4 fields, got {len(fields)}", line_number)
        path = _check_field(fields[0], "image path", line_number)
        label = _int(fields[1], "label", line_number)
        salient = _int(fields[2], "salient index", line_number)
        count = _int(fields[3], "object count", line_number)
        if count < 0 or len(fields) != 4 + count:
            raise ManifestFormatError(f"declared {count} objects but line has {len(fields) - 4}",
                                      line_number)
        if salient < -1:
            raise ManifestFormatError(f"salient index {salient} below -1", line_number)
        if path in seen_paths:
            raise ManifestFormatError(f"duplicate image path {path!r}", line_number)
        seen_paths.add(path)
        if not 0 <= label < num_classes:
            raise ManifestFormatError(f"label {label} outside {num_classes} classes", line_number)
        objects = tuple(parse_object(f, line_number) for f in fields[4:])
        if any(not 0 <= o.label < num_classes for o in objects):
            raise ManifestFormatError(f"object label outside {num_classes} classes", line_number)

        size = None
        if image_root is not None:
            try:
                size = read_pixmap_size(image_root / path)
            except (OSError, PixmapFormatError) as e:
                raise ManifestFormatError(f"cannot read image header for {path!r}: {e}",
                                          line_number) from e
        try:
            records.append(AnnotationRecord(path, label, objects,
                                            None if salient == -1 else salient, size))
        except GeometryError as e:
            raise ManifestFormatError(str(e), line_number) from e

    try:
        return DatasetManifest(tuple(records), tuple(names), split)
    except GeometryError as e:
        raise ManifestFormatError(str(e)) from e


def load_manifest(path: Union[str, Path], check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ManifestFormatError(f"{path}: not UTF-8 text") from e
    manifest = parse_manifest(text, path.parent if check_images else None)
    logger.info(f"📂 loaded {manifest.split} manifest {path}: {len(manifest.records)} records, "
                f"{manifest.num_classes} classes")
    return manifest


def format_detections(detections: Iterable[Tuple[str, Detection]]) -> str:
    lines = [f"{DETECTION_MAGIC} {VERSION}"]
    for image_path, det in detections:
        coords = " ".join(str(v) for v in det.rect.as_tuple())
        lines.append(f"{_check_field(image_path, 'image path')}\t{coords}\t{det.score!r}")
    return "\n".join(lines) + "\n"


def save_detections(detections: Iterable[Tuple[str, Detection]], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_detections(detections), encoding="utf-8", newline="\n")
    logger.info(f"💾 wrote detections to {path}")


def parse_detections(text: str) -> Dict[str, Detection]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != f"{DETECTION_MAGIC} {VERSION}":
        raise ManifestFormatError(f"expected '{DETECTION_MAGIC} {VERSION}' header", 1)
    result: Dict[str, Detection] = {}
    for line_number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestFormatError(f"detection line needs 3 fields, got {len(fields)}", line_number)
        path = _check_field(fields[0], "image path", line_number)
        coords = fields[1].split(" ")
        if len(coords) != 4:
            raise ManifestFormatError("box needs 4 space-separated integers", line_number)
        try:
            rect = Rect(*(_int(c, "box coordinate", line_number) for c in coords))
        except GeometryError as e:
            raise ManifestFormatError(str(e), line_number) from e
        try:
            score = float(fields[2])
        except ValueError:
            raise ManifestFormatError(f"score is not a number: {fields[2]!r}", line_number) from None
        if path in result:
            raise ManifestFormatError(f"duplicate detection for {path!r}", line_number)
        result[path] = Detection(rect, score)
    return result


def load_detections(path: Union[str, Path]) -> Dict[str, Detection]:
    return parse_detections(Path(path).read_text(encoding="utf-8"))
