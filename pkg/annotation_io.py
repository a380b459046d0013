"""
Parsers and writers for fashion annotation files.

Line-oriented DeepFashion-style lists (attributes, landmarks, retrieval
splits), COCO-style instance JSON and Polyvore-style outfit directories.
Every parser raises AnnotationError with a file/line location on malformed
input and ValidationError when well-formed data breaks a dataset invariant.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import mask_ops
from fashion_errors import AnnotationError, ConfigError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SOURCES = ("shop", "consumer")
ROLES = ("train", "query", "gallery")
POLYVORE_SPLITS = ("Polyvore", "Polyvore-D")


@dataclass(frozen=True)
class AttributeRecord:
    image_id: str
    image_path: str
    labels: Tuple[bool, ...]


class Landmark(NamedTuple):
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class LandmarkRecord:
    image_id: str
    image_path: str
    image_size: Tuple[int, int]
    landmarks: Tuple[Landmark, ...]


@dataclass(frozen=True)
class RetrievalRecord:
    image_id: str
    image_path: str
    item_id: str
    source: str
    role: str


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class InstanceRecord:
    ann_id: int
    image_id: int
    category_id: int
    bbox: Tuple[float, float, float, float]
    segmentation: Any
    area: float
    iscrowd: bool

    def mask(self, height: int, width: int) -> np.ndarray:
        return mask_ops.segmentation_to_mask(self.segmentation, height, width)


class OutfitItem(NamedTuple):
    item_id: str
    type_label: str


@dataclass(frozen=True)
class Outfit:
    set_id: str
    items: Tuple[OutfitItem, ...]


@dataclass(frozen=True)
class FITBQuestion:
    context: Tuple[str, ...]
    candidates: Tuple[str, ...]
    answer_index: int


@dataclass(frozen=True)
class CompatQuestion:
    items: Tuple[str, ...]
    label: bool


# ---------------------------------------------------------------------------
# line-oriented helpers

def _read_lines(path: PathLike) -> List[str]:
    path = Path(path)
    if not path.is_file():
        raise AnnotationError("annotation file not found", source=str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _parse_count(lines: List[str], source: str) -> int:
    if not lines:
        raise AnnotationError("empty file, expected an image count header", source=source, line=1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise AnnotationError(f"expected image count, got '{lines[0].strip()}'", source=source, line=1) from None
    if count < 0:
        raise AnnotationError(f"negative image count {count}", source=source, line=1)
    return count


def _check_body_count(body: List[str], count: int, source: str) -> None:
    if len(body) != count:
        raise AnnotationError(f"header declares {count} images but body has {len(body)} lines", source=source, line=1)


def _resolve(image_root: Optional[Path], image_id: str) -> str:
    return str(image_root / image_id) if image_root is not None else image_id


def _warn_missing(paths: Iterable[str], source: str) -> None:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        logger.warning("%s: %d image path(s) not found, e.g. %s", source, len(missing), missing[0])


def _fmt(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _default_root(path: PathLike, image_root: Optional[PathLike]) -> Path:
    return Path(image_root) if image_root is not None else Path(path).parent


# ---------------------------------------------------------------------------
# attributes

def load_attribute_file(path: PathLike, image_root: Optional[PathLike] = None) -> Tuple[List[str], List[AttributeRecord]]:
    """Parse an attribute list file; returns (attribute names, records)"""
    source = str(path)
    lines = _read_lines(path)
    count = _parse_count(lines, source)
    if len(lines) < 2:
        raise AnnotationError("missing attribute name header", source=source, line=2)
    names = lines[1].split()
    if len(set(names)) != len(names):
        raise AnnotationError("duplicate attribute names", source=source, line=2)
    root = _default_root(path, image_root)
    body = lines[2:]
    _check_body_count(body, count, source)
    records = []
    for offset, line in enumerate(body):
        lineno = offset + 3
        tokens = line.split()
        if not tokens:
            raise AnnotationError("blank record line", source=source, line=lineno)
        image_id, labels = tokens[0], tokens[1:]
        if len(labels) != len(names):
            raise AnnotationError(f"expected {len(names)} labels, got {len(labels)}", source=source, line=lineno)
        values = []
        for token in labels:
            if token == "1":
                values.append(True)
            elif token in ("0", "-1"):
                values.append(False)
            else:
                raise AnnotationError(f"invalid attribute label '{token}'", source=source, line=lineno)
        records.append(AttributeRecord(image_id, _resolve(root, image_id), tuple(values)))
    _warn_missing((r.image_path for r in records), source)
    return names, records


def parse_attribute_file(path: PathLike, image_root: Optional[PathLike] = None) -> List[AttributeRecord]:
    return load_attribute_file(path, image_root)[1]


def write_attribute_file(path: PathLike, names: Sequence[str], records: Sequence[AttributeRecord]) -> None:
    lines = [str(len(records)), " ".join(names)]
    for record in records:
        if len(record.labels) != len(names):
            raise ValueError(f"{record.image_id}: {len(record.labels)} labels for {len(names)} attributes")
        lines.append(" ".join([record.image_id] + ["1" if v else "0" for v in record.labels]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# landmarks

def load_landmark_file(path: PathLike, image_root: Optional[PathLike] = None) -> Tuple[int, List[LandmarkRecord]]:
    """Parse a landmark list file; returns (landmark count L, records)"""
    source = str(path)
    lines = _read_lines(path)
    count = _parse_count(lines, source)
    if len(lines) < 2:
        raise AnnotationError("missing 'L w h' header", source=source, line=2)
    header = lines[1].split()
    try:
        num_landmarks, width, height = (int(v) for v in header)
    except ValueError:
        raise AnnotationError(f"expected 'L w h', got '{lines[1].strip()}'", source=source, line=2) from None
    if num_landmarks < 1 or width <= 0 or height <= 0:
        raise AnnotationError("L, w and h must be positive", source=source, line=2)
    root = _default_root(path, image_root)
    body = lines[2:]
    _check_body_count(body, count, source)
    records = []
    for offset, line in enumerate(body):
        lineno = offset + 3
        tokens = line.split()
        if not tokens:
            raise AnnotationError("blank record line", source=source, line=lineno)
        image_id, values = tokens[0], tokens[1:]
        if len(values) != 3 * num_landmarks:
            raise AnnotationError(
                f"expected {num_landmarks} (vis x y) triples, got {len(values)} values", source=source, line=lineno)
        landmarks = []
        for index in range(num_landmarks):
            code_token, x_token, y_token = values[3 * index:3 * index + 3]
            try:
                code, x, y = int(code_token), float(x_token), float(y_token)
            except ValueError:
                raise AnnotationError(f"landmark {index}: malformed triple", source=source, line=lineno) from None
            if code not in (0, 1, 2):
                raise AnnotationError(f"landmark {index}: unknown visibility code {code}", source=source, line=lineno)
            visible = code == 0
            if visible and not (0 <= x < width and 0 <= y < height):
                raise AnnotationError(
                    f"landmark {index}: visible point ({_fmt(x)}, {_fmt(y)}) outside {width}x{height} image",
                    source=source, line=lineno)
            landmarks.append(Landmark(x, y, visible))
        records.append(LandmarkRecord(image_id, _resolve(root, image_id), (width, height), tuple(landmarks)))
    _warn_missing((r.image_path for r in records), source)
    return num_landmarks, records


def parse_landmark_file(path: PathLike, image_root: Optional[PathLike] = None) -> List[LandmarkRecord]:
    return load_landmark_file(path, image_root)[1]


def write_landmark_file(path: PathLike, records: Sequence[LandmarkRecord],
                        num_landmarks: Optional[int] = None,
                        image_size: Optional[Tuple[int, int]] = None) -> None:
    if records:
        num_landmarks = num_landmarks or len(records[0].landmarks)
        image_size = image_size or records[0].image_size
    if num_landmarks is None or image_size is None:
        raise ValueError("num_landmarks and image_size are required for an empty landmark file")
    width, height = image_size
    lines = [str(len(records)), f"{num_landmarks} {width} {height}"]
    for record in records:
        if len(record.landmarks) != num_landmarks or tuple(record.image_size) != (width, height):
            raise ValueError(f"{record.image_id}: landmark count or image size differs from the file header")
        fields = [record.image_id]
        for landmark in record.landmarks:
            fields += ["0" if landmark.visible else "1", _fmt(landmark.x), _fmt(landmark.y)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# retrieval splits

def validate_retrieval_split(records: Sequence[RetrievalRecord], source: str = "retrieval split") -> None:
    """Every query item needs at least one gallery image"""
    gallery_items = {r.item_id for r in records if r.role == "gallery"}
    orphans = sorted({r.item_id for r in records if r.role == "query"} - gallery_items)
    if orphans:
        raise ValidationError(f"{source}: query items without a gallery image: {', '.join(orphans)}")


def parse_retrieval_split(path: PathLike, image_root: Optional[PathLike] = None) -> List[RetrievalRecord]:
    source = str(path)
    path = Path(path)
    if not path.is_file():
        raise AnnotationError("annotation file not found", source=source)
    root = _default_root(path, image_root)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 4:
            raise AnnotationError(f"expected 'image item source role', got {len(tokens)} fields", source=source, line=lineno)
        image_id, item_id, item_source, role = tokens
        if item_source not in SOURCES:
            raise AnnotationError(f"unknown source '{item_source}'", source=source, line=lineno)
        if role not in ROLES:
            raise AnnotationError(f"unknown role '{role}'", source=source, line=lineno)
        records.append(RetrievalRecord(image_id, _resolve(root, image_id), item_id, item_source, role))
    validate_retrieval_split(records, source)
    _warn_missing((r.image_path for r in records), source)
    return records


def write_retrieval_split(path: PathLike, records: Sequence[RetrievalRecord]) -> None:
    lines = [f"{r.image_id} {r.item_id} {r.source} {r.role}" for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# COCO-style instances

def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise AnnotationError("file not found", source=str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise AnnotationError(f"invalid JSON: {e.msg} (column {e.colno})", source=str(path), line=e.lineno) from None


def write_json(path: PathLike, document: Any) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _field(entry: Dict[str, Any], key: str, where: str, source: str) -> Any:
    if not isinstance(entry, dict) or key not in entry:
        raise AnnotationError(f"{where}: missing field '{key}'", source=source)
    return entry[key]


def _number(value: Any, key: str, where: str, source: str, kind=int):
    if isinstance(value, (dict, list)):
        raise AnnotationError(f"{where}: '{key}' must be a number, got {value!r}", source=source)
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise AnnotationError(f"{where}: '{key}' must be a number, got {value!r}", source=source) from None


def _check_segmentation(segmentation: Any, where: str, source: str) -> Any:
    if isinstance(segmentation, dict):
        counts = segmentation.get("counts")
        size = segmentation.get("size")
        if not isinstance(counts, (list, str)) or not isinstance(size, list) or len(size) != 2:
            raise AnnotationError(f"{where}: RLE needs 'size' [h, w] and 'counts' as a list or a compressed string",
                                  source=source)
        size = [_number(v, "size", where, source) for v in size]
        if isinstance(counts, list):
            counts = [_number(v, "counts", where, source) for v in counts]
            try:
                mask_ops.to_coco_rle({"size": size, "counts": counts})
            except ValueError as e:
                raise AnnotationError(f"{where}: {e}", source=source) from None
        return {"size": size, "counts": counts}
    if not isinstance(segmentation, list) or not segmentation:
        raise AnnotationError(f"{where}: segmentation must be a polygon list or an RLE mapping", source=source)
    rings = []
    for ring in segmentation:
        if not isinstance(ring, list) or len(ring) < 6 or len(ring) % 2:
            raise AnnotationError(f"{where}: polygon rings need an even number (>= 6) of coordinates", source=source)
        rings.append(tuple(_number(v, "segmentation", where, source, float) for v in ring))
    return tuple(rings)


def parse_instances_json(path: PathLike) -> Tuple[Dict[int, ImageInfo], Dict[int, str], List[InstanceRecord]]:
    """Parse a COCO instances document into (images, categories, instances)"""
    source = str(path)
    document = read_json(path)
    if not isinstance(document, dict):
        raise AnnotationError("document root must be an object", source=source)
    images: Dict[int, ImageInfo] = {}
    for index, entry in enumerate(_field(document, "images", "document", source)):
        where = f"images[{index}]"
        info = ImageInfo(_number(_field(entry, "id", where, source), "id", where, source),
                         str(_field(entry, "file_name", where, source)),
                         _number(_field(entry, "width", where, source), "width", where, source),
                         _number(_field(entry, "height", where, source), "height", where, source))
        if info.image_id in images:
            raise AnnotationError(f"{where}: duplicate image id {info.image_id}", source=source)
        images[info.image_id] = info
    categories: Dict[int, str] = {}
    for index, entry in enumerate(_field(document, "categories", "document", source)):
        where = f"categories[{index}]"
        category_id = _number(_field(entry, "id", where, source), "id", where, source)
        if category_id in categories:
            raise AnnotationError(f"{where}: duplicate category id {category_id}", source=source)
        categories[category_id] = str(entry.get("name", category_id))
    instances = []
    for index, entry in enumerate(_field(document, "annotations", "document", source)):
        where = f"annotations[{index}]"
        if isinstance(entry, dict) and "id" in entry:
            where += f" (id {entry['id']!r})"
        image_id = _number(_field(entry, "image_id", where, source), "image_id", where, source)
        category_id = _number(_field(entry, "category_id", where, source), "category_id", where, source)
        if image_id not in images:
            raise AnnotationError(f"{where}: unknown image_id {image_id}", source=source)
        if category_id not in categories:
            raise AnnotationError(f"{where}: unknown category_id {category_id}", source=source)
        bbox = _field(entry, "bbox", where, source)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise AnnotationError(f"{where}: bbox must be [x, y, width, height]", source=source)
        bbox = tuple(_number(v, "bbox", where, source, float) for v in bbox)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise AnnotationError(f"{where}: bbox width and height must be positive", source=source)
        info = images[image_id]
        segmentation = _check_segmentation(_field(entry, "segmentation", where, source), where, source)
        if isinstance(segmentation, dict) and segmentation["size"] != [info.height, info.width]:
            raise AnnotationError(f"{where}: RLE size {segmentation['size']} does not match image size "
                                  f"[{info.height}, {info.width}]", source=source)
        if "area" in entry:
            area = _number(entry["area"], "area", where, source, float)
        else:
            try:
                area = mask_ops.segmentation_area(segmentation, info.height, info.width)
            except (ValueError, TypeError) as e:
                raise AnnotationError(f"{where}: {e}", source=source) from None
        if area <= 0:
            raise AnnotationError(f"{where}: area must be positive", source=source)
        ann_id = _number(entry.get("id", index + 1), "id", where, source)
        instances.append(InstanceRecord(ann_id, image_id, category_id, bbox, segmentation, area,
                                        bool(_number(entry.get("iscrowd", 0), "iscrowd", where, source))))
    return images, categories, instances


def _segmentation_json(segmentation: Any) -> Any:
    if isinstance(segmentation, dict):
        counts = segmentation["counts"]
        return {"size": list(segmentation["size"]), "counts": counts if isinstance(counts, str) else list(counts)}
    return [list(ring) for ring in segmentation]


def write_instances_json(path: PathLike, images: Dict[int, ImageInfo], categories: Dict[int, str],
                         instances: Sequence[InstanceRecord]) -> None:
    document = {
        "images": [{"id": i.image_id, "file_name": i.file_name, "width": i.width, "height": i.height}
                   for i in images.values()],
        "categories": [{"id": cid, "name": name} for cid, name in categories.items()],
        "annotations": [{"id": r.ann_id, "image_id": r.image_id, "category_id": r.category_id,
                         "bbox": list(r.bbox), "segmentation": _segmentation_json(r.segmentation),
                         "area": r.area, "iscrowd": int(r.iscrowd)} for r in instances],
    }
    write_json(path, document)


# ---------------------------------------------------------------------------
# Polyvore outfits

@dataclass
class PolyvoreData:
    """Parsed Polyvore directory plus its item catalog"""
    root: Path
    split: str
    outfits: List[Outfit]
    fitb: List[FITBQuestion]
    compat: List[CompatQuestion]
    catalog: Dict[str, str]

    def image_path(self, item_id: str) -> Path:
        return self.root / "images" / f"{item_id}.png"


def _catalog_add(catalog: Dict[str, str], item_id: str, type_label: str, source: str) -> None:
    known = catalog.setdefault(item_id, type_label)
    if known != type_label:
        raise ValidationError(f"{source}: item '{item_id}' has types '{known}' and '{type_label}'")


def _id_list(value: Any, where: str, source: str) -> Tuple[str, ...]:
    if not isinstance(value, list):
        raise AnnotationError(f"{where}: expected a list of item ids", source=source)
    return tuple(str(v) for v in value)


def load_polyvore(directory: PathLike, split: Optional[str] = None) -> PolyvoreData:
    root = Path(directory)
    outfits_path = root / "outfits.json"
    document = read_json(outfits_path)
    source = str(outfits_path)
    declared = "Polyvore"
    if isinstance(document, dict):
        declared = document.get("split", declared)
        document = _field(document, "outfits", "document", source)
    if split is not None and split not in POLYVORE_SPLITS:
        raise ConfigError(f"unknown Polyvore split '{split}', expected one of {', '.join(POLYVORE_SPLITS)}")
    if declared not in POLYVORE_SPLITS:
        raise AnnotationError(f"unknown split '{declared}'", source=source)
    split = split or declared
    if not isinstance(document, list):
        raise AnnotationError("outfits must be a list", source=source)

    catalog: Dict[str, str] = {}
    items_path = root / "items.json"
    if items_path.is_file():
        for index, entry in enumerate(read_json(items_path)):
            where = f"items[{index}]"
            _catalog_add(catalog, str(_field(entry, "item_id", where, str(items_path))),
                         str(_field(entry, "type", where, str(items_path))), str(items_path))

    outfits = []
    owners: Dict[str, List[str]] = {}
    for index, entry in enumerate(document):
        where = f"outfits[{index}]"
        set_id = str(_field(entry, "set_id", where, source))
        raw_items = _field(entry, "items", where, source)
        if not isinstance(raw_items, list) or len(raw_items) < 2:
            raise AnnotationError(f"{where}: an outfit needs at least 2 items", source=source)
        items = []
        for item in raw_items:
            outfit_item = OutfitItem(str(_field(item, "item_id", where, source)), str(_field(item, "type", where, source)))
            _catalog_add(catalog, outfit_item.item_id, outfit_item.type_label, source)
            items.append(outfit_item)
        if len({i.item_id for i in items}) != len(items):
            raise AnnotationError(f"{where}: repeated item in outfit '{set_id}'", source=source)
        for item in items:
            owners.setdefault(item.item_id, []).append(set_id)
        outfits.append(Outfit(set_id, tuple(items)))
    if len({o.set_id for o in outfits}) != len(outfits):
        raise AnnotationError("duplicate set_id", source=source)
    if split == "Polyvore-D":
        shared = sorted(item for item, sets in owners.items() if len(sets) > 1)
        if shared:
            raise ValidationError(f"{source}: Polyvore-D split has items in more than one set: {', '.join(shared)}")

    fitb_path = root / "fitb.json"
    fitb = []
    for index, entry in enumerate(read_json(fitb_path)):
        where = f"question {index}"
        context = _id_list(_field(entry, "context", where, str(fitb_path)), where, str(fitb_path))
        candidates = _id_list(_field(entry, "candidates", where, str(fitb_path)), where, str(fitb_path))
        answer = _field(entry, "answer_index", where, str(fitb_path))
        if not context:
            raise AnnotationError(f"{where}: empty context", source=str(fitb_path))
        if len(candidates) != 4 or len(set(candidates)) != 4:
            raise AnnotationError(f"{where}: FITB needs exactly 4 distinct candidates", source=str(fitb_path))
        if not isinstance(answer, int) or isinstance(answer, bool) or not 0 <= answer <= 3:
            raise AnnotationError(f"{where}: answer_index {answer!r} outside [0, 3]", source=str(fitb_path))
        fitb.append(FITBQuestion(context, candidates, answer))

    compat_path = root / "compat.json"
    compat = []
    for index, entry in enumerate(read_json(compat_path)):
        where = f"question {index}"
        items = _id_list(_field(entry, "items", where, str(compat_path)), where, str(compat_path))
        if len(items) < 2:
            raise AnnotationError(f"{where}: a compatibility question needs at least 2 items", source=str(compat_path))
        label = _field(entry, "label", where, str(compat_path))
        if label not in (True, False) or not isinstance(label, (bool, int)):
            raise AnnotationError(f"{where}: label must be true/false or 1/0, got {label!r}", source=str(compat_path))
        compat.append(CompatQuestion(items, bool(label)))

    referenced = {i for q in fitb for i in q.context + q.candidates} | {i for q in compat for i in q.items}
    unknown = sorted(referenced - set(catalog))
    if unknown:
        raise ValidationError(f"{root}: questions reference unknown items: {', '.join(unknown)}")
    missing = [i for i in sorted(catalog) if not (root / "images" / f"{i}.png").exists()]
    if missing:
        logger.warning("%s: %d item image(s) not found, e.g. %s", root, len(missing), missing[0])
    return PolyvoreData(root, split, outfits, fitb, compat, catalog)


def parse_polyvore(directory: PathLike, split: Optional[str] = None
                   ) -> Tuple[List[Outfit], List[FITBQuestion], List[CompatQuestion]]:
    data = load_polyvore(directory, split)
    return data.outfits, data.fitb, data.compat


def write_polyvore(directory: PathLike, outfits: Sequence[Outfit], fitb: Sequence[FITBQuestion],
                   compat: Sequence[CompatQuestion], split: str = "Polyvore",
                   items: Optional[Dict[str, str]] = None) -> None:
    """Write outfits.json, fitb.json, compat.json and, for catalog-only items, items.json"""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "outfits.json", {
        "split": split,
        "outfits": [{"set_id": o.set_id, "items": [{"item_id": i.item_id, "type": i.type_label} for i in o.items]}
                    for o in outfits],
    })
    write_json(root / "fitb.json", [{"context": list(q.context), "candidates": list(q.candidates),
                                     "answer_index": q.answer_index} for q in fitb])
    write_json(root / "compat.json", [{"items": list(q.items), "label": int(q.label)} for q in compat])
    if items:
        write_json(root / "items.json", [{"item_id": k, "type": v} for k, v in items.items()])
