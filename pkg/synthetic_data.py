"""
Deterministic synthetic fashion datasets.

Small procedural images with learnable signal for every task: drawn
primitives stand in for attributes, primitive centers for landmarks, jittered
base patterns for retrieval items, polygons for detection instances and
colored garments under a hidden hue-harmony rule for outfit compatibility.
Every dataset is a pure function of (task, n, seed, image_size).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.spatial.distance import cdist

import mask_ops
from annotation_io import (AttributeRecord, CompatQuestion, FITBQuestion, ImageInfo, InstanceRecord, Landmark,
                           LandmarkRecord, Outfit, OutfitItem, RetrievalRecord, write_attribute_file,
                           write_instances_json, write_json, write_landmark_file, write_polyvore,
                           write_retrieval_split)
from fashion_errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

TASKS = ("attribute", "landmark", "retrieval", "detection", "compat")
PRIMITIVES = ("stripe", "disc", "cross", "square", "triangle", "ring")
LANDMARK_PRIMITIVES = ("disc", "square", "triangle", "cross")
DETECTION_CATEGORIES = {1: "disc", 2: "square", 3: "triangle"}
ITEM_TYPES = ("top", "bottom", "shoe")
# six hues on a color wheel, BGR
HUE_PALETTE = ((0, 0, 255), (0, 255, 255), (0, 255, 0), (255, 255, 0), (255, 0, 0), (255, 0, 255))
LANDMARK_INVISIBLE_P = 0.15
BACKGROUND = 16


@dataclass
class SyntheticDataset:
    task: str
    n: int
    seed: int
    image_size: int
    images: Dict[str, np.ndarray] = field(default_factory=dict)
    attribute_names: List[str] = field(default_factory=list)
    attributes: List[AttributeRecord] = field(default_factory=list)
    landmarks: List[LandmarkRecord] = field(default_factory=list)
    retrieval: List[RetrievalRecord] = field(default_factory=list)
    coco_images: Dict[int, ImageInfo] = field(default_factory=dict)
    categories: Dict[int, str] = field(default_factory=dict)
    instances: List[InstanceRecord] = field(default_factory=list)
    detections: List[Dict[str, Any]] = field(default_factory=list)
    outfits: List[Outfit] = field(default_factory=list)
    fitb: List[FITBQuestion] = field(default_factory=list)
    compat: List[CompatQuestion] = field(default_factory=list)
    extra_items: Dict[str, str] = field(default_factory=dict)
    item_hues: Dict[str, int] = field(default_factory=dict)


def hue_distance(a: int, b: int) -> int:
    """Circular distance on the six-hue wheel"""
    d = abs(int(a) - int(b)) % len(HUE_PALETTE)
    return min(d, len(HUE_PALETTE) - d)


def is_compatible(hues: Sequence[int]) -> bool:
    """Harmony rule: every pair of items is at most one hue step apart"""
    return all(hue_distance(a, b) <= 1 for i, a in enumerate(hues) for b in hues[i + 1:])


def draw_primitive(image: np.ndarray, name: str, cx: int, cy: int, radius: int, color: Tuple[int, int, int]) -> None:
    """Draw a filled or outlined primitive centered at (cx, cy); no anti-aliasing"""
    r = int(radius)
    if name == "stripe":
        cv2.rectangle(image, (cx - r, cy - max(r // 3, 1)), (cx + r, cy + max(r // 3, 1)), color, -1, cv2.LINE_8)
    elif name == "disc":
        cv2.circle(image, (cx, cy), r, color, -1, cv2.LINE_8)
    elif name == "cross":
        cv2.line(image, (cx - r, cy), (cx + r, cy), color, 2, cv2.LINE_8)
        cv2.line(image, (cx, cy - r), (cx, cy + r), color, 2, cv2.LINE_8)
    elif name == "square":
        cv2.rectangle(image, (cx - r, cy - r), (cx + r, cy + r), color, -1, cv2.LINE_8)
    elif name == "triangle":
        points = np.array([[cx, cy - r], [cx + r, cy + r], [cx - r, cy + r]], dtype=np.int32)
        cv2.fillPoly(image, [points], color, cv2.LINE_8)
    elif name == "ring":
        cv2.circle(image, (cx, cy), r, color, 2, cv2.LINE_8)
    else:
        raise ValueError(f"unknown primitive '{name}'")


def _blank(size: int) -> np.ndarray:
    return np.full((size, size, 3), BACKGROUND, dtype=np.uint8)


def _gray(rng: np.random.Generator) -> Tuple[int, int, int]:
    level = int(rng.integers(170, 256))
    return (level, level, level)


def _attribute(ds: SyntheticDataset, rng: np.random.Generator) -> None:
    size = ds.image_size
    radius, jitter = max(size // 10, 3), max(size // 32, 1)
    ds.attribute_names = list(PRIMITIVES)
    for index in range(ds.n):
        image_id = f"img/{index:06d}.png"
        image = _blank(size)
        count = int(rng.integers(1, 4))
        drawn = set(int(i) for i in rng.choice(len(PRIMITIVES), size=count, replace=False))
        landmarks = []
        for slot, name in enumerate(PRIMITIVES):
            cx = int((slot % 3 + 0.5) * size / 3) + int(rng.integers(-jitter, jitter + 1))
            cy = int((slot // 3 + 0.5) * size / 2) + int(rng.integers(-jitter, jitter + 1))
            if slot in drawn:
                draw_primitive(image, name, cx, cy, radius, _gray(rng))
                landmarks.append(Landmark(float(cx), float(cy), True))
            else:
                landmarks.append(Landmark(0.0, 0.0, False))
        ds.images[image_id] = image
        labels = tuple(slot in drawn for slot in range(len(PRIMITIVES)))
        ds.attributes.append(AttributeRecord(image_id, image_id, labels))
        ds.landmarks.append(LandmarkRecord(image_id, image_id, (size, size), tuple(landmarks)))


def _landmark(ds: SyntheticDataset, rng: np.random.Generator) -> None:
    size = ds.image_size
    radius, jitter = max(size // 12, 3), max(size // 10, 2)
    for index in range(ds.n):
        image_id = f"img/{index:06d}.png"
        image = _blank(size)
        landmarks = []
        for slot, name in enumerate(LANDMARK_PRIMITIVES):
            cx = int((slot % 2 + 0.5) * size / 2) + int(rng.integers(-jitter, jitter + 1))
            cy = int((slot // 2 + 0.5) * size / 2) + int(rng.integers(-jitter, jitter + 1))
            color = _gray(rng)
            if rng.random() < LANDMARK_INVISIBLE_P:
                landmarks.append(Landmark(0.0, 0.0, False))
                continue
            draw_primitive(image, name, cx, cy, radius, color)
            landmarks.append(Landmark(float(cx), float(cy), True))
        ds.images[image_id] = image
        ds.landmarks.append(LandmarkRecord(image_id, image_id, (size, size), tuple(landmarks)))


def _retrieval(ds: SyntheticDataset, rng: np.random.Generator) -> None:
    size = ds.image_size
    roles = (("train", "shop"), ("train", "shop"), ("query", "consumer"), ("gallery", "shop"))
    queries, galleries = [], []
    for item in range(ds.n):
        item_id = f"item{item:04d}"
        cells = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        base = cv2.resize(cells, (size, size), interpolation=cv2.INTER_NEAREST).astype(np.int16)
        for shot, (role, source) in enumerate(roles):
            noise = rng.integers(-8, 9, size=base.shape).astype(np.int16)
            image = np.clip(base + noise, 0, 255).astype(np.uint8)
            image_id = f"img/{item_id}_{shot}.png"
            ds.images[image_id] = image
            ds.retrieval.append(RetrievalRecord(image_id, image_id, item_id, source, role))
            if role == "query":
                queries.append(image.reshape(-1).astype(np.float64))
            elif role == "gallery":
                galleries.append(image.reshape(-1).astype(np.float64))
    nearest = np.argmin(cdist(np.stack(queries), np.stack(galleries)), axis=1)
    if not np.array_equal(nearest, np.arange(ds.n)):
        raise ValidationError("synthetic retrieval split lost its nearest-neighbour property")


def _shape_polygon(name: str, cx: int, cy: int, r: int) -> List[float]:
    if name == "disc":
        return mask_ops.regular_polygon(cx, cy, r, 16)
    if name == "square":
        return [float(v) for v in (cx - r, cy - r, cx + r, cy - r, cx + r, cy + r, cx - r, cy + r)]
    return [float(v) for v in (cx, cy - r, cx + r, cy + r, cx - r, cy + r)]


def _shifted(ring: Sequence[float], dx: int, dy: int) -> List[float]:
    return [v + (dx if i % 2 == 0 else dy) for i, v in enumerate(ring)]


def _detection(ds: SyntheticDataset, rng: np.random.Generator) -> None:
    size = ds.image_size
    ds.categories = dict(DETECTION_CATEGORIES)
    ann_id = 0
    for index in range(ds.n):
        image_id = index + 1
        file_name = f"img/{image_id:06d}.png"
        image = _blank(size)
        ds.coco_images[image_id] = ImageInfo(image_id, file_name, size, size)
        for _ in range(int(rng.integers(1, 4))):
            category_id = int(rng.integers(1, len(DETECTION_CATEGORIES) + 1))
            r = int(rng.integers(max(size // 10, 3), max(size // 4, 4) + 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            cy = int(rng.integers(r + 1, size - r - 1))
            ring = _shape_polygon(DETECTION_CATEGORIES[category_id], cx, cy, r)
            points = np.asarray(ring, dtype=np.int32).reshape(-1, 2)
            cv2.fillPoly(image, [points], _gray(rng), cv2.LINE_8)
            area = mask_ops.segmentation_area([ring], size, size)
            ann_id += 1
            bbox = mask_ops.polygon_bbox([ring])
            ds.instances.append(InstanceRecord(ann_id, image_id, category_id, bbox, (tuple(ring),), area, False))
            dx, dy = (int(v) for v in rng.integers(-1, 2, size=2))
            moved = _shifted(ring, dx, dy)
            ds.detections.append({"image_id": image_id, "category_id": category_id,
                                  "bbox": list(mask_ops.polygon_bbox([moved])), "segmentation": [moved],
                                  "score": round(float(rng.uniform(0.5, 1.0)), 4)})
        if rng.random() < 0.3:
            category_id = int(rng.integers(1, len(DETECTION_CATEGORIES) + 1))
            r = max(size // 10, 3)
            cx, cy = (int(v) for v in rng.integers(r + 1, size - r - 1, size=2))
            ring = _shape_polygon(DETECTION_CATEGORIES[category_id], cx, cy, r)
            ds.detections.append({"image_id": image_id, "category_id": category_id,
                                  "bbox": list(mask_ops.polygon_bbox([ring])), "segmentation": [ring],
                                  "score": round(float(rng.uniform(0.05, 0.5)), 4)})
        ds.images[file_name] = image


def draw_item(size: int, type_label: str, hue: int, rng: np.random.Generator) -> np.ndarray:
    """Garment silhouette of the given type filled with a palette hue"""
    image = _blank(size)
    color = HUE_PALETTE[hue]
    s = size / 64.0
    wobble = int(rng.integers(-2, 3))
    if type_label == "top":
        cv2.rectangle(image, (int(20 * s) - wobble, int(14 * s)), (int(44 * s) + wobble, int(46 * s)), color, -1)
        cv2.rectangle(image, (int(8 * s), int(14 * s)), (int(56 * s), int(24 * s)), color, -1)
    elif type_label == "bottom":
        cv2.rectangle(image, (int(18 * s), int(10 * s)), (int(46 * s), int(22 * s)), color, -1)
        cv2.rectangle(image, (int(18 * s), int(22 * s)), (int(29 * s) + wobble, int(56 * s)), color, -1)
        cv2.rectangle(image, (int(35 * s) - wobble, int(22 * s)), (int(46 * s), int(56 * s)), color, -1)
    else:
        cv2.ellipse(image, (int(32 * s), int(40 * s)), (int(22 * s) + wobble, int(10 * s)), 0, 0, 360, color, -1)
    return image


def _compat(ds: SyntheticDataset, rng: np.random.Generator) -> None:
    size = ds.image_size
    palette = len(HUE_PALETTE)

    def add_item(item_id: str, type_label: str, hue: int) -> str:
        ds.item_hues[item_id] = hue
        ds.images[f"images/{item_id}.png"] = draw_item(size, type_label, hue, rng)
        return item_id

    for index in range(ds.n):
        set_id = f"outfit{index:04d}"
        base = int(rng.integers(palette))
        items = []
        for type_label in ITEM_TYPES:
            hue = (base + int(rng.integers(2))) % palette
            items.append(OutfitItem(add_item(f"{set_id}_{type_label}", type_label, hue), type_label))
        ds.outfits.append(Outfit(set_id, tuple(items)))
        ds.compat.append(CompatQuestion(tuple(i.item_id for i in items), True))

        swap = int(rng.integers(len(items)))
        swapped_type = items[swap].type_label
        clash = (base + int(rng.choice([3, 4]))) % palette
        negative_id = add_item(f"neg{index:04d}_{swapped_type}", swapped_type, clash)
        ds.extra_items[negative_id] = swapped_type
        negative = [i.item_id for i in items]
        negative[swap] = negative_id
        ds.compat.append(CompatQuestion(tuple(negative), False))

        distractors = []
        for k in range(3):
            hue = (base + int(rng.choice([3, 4]))) % palette
            distractor = add_item(f"fitb{index:04d}_{k}", "shoe", hue)
            ds.extra_items[distractor] = "shoe"
            distractors.append(distractor)
        candidates = [items[-1].item_id] + distractors
        order = [int(i) for i in rng.permutation(4)]
        shuffled = tuple(candidates[i] for i in order)
        ds.fitb.append(FITBQuestion(tuple(i.item_id for i in items[:-1]), shuffled, order.index(0)))


_BUILDERS = {"attribute": _attribute, "landmark": _landmark, "retrieval": _retrieval,
             "detection": _detection, "compat": _compat}


def synth_dataset(task: str, n: int, seed: int, image_size: int = 64) -> SyntheticDataset:
    """Generate a synthetic dataset for one task"""
    if task not in _BUILDERS:
        raise ConfigError(f"unknown synthetic task '{task}', expected one of {', '.join(TASKS)}")
    if int(n) < 1:
        raise ConfigError(f"synthetic dataset size must be >= 1, got {n}")
    if int(image_size) < 32:
        raise ConfigError(f"synthetic image size must be >= 32, got {image_size}")
    ds = SyntheticDataset(task, int(n), int(seed), int(image_size))
    _BUILDERS[task](ds, np.random.default_rng(int(seed)))
    logger.debug("generated synthetic %s dataset: %d images", task, len(ds.images))
    return ds


def write_synthetic(ds: SyntheticDataset, out_dir: Union[str, Path]) -> List[Path]:
    """Write images as PNG plus the task's annotation files; returns written paths"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for relative, image in sorted(ds.images.items()):
        path = out / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(path), image):
            raise OSError(f"failed to write image {path}")
        written.append(path)
    if ds.task == "attribute":
        write_attribute_file(out / "attributes.txt", ds.attribute_names, ds.attributes)
        write_landmark_file(out / "landmarks.txt", ds.landmarks)
        written += [out / "attributes.txt", out / "landmarks.txt"]
    elif ds.task == "landmark":
        write_landmark_file(out / "landmarks.txt", ds.landmarks)
        written.append(out / "landmarks.txt")
    elif ds.task == "retrieval":
        write_retrieval_split(out / "retrieval_split.txt", ds.retrieval)
        written.append(out / "retrieval_split.txt")
    elif ds.task == "detection":
        write_instances_json(out / "instances.json", ds.coco_images, ds.categories, ds.instances)
        write_json(out / "detections.json", {"task": "detection", "detections": ds.detections})
        written += [out / "instances.json", out / "detections.json"]
    elif ds.task == "compat":
        write_polyvore(out, ds.outfits, ds.fitb, ds.compat, split="Polyvore-D", items=ds.extra_items)
        written += [out / name for name in ("outfits.json", "fitb.json", "compat.json", "items.json")]
    return written
