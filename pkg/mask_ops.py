"""
Polygon rasterization plus pycocotools-backed RLE, area and IoU helpers for
COCO-style masks.

Pixel (x, y) covers [x, x+1) x [y, y+1); a pixel is inside a polygon when its
center (x + 0.5, y + 0.5) is inside under the even-odd rule.
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pycocotools import mask as mask_utils

Box = Tuple[float, float, float, float]


def polygons_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Rasterize flat [x0, y0, x1, y1, ...] rings into a (height, width) bool mask.

    All rings share one parity, so a ring inside another ring cuts a hole.
    """
    mask = np.zeros((height, width), dtype=bool)
    if height <= 0 or width <= 0:
        return mask
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    for ring in polygons:
        points = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        if len(points) < 3:
            raise ValueError(f"polygon ring needs at least 3 vertices, got {len(points)}")
        nxt = np.roll(points, -1, axis=0)
        for (x1, y1), (x2, y2) in zip(points, nxt):
            if y1 == y2:
                continue
            rows = (y1 > ys) != (y2 > ys)
            if not rows.any():
                continue
            x_cross = x1 + (ys[rows] - y1) * (x2 - x1) / (y2 - y1)
            mask[rows] ^= xs[None, :] < x_cross[:, None]
    return mask


def rle_encode(mask: np.ndarray) -> Dict[str, Any]:
    """Compressed COCO RLE with string counts, ready for JSON"""
    rle = mask_utils.encode(np.asfortranarray(np.asarray(mask, dtype=np.uint8)))
    return {"size": [int(v) for v in rle["size"]], "counts": rle["counts"].decode("ascii")}


def to_coco_rle(rle: Dict[str, Any]) -> Dict[str, Any]:
    """Normalize a compressed or uncompressed RLE mapping to compressed form"""
    height, width = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    if isinstance(counts, str):
        return {"size": [height, width], "counts": counts}
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise ValueError("RLE counts must be non-negative")
    if counts.sum() != height * width:
        raise ValueError(f"RLE counts sum to {int(counts.sum())}, expected {height * width}")
    compressed = mask_utils.frPyObjects({"size": [height, width], "counts": counts.tolist()}, height, width)
    return {"size": [height, width], "counts": compressed["counts"].decode("ascii")}


def rle_decode(rle: Dict[str, Any]) -> np.ndarray:
    return mask_utils.decode(to_coco_rle(rle)).astype(bool)


def segmentation_to_rle(segmentation: Any, height: int, width: int) -> Dict[str, Any]:
    """Polygon list or RLE mapping -> compressed RLE of an image-sized mask"""
    if isinstance(segmentation, dict):
        rle = to_coco_rle(segmentation)
        if rle["size"] != [height, width]:
            raise ValueError(f"RLE size {rle['size']} does not match image size [{height}, {width}]")
        return rle
    return rle_encode(polygons_to_mask(segmentation, height, width))


def segmentation_to_mask(segmentation: Any, height: int, width: int) -> np.ndarray:
    if isinstance(segmentation, dict):
        return rle_decode(segmentation_to_rle(segmentation, height, width))
    return polygons_to_mask(segmentation, height, width)


def segmentation_area(segmentation: Any, height: int, width: int) -> float:
    return float(mask_utils.area(segmentation_to_rle(segmentation, height, width)))


def rle_areas(rles: Sequence[Dict[str, Any]]) -> np.ndarray:
    if not rles:
        return np.zeros(0)
    return np.asarray(mask_utils.area(list(rles)), dtype=np.float64)


def mask_bbox(mask: np.ndarray) -> Optional[Box]:
    """Tight xywh box around set pixels; None for an empty mask"""
    rle = rle_encode(mask)
    if mask_utils.area(rle) == 0:
        return None
    return tuple(float(v) for v in mask_utils.toBbox(rle))


def polygon_bbox(polygons: Sequence[Sequence[float]]) -> Box:
    """xywh extent of the polygon vertices"""
    points = np.concatenate([np.asarray(ring, dtype=np.float64).reshape(-1, 2) for ring in polygons])
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def box_array(boxes: Sequence[Sequence[float]]) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou_matrix(dets: Any, gts: Any, iscrowd: Sequence[bool]) -> np.ndarray:
    """(D, G) IoU of xywh box arrays or RLE lists; a crowd ground truth uses the detection area as union"""
    num_d, num_g = len(dets), len(gts)
    if num_d == 0 or num_g == 0:
        return np.zeros((num_d, num_g))
    ious = mask_utils.iou(dets, gts, [int(bool(c)) for c in iscrowd])
    return np.asarray(ious, dtype=np.float64).reshape(num_d, num_g)


def regular_polygon(cx: float, cy: float, radius: float, sides: int, phase: float = 0.0) -> List[float]:
    """Flat vertex list of a regular polygon, rounded to whole pixels"""
    angles = phase + 2.0 * np.pi * np.arange(sides) / sides
    xs = np.rint(cx + radius * np.cos(angles))
    ys = np.rint(cy + radius * np.sin(angles))
    return np.stack([xs, ys], axis=1).ravel().astype(float).tolist()
