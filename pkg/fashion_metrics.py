"""
Evaluation metrics for every fashion task.

Per-attribute top-k recall and accuracy, retrieval recall@k, normalized
landmark error and PDL curves, COCO-style box/mask AP, FITB accuracy and
compatibility ROC-AUC. All functions are pure; every tie resolves by
ascending original index. Precondition violations raise ValueError.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

import mask_ops

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, 1e10),
}
MAX_DETS = 100
REPORT_DECIMALS = 6


@dataclass
class MetricReport:
    """Named scalars and curves plus the settings that produced them"""
    scalars: Dict[str, float] = field(default_factory=dict)
    curves: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def add_scalar(self, name: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"metric '{name}' is not finite: {value}")
        self.scalars[name] = value

    def add_curve(self, name: str, points: Sequence[Tuple[float, float]]) -> None:
        points = [(float(x), float(y)) for x, y in points]
        xs = [x for x, _ in points]
        if xs != sorted(xs):
            raise ValueError(f"curve '{name}' is not sorted by x")
        if not all(math.isfinite(x) and math.isfinite(y) for x, y in points):
            raise ValueError(f"curve '{name}' has non-finite points")
        self.curves[name] = points

    def merge(self, other: "MetricReport", prefix: str = "") -> None:
        for name, value in other.scalars.items():
            self.add_scalar(prefix + name, value)
        for name, points in other.curves.items():
            self.add_curve(prefix + name, points)
        self.metadata.update(other.metadata)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scalars": {k: round(v, REPORT_DECIMALS) for k, v in self.scalars.items()},
            "curves": {k: [[round(x, REPORT_DECIMALS), round(y, REPORT_DECIMALS)] for x, y in pts]
                       for k, pts in self.curves.items()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "MetricReport":
        report = cls(metadata=dict(document.get("metadata", {})))
        for name, value in document.get("scalars", {}).items():
            report.add_scalar(name, value)
        for name, points in document.get("curves", {}).items():
            report.add_curve(name, [tuple(p) for p in points])
        return report

    def to_json(self) -> str:
        """Byte-stable serialization: sorted keys, floats rounded to 6 decimals"""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def save_plot_data(self, path: Union[str, Path]) -> None:
        curves = self.to_dict()["curves"]
        Path(path).write_text(json.dumps(curves, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def plot(self, path: Union[str, Path]) -> None:
        """Render every curve into one PNG"""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        names = sorted(self.curves)
        if not names:
            return
        fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.5), squeeze=False)
        for ax, name in zip(axes[0], names):
            xs, ys = zip(*self.curves[name]) if self.curves[name] else ((), ())
            ax.plot(xs, ys, marker=".", linewidth=1.5)
            ax.set_title(name)
            ax.set_ylim(-0.02, 1.02)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(str(path), dpi=100)
        plt.close(fig)

    def headline(self) -> List[str]:
        return [f"{name}: {value:.4f}" for name, value in sorted(self.scalars.items())]


# ---------------------------------------------------------------------------
# attributes

@dataclass
class AttributeEvalCounts:
    c: int
    tp: np.ndarray
    tn: np.ndarray
    g: np.ndarray
    p: np.ndarray
    excluded: int


def per_attribute_topk(scores, gts, k: int) -> Tuple[float, float, AttributeEvalCounts]:
    """Top-k multi-label recall and accuracy averaged per attribute.

    Recall skips attributes without positives; accuracy counts every
    evaluated image for every attribute.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gts = np.asarray(gts, dtype=bool)
    if scores.ndim != 2 or scores.shape != gts.shape:
        raise ValueError(f"scores {scores.shape} and ground truth {gts.shape} must be matching (N, c) arrays")
    n, c = scores.shape
    if n == 0:
        raise ValueError("no images to evaluate")
    if not 1 <= k <= c:
        raise ValueError(f"k={k} must be in [1, {c}]")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    predicted = np.zeros_like(gts)
    np.put_along_axis(predicted, top, True, axis=1)
    tp = np.sum(predicted & gts, axis=0)
    tn = np.sum(~predicted & ~gts, axis=0)
    g = np.sum(gts, axis=0)
    p = np.full(c, n)
    valid = g > 0
    if not valid.any():
        raise ValueError("no attribute has a ground-truth positive")
    recall = float(np.mean(tp[valid] / g[valid]))
    accuracy = float(np.mean((tp + tn) / p))
    return recall, accuracy, AttributeEvalCounts(c, tp, tn, g, p, int(np.sum(~valid)))


# ---------------------------------------------------------------------------
# retrieval

def retrieval_recall_at_k(query_embs, gallery_embs, query_items: Sequence[str], gallery_items: Sequence[str],
                          ks: Sequence[int]) -> Dict[int, float]:
    """Fraction of queries with a same-item gallery image in their top k"""
    query_embs = np.asarray(query_embs, dtype=np.float64)
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    if query_embs.ndim != 2 or gallery_embs.ndim != 2 or query_embs.shape[1] != gallery_embs.shape[1]:
        raise ValueError("query and gallery embeddings must be (n, d) arrays of the same dimension")
    if len(query_items) != len(query_embs) or len(gallery_items) != len(gallery_embs):
        raise ValueError("item id lists must align with the embeddings")
    if len(query_embs) == 0:
        raise ValueError("no queries to evaluate")
    for k in ks:
        if not 1 <= k <= len(gallery_embs):
            raise ValueError(f"k={k} must be in [1, gallery size {len(gallery_embs)}]")
    order = np.argsort(cdist(query_embs, gallery_embs), axis=1, kind="stable")
    hits = np.asarray(gallery_items, dtype=object)[order] == np.asarray(query_items, dtype=object)[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), len(gallery_embs))
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


# ---------------------------------------------------------------------------
# landmarks

@dataclass(frozen=True)
class LandmarkEvalPair:
    dx: float
    dy: float
    w: float
    h: float
    visible: bool


def normalized_error(pairs: Sequence[LandmarkEvalPair]) -> float:
    """Mean width/height-normalized L2 error over all visible pairs"""
    visible = [p for p in pairs if p.visible]
    if not visible:
        raise ValueError("normalized error is undefined without visible landmarks")
    for p in visible:
        if p.w <= 0 or p.h <= 0:
            raise ValueError("image width and height must be positive")
    dx = np.array([p.dx / p.w for p in visible], dtype=np.float64)
    dy = np.array([p.dy / p.h for p in visible], dtype=np.float64)
    return float(np.mean(np.hypot(dx, dy)))


def landmark_pairs(pred_px, gt_px, visibility, image_sizes) -> List[LandmarkEvalPair]:
    """Build eval pairs from (N, L, 2) pixel arrays and per-image (w, h)"""
    pred_px = np.asarray(pred_px, dtype=np.float64)
    gt_px = np.asarray(gt_px, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    pairs = []
    for n, (w, h) in enumerate(image_sizes):
        for l in range(gt_px.shape[1]):
            dx, dy = np.abs(pred_px[n, l] - gt_px[n, l])
            pairs.append(LandmarkEvalPair(float(dx), float(dy), float(w), float(h), bool(visibility[n, l])))
    return pairs


def pdl_curve(pred_px, gt_px, visibility, thresholds_px: Sequence[float]) -> List[Tuple[float, float]]:
    """Fraction of visible landmarks within each pixel distance"""
    thresholds = np.asarray(thresholds_px, dtype=np.float64)
    if thresholds.ndim != 1 or len(thresholds) == 0 or np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be a non-empty strictly increasing list")
    pred_px = np.asarray(pred_px, dtype=np.float64)
    gt_px = np.asarray(gt_px, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if pred_px.shape != gt_px.shape or pred_px.shape[:-1] != visibility.shape:
        raise ValueError("prediction, ground truth and visibility shapes disagree")
    errors = np.linalg.norm(pred_px - gt_px, axis=-1)[visibility]
    if errors.size == 0:
        raise ValueError("PDL is undefined without visible landmarks")
    return [(float(d), float(np.mean(errors <= d))) for d in thresholds]


# ---------------------------------------------------------------------------
# detection

def iou(a, b) -> float:
    """IoU of two xywh boxes or two same-shape binary masks"""
    a_mask = isinstance(a, np.ndarray) and a.ndim == 2
    b_mask = isinstance(b, np.ndarray) and b.ndim == 2
    if a_mask != b_mask:
        raise ValueError("cannot compare a box with a mask")
    if a_mask:
        if a.shape != b.shape:
            raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
        return float(mask_ops.iou_matrix([mask_ops.rle_encode(a)], [mask_ops.rle_encode(b)], [False])[0, 0])
    if len(a) != 4 or len(b) != 4:
        raise ValueError("boxes must be [x, y, width, height]")
    return float(mask_ops.iou_matrix(mask_ops.box_array([a]), mask_ops.box_array([b]), [False])[0, 0])


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    bbox: Tuple[float, float, float, float]
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError("detection bbox must have positive extent")


def _match_image(ious: np.ndarray, gt_ignore: np.ndarray, gt_crowd: np.ndarray, det_areas: np.ndarray,
                 area_range: Tuple[float, float], thresholds: Sequence[float]):
    """Greedy matching of score-sorted detections to ignore-sorted ground truths"""
    num_t, num_d, num_g = len(thresholds), ious.shape[0], ious.shape[1]
    det_matched = np.zeros((num_t, num_d), dtype=bool)
    det_ignore = np.zeros((num_t, num_d), dtype=bool)
    for t_index, threshold in enumerate(thresholds):
        gt_taken = np.zeros(num_g, dtype=bool)
        for d in range(num_d):
            best, match = min(threshold, 1 - 1e-10), -1
            for g in range(num_g):
                if gt_taken[g] and not gt_crowd[g]:
                    continue
                if match > -1 and not gt_ignore[match] and gt_ignore[g]:
                    break
                if ious[d, g] < best or (match > -1 and ious[d, g] == best):
                    continue
                best, match = ious[d, g], g
            if match == -1:
                continue
            det_matched[t_index, d] = True
            det_ignore[t_index, d] = gt_ignore[match]
            gt_taken[match] = True
    outside = (det_areas < area_range[0]) | (det_areas > area_range[1])
    det_ignore |= ~det_matched & outside[None, :]
    return det_matched, det_ignore


def _average_precision(matched: np.ndarray, ignored: np.ndarray, num_gt: int) -> Tuple[np.ndarray, float]:
    """101-point interpolated precision for score-sorted detections"""
    keep = ~ignored
    tps = np.cumsum(matched & keep).astype(np.float64)
    fps = np.cumsum(~matched & keep).astype(np.float64)
    num = len(tps)
    precision = np.zeros(len(RECALL_POINTS))
    if num == 0:
        return precision, 0.0
    recall = tps / num_gt
    pr = tps / np.maximum(tps + fps, np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = indices < num
    precision[valid] = pr[indices[valid]]
    return precision, float(recall[-1])


def _evaluate_kind(dets: Sequence[Detection], gts: Sequence[Any], det_geoms: List[Any], gt_geoms: List[Any],
                   use_masks: bool, categories: Sequence[int], image_ids: Sequence[int],
                   thresholds: Sequence[float], area_ranges: Dict[str, Tuple[float, float]], max_dets: int):
    """precision (T, R, K, A) and recall (T, K, A); -1 marks settings without ground truth"""
    num_t, num_k, num_a = len(thresholds), len(categories), len(area_ranges)
    precision = -np.ones((num_t, len(RECALL_POINTS), num_k, num_a))
    recall = -np.ones((num_t, num_k, num_a))
    ranges = list(area_ranges.values())
    for k_index, category in enumerate(categories):
        per_image = []
        for image_id in image_ids:
            g_idx = [i for i, g in enumerate(gts) if g.image_id == image_id and g.category_id == category]
            d_idx = [i for i, d in enumerate(dets) if d.image_id == image_id and d.category_id == category]
            d_idx = sorted(d_idx, key=lambda i: (-dets[i].score, i))[:max_dets]
            per_image.append((g_idx, d_idx))
        for a_index, area_range in enumerate(ranges):
            matched_all, ignored_all, det_order, num_gt = [], [], [], 0
            for g_idx, d_idx in per_image:
                if not g_idx and not d_idx:
                    continue
                raw_ignore = np.array([gts[i].iscrowd or not area_range[0] <= gts[i].area <= area_range[1]
                                       for i in g_idx], dtype=bool)
                g_order = np.argsort(raw_ignore, kind="stable")
                g_sorted = [g_idx[i] for i in g_order]
                gt_ignore = raw_ignore[g_order]
                gt_crowd = np.array([bool(gts[i].iscrowd) for i in g_sorted], dtype=bool)
                if use_masks:
                    det_sel = [det_geoms[i] for i in d_idx]
                    ious = mask_ops.iou_matrix(det_sel, [gt_geoms[i] for i in g_sorted], gt_crowd)
                    det_areas = mask_ops.rle_areas(det_sel)
                else:
                    det_sel = det_geoms[d_idx]
                    ious = mask_ops.iou_matrix(det_sel, gt_geoms[g_sorted], gt_crowd)
                    det_areas = det_sel[:, 2] * det_sel[:, 3]
                matched, ignored = _match_image(ious, gt_ignore, gt_crowd, det_areas, area_range, thresholds)
                matched_all.append(matched)
                ignored_all.append(ignored)
                det_order += d_idx
                num_gt += int(np.sum(~gt_ignore))
            if num_gt == 0:
                continue
            if det_order:
                order = sorted(range(len(det_order)), key=lambda j: (-dets[det_order[j]].score, det_order[j]))
                matched = np.concatenate(matched_all, axis=1)[:, order]
                ignored = np.concatenate(ignored_all, axis=1)[:, order]
            else:
                matched = ignored = np.zeros((num_t, 0), dtype=bool)
            for t_index in range(num_t):
                precision[t_index, :, k_index, a_index], recall[t_index, k_index, a_index] = _average_precision(
                    matched[t_index], ignored[t_index], num_gt)
    return precision, recall


def _mean_valid(values: np.ndarray) -> float:
    valid = values[values > -1]
    return float(np.mean(valid)) if valid.size else -1.0


def evaluate_detections(dets: Sequence[Detection], gts: Sequence[Any], images: Optional[Dict[int, Any]] = None,
                        categories: Optional[Sequence[int]] = None,
                        iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                        area_ranges: Optional[Dict[str, Tuple[float, float]]] = None,
                        max_dets: int = MAX_DETS) -> MetricReport:
    """COCO-style AP for boxes, and for masks when every detection carries one.

    ``gts`` are InstanceRecord-like objects; ``images`` maps image id to an
    object with width/height and is needed for mask evaluation.
    """
    area_ranges = dict(area_ranges or AREA_RANGES)
    thresholds = [float(t) for t in iou_thresholds]
    category_ids = sorted(set(categories) if categories is not None else {g.category_id for g in gts})
    image_ids = sorted(images) if images is not None else sorted({g.image_id for g in gts})
    known_images, known_categories = set(image_ids), set(category_ids)
    for index, det in enumerate(dets):
        if det.image_id not in known_images:
            raise ValueError(f"detection {index} references unknown image {det.image_id}")
        if det.category_id not in known_categories:
            raise ValueError(f"detection {index} references unknown category {det.category_id}")

    kinds = [("bbox", False)]
    if images is not None and dets and all(d.mask is not None for d in dets):
        kinds.append(("segm", True))

    report = MetricReport(metadata={
        "iou_thresholds": thresholds,
        "area_ranges": {name: list(bounds) for name, bounds in area_ranges.items()},
        "max_dets": max_dets,
        "recall_points": len(RECALL_POINTS),
    })
    area_names = list(area_ranges)
    for prefix, use_masks in kinds:
        if use_masks:
            det_geoms = [mask_ops.rle_encode(d.mask.astype(bool)) for d in dets]
            gt_geoms = [mask_ops.segmentation_to_rle(g.segmentation, images[g.image_id].height,
                                                     images[g.image_id].width) for g in gts]
        else:
            det_geoms = mask_ops.box_array([d.bbox for d in dets])
            gt_geoms = mask_ops.box_array([g.bbox for g in gts])
        precision, recall = _evaluate_kind(dets, gts, det_geoms, gt_geoms, use_masks, category_ids, image_ids,
                                           thresholds, area_ranges, max_dets)
        all_index = area_names.index("all") if "all" in area_names else 0
        report.add_scalar(f"{prefix}/AP", _mean_valid(precision[:, :, :, all_index]))
        for label, value in (("AP50", 0.5), ("AP75", 0.75)):
            if value in thresholds:
                report.add_scalar(f"{prefix}/{label}", _mean_valid(precision[thresholds.index(value), :, :, all_index]))
        for a_index, name in enumerate(area_names):
            if name != "all":
                report.add_scalar(f"{prefix}/AP_{name}", _mean_valid(precision[:, :, :, a_index]))
        report.add_scalar(f"{prefix}/AR", _mean_valid(recall[:, :, all_index]))
        for t_index, threshold in enumerate(thresholds):
            if threshold not in (0.5, 0.75):
                continue
            per_category = precision[t_index, :, :, all_index]
            valid = per_category[:, per_category[0] > -1]
            if valid.shape[1]:
                report.add_curve(f"{prefix}/pr@{threshold:g}",
                                 list(zip(RECALL_POINTS.tolist(), valid.mean(axis=1).tolist())))
    return report


# ---------------------------------------------------------------------------
# compatibility

def fitb_accuracy(predicted_indices: Sequence[int], questions: Sequence[Any]) -> float:
    """Fraction of FITB questions whose predicted index is the answer"""
    if len(predicted_indices) != len(questions):
        raise ValueError(f"{len(predicted_indices)} predictions for {len(questions)} questions")
    if not questions:
        raise ValueError("no FITB questions")
    correct = sum(int(p) == q.answer_index for p, q in zip(predicted_indices, questions))
    return correct / len(questions)


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    num_pos = int(labels.sum())
    num_neg = len(labels) - num_pos
    if num_pos == 0 or num_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[labels].sum() - num_pos * (num_pos + 1) / 2.0
    return float(u_statistic / (num_pos * num_neg))
