"""
Document-level evaluation: predictions document + annotations -> MetricReport.

Prediction document schemas (JSON), keyed by the annotation image/item ids:
    attribute:  {"task": "attribute", "scores": {image_id: [c floats]}}
    landmark:   {"task": "landmark", "landmarks": {image_id: [[x, y], ...]}}   (pixels)
    retrieval:  {"task": "retrieval", "embeddings": {image_id: [d floats]}}
    detection:  {"task": "detection", "detections": [{image_id, category_id, bbox, score, segmentation?}]}
    compat:     {"task": "compat", "fitb": [answer index per question], "compat_scores": [score per question]}
"""

import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

import fashion_metrics
import mask_ops
from annotation_io import (RetrievalRecord, load_attribute_file, load_landmark_file, load_polyvore,
                           parse_instances_json, parse_retrieval_split)
from config_core import Config
from fashion_errors import DataError, ValidationError
from fashion_metrics import Detection, MetricReport

logger = logging.getLogger(__name__)

TASKS = ("attribute", "landmark", "retrieval", "detection", "compat")

DEFAULT_EVALUATION = {
    "topk": [3, 5],
    "recall_ks": [1, 5, 10, 20],
    "pdl_thresholds": list(range(1, 31)),
    "max_dets": 100,
}


def evaluation_settings(cfg: Optional[Union[Config, Mapping]] = None) -> Dict[str, Any]:
    settings = dict(DEFAULT_EVALUATION)
    if cfg is not None:
        settings.update(cfg.to_dict() if isinstance(cfg, Config) else dict(cfg))
    return settings


def load_predictions(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(document, dict):
        raise ValidationError(f"{path}: predictions document must be an object")
    return document


def write_predictions(path: Union[str, Path], document: Dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _section(predictions: Dict[str, Any], key: str, kind: type) -> Any:
    if key not in predictions:
        raise ValidationError(f"predictions document has no '{key}' section")
    value = predictions[key]
    if not isinstance(value, kind):
        raise ValidationError(f"predictions '{key}' must be a {kind.__name__}")
    return value


def _lookup_rows(table: Dict[str, Any], ids: Sequence[str], width: Optional[int], what: str) -> np.ndarray:
    missing = [i for i in ids if i not in table]
    if missing:
        raise ValidationError(f"{len(missing)} image(s) have no {what}, e.g. {missing[0]}")
    try:
        rows = np.asarray([table[i] for i in ids], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(f"{what} must be equal-length numeric lists") from None
    if width is not None and (rows.ndim != 2 or rows.shape[1] != width):
        raise ValidationError(f"{what} must have {width} values per image")
    return rows


def _evaluate_attribute(predictions, annotations_path, settings) -> MetricReport:
    names, records = load_attribute_file(annotations_path)
    scores = _lookup_rows(_section(predictions, "scores", dict), [r.image_id for r in records],
                          len(names), "attribute scores")
    gts = np.asarray([r.labels for r in records], dtype=bool).reshape(len(records), len(names))
    report = MetricReport(metadata={"attributes": names})
    ks = [int(k) for k in settings["topk"] if int(k) <= len(names)]
    if not ks:
        raise ValidationError(f"no top-k value fits {len(names)} attributes")
    for k in ks:
        recall, accuracy, counts = fashion_metrics.per_attribute_topk(scores, gts, k)
        report.add_scalar(f"attr/recall@{k}", recall)
        report.add_scalar(f"attr/accuracy@{k}", accuracy)
        report.metadata["excluded_attributes"] = counts.excluded
    report.metadata["topk"] = ks
    return report


def _evaluate_landmark(predictions, annotations_path, settings) -> MetricReport:
    num_landmarks, records = load_landmark_file(annotations_path)
    table = _section(predictions, "landmarks", dict)
    ids = [r.image_id for r in records]
    missing = [i for i in ids if i not in table]
    if missing:
        raise ValidationError(f"{len(missing)} image(s) have no landmarks, e.g. {missing[0]}")
    try:
        pred = np.asarray([[point[:2] for point in table[i]] for i in ids], dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError("landmarks must be lists of [x, y] points") from None
    if pred.shape != (len(records), num_landmarks, 2):
        raise ValidationError(f"expected {num_landmarks} [x, y] points per image")
    gt = np.asarray([[[lm.x, lm.y] for lm in r.landmarks] for r in records], dtype=np.float64)
    visible = np.asarray([[lm.visible for lm in r.landmarks] for r in records], dtype=bool)
    pairs = fashion_metrics.landmark_pairs(pred, gt, visible, [r.image_size for r in records])
    report = MetricReport()
    report.add_scalar("landmark/NE", fashion_metrics.normalized_error(pairs))
    thresholds = [float(t) for t in settings["pdl_thresholds"]]
    report.add_curve("landmark/PDL", fashion_metrics.pdl_curve(pred, gt, visible, thresholds))
    report.metadata["pdl_thresholds"] = thresholds
    return report


def retrieval_report(embeddings: Dict[str, Sequence[float]], records: Sequence[RetrievalRecord],
                     ks: Sequence[int]) -> MetricReport:
    """recall@k over query/gallery roles, split by query source when both occur"""
    queries = [r for r in records if r.role == "query"]
    gallery = [r for r in records if r.role == "gallery"]
    if not queries or not gallery:
        raise ValidationError("retrieval evaluation needs query and gallery images")
    usable = sorted({int(k) for k in ks if 1 <= int(k) <= len(gallery)})
    dropped = sorted({int(k) for k in ks} - set(usable))
    if dropped:
        logger.warning("skipping recall@k for k=%s larger than the gallery (%d images)", dropped, len(gallery))
    if not usable:
        raise ValidationError("no recall@k value fits the gallery size")
    query_embs = _lookup_rows(embeddings, [r.image_id for r in queries], None, "embeddings")
    gallery_embs = _lookup_rows(embeddings, [r.image_id for r in gallery], None, "embeddings")
    gallery_items = [r.item_id for r in gallery]
    report = MetricReport(metadata={"recall_ks": usable, "queries": len(queries), "gallery": len(gallery)})
    recalls = fashion_metrics.retrieval_recall_at_k(query_embs, gallery_embs, [r.item_id for r in queries],
                                                    gallery_items, usable)
    for k, value in recalls.items():
        report.add_scalar(f"retrieval/recall@{k}", value)
    sources = {r.source for r in queries}
    if len(sources) > 1:
        for source, label in (("shop", "inshop"), ("consumer", "consumer2shop")):
            rows = [i for i, r in enumerate(queries) if r.source == source]
            subset = fashion_metrics.retrieval_recall_at_k(query_embs[rows], gallery_embs,
                                                           [queries[i].item_id for i in rows], gallery_items, usable)
            for k, value in subset.items():
                report.add_scalar(f"retrieval/{label}/recall@{k}", value)
    return report


def _evaluate_retrieval(predictions, annotations_path, settings) -> MetricReport:
    records = parse_retrieval_split(annotations_path)
    return retrieval_report(_section(predictions, "embeddings", dict), records, settings["recall_ks"])


def _evaluate_detection(predictions, annotations_path, settings) -> MetricReport:
    images, categories, instances = parse_instances_json(annotations_path)
    entries = _section(predictions, "detections", list)
    detections: List[Detection] = []
    for index, entry in enumerate(entries):
        try:
            image_id = int(entry["image_id"])
            segmentation = entry.get("segmentation")
            mask = None
            if segmentation is not None:
                if image_id not in images:
                    raise ValueError(f"unknown image {image_id}")
                info = images[image_id]
                mask = mask_ops.segmentation_to_mask(segmentation, info.height, info.width)
            detections.append(Detection(image_id, int(entry["category_id"]), float(entry["score"]),
                                        tuple(float(v) for v in entry["bbox"]), mask))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"detection {index}: {e}") from None
    return fashion_metrics.evaluate_detections(detections, instances, images, categories=list(categories),
                                               max_dets=int(settings["max_dets"]))


def _evaluate_compat(predictions, annotations_path, settings) -> MetricReport:
    data = load_polyvore(annotations_path)
    report = MetricReport(metadata={"split": data.split})
    answers = _section(predictions, "fitb", list)
    if len(answers) != len(data.fitb):
        raise ValidationError(f"{len(answers)} FITB answers for {len(data.fitb)} questions")
    if data.fitb:
        report.add_scalar("compat/fitb_accuracy", fashion_metrics.fitb_accuracy(answers, data.fitb))
    scores = _section(predictions, "compat_scores", list)
    if len(scores) != len(data.compat):
        raise ValidationError(f"{len(scores)} compatibility scores for {len(data.compat)} questions")
    labels = [q.label for q in data.compat]
    if any(labels) and not all(labels):
        report.add_scalar("compat/auc", fashion_metrics.roc_auc(scores, labels))
    elif data.compat:
        logger.warning("compatibility questions are single-class, AUC skipped")
    return report


_EVALUATORS = {
    "attribute": _evaluate_attribute,
    "landmark": _evaluate_landmark,
    "retrieval": _evaluate_retrieval,
    "detection": _evaluate_detection,
    "compat": _evaluate_compat,
}


def evaluate_document(task: str, predictions: Dict[str, Any], annotations_path: Union[str, Path],
                      cfg: Optional[Union[Config, Mapping]] = None) -> MetricReport:
    if task not in _EVALUATORS:
        raise ValidationError(f"unknown task '{task}', expected one of {', '.join(TASKS)}")
    declared = predictions.get("task", task)
    if declared != task:
        raise ValidationError(f"predictions are for task '{declared}', not '{task}'")
    try:
        report = _EVALUATORS[task](predictions, Path(annotations_path), evaluation_settings(cfg))
    except ValueError as e:
        raise ValidationError(str(e)) from None
    report.metadata["task"] = task
    return report


def write_report(report: MetricReport, out_path: Union[str, Path]) -> List[Path]:
    """Write the report and, when it has curves, plot data and a PNG next to it"""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_path)
    written = [out_path]
    if report.curves:
        data_path = out_path.with_name(out_path.stem + "_curves.json")
        image_path = out_path.with_name(out_path.stem + "_curves.png")
        report.save_plot_data(data_path)
        report.plot(image_path)
        written += [data_path, image_path]
    return written
