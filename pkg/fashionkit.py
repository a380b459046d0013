#!/usr/bin/env python3
"""
fashionkit command line: train, test, evaluate, demo, zoo, synth.

Exit codes: 0 success, 1 usage/config error, 2 data/validation error,
3 runtime failure (non-finite loss, checksum mismatch, unwritable output).
"""

import argparse
import json
import logging
import sys
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np
import torch
from scipy.spatial.distance import cdist

import compatibility
import evaluation
import model_zoo
import synthetic_data
from checkpoint_io import load_and_resume, load_model_weights, save_checkpoint
from config_core import Config, load_config, merge_config, parse_overrides
from fashion_data import load_image
from fashion_errors import ConfigError, DataError, TrainingError, UsageError
from pipelines import build_model, to_pixels
from train_runner import build_dataset, build_runner, dataset_defaults, schedule_settings

logger = logging.getLogger("fashionkit")

DEFAULT_MANIFEST = Path(__file__).resolve().parent / "configs" / "zoo_manifest.json"

# BGR, fixed so annotated demo images are reproducible
PALETTE = ((0, 0, 255), (0, 200, 0), (255, 0, 0), (0, 200, 255),
           (255, 0, 200), (255, 200, 0), (128, 128, 255), (0, 128, 255))
HIGHLIGHT = (0, 220, 0)


class ExitStatus(IntEnum):
    OK = 0
    USAGE = 1
    DATA = 2
    RUNTIME = 3


class FashionArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit code"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_run_config(config_path: str, overrides: Sequence[str] = ()) -> Config:
    cfg = load_config(config_path)
    if overrides:
        cfg = merge_config(cfg, parse_overrides(overrides))
    return cfg


def _eval_split(cfg: Config) -> str:
    for split in ("test", "val", "train"):
        if f"data.{split}" in cfg:
            return split
    raise ConfigError("config has no data.test, data.val or data.train section", path="data")


def _trained_model(cfg: Config, checkpoint: str, allow_mismatch: bool):
    if cfg.get("task", None) == "detection":
        raise ConfigError("detection is evaluate-only, there is no detection model", path="task")
    model = build_model(cfg)
    load_model_weights(model, checkpoint, cfg.fingerprint("model"), allow_mismatch)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# train / test / evaluate

def cmd_train(config_path: str, overrides: Sequence[str], work_dir: str, trace: bool = False,
              resume: Optional[str] = None, allow_mismatch: bool = False) -> ExitStatus:
    cfg = load_run_config(config_path, overrides)
    task = cfg.get("task", None)
    if task == "detection":
        raise ConfigError("detection is evaluate-only, train is not available", path="task")
    model = build_model(cfg)
    if task is not None and task != model.task:
        raise ConfigError(f"task '{task}' does not match model type {type(model).__name__}", path="task")
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.json").write_text(cfg.serialize(), encoding="utf-8")
    runner = build_runner(cfg, model, work, trace=trace)
    if resume:
        load_and_resume(runner, resume, allow_mismatch)
    state = runner.run(schedule_settings(cfg)["workflow"])
    save_checkpoint(runner, work / "latest.ckpt")
    if runner.trace is not None:
        (work / "trace.json").write_text(json.dumps(runner.trace, indent=2) + "\n", encoding="utf-8")
    print(f"✓ trained {state.epoch} epoch(s), {state.iter} iteration(s), last loss "
          f"{runner.last_loss if runner.last_loss is not None else float('nan'):.4f} -> {work}")
    for epoch, report in runner.eval_reports[-1:]:
        print(f"  epoch {epoch}: " + ", ".join(report.headline()))
    for name, epoch, error in runner.hook_errors:
        print(f"✗ {name} hook failed after epoch {epoch}: {error}")
    return ExitStatus.OK


def cmd_test(config_path: str, checkpoint: str, out_path: str, overrides: Sequence[str] = (),
             allow_mismatch: bool = False) -> ExitStatus:
    cfg = load_run_config(config_path, overrides)
    model = _trained_model(cfg, checkpoint, allow_mismatch)
    split = _eval_split(cfg)
    dataset = build_dataset(cfg, split, **dataset_defaults(cfg, model))
    document = model.predict(dataset)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_predictions(out, document)
    print(f"✓ {model.task} predictions for data.{split} -> {out}")
    print(f"  evaluate with: fashionkit evaluate {model.task} {out} {dataset.annotation_path}")
    return ExitStatus.OK


def cmd_evaluate(task: str, predictions_path: str, annotations_path: str, out_path: str,
                 config_path: Optional[str] = None) -> ExitStatus:
    settings = None
    if config_path:
        settings = load_config(config_path).get("evaluation", None)
    if not Path(annotations_path).exists():
        raise DataError(f"annotations not found: {annotations_path}")
    predictions = evaluation.load_predictions(predictions_path)
    report = evaluation.evaluate_document(task, predictions, annotations_path, settings)
    written = evaluation.write_report(report, out_path)
    print(f"✓ {task} report -> {written[0]}")
    for line in report.headline():
        print(f"  {line}")
    return ExitStatus.OK


# ---------------------------------------------------------------------------
# demo

def _read_bgr(path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DataError(f"cannot read image {path}")
    return image


def _montage(paths: Sequence, size: int, highlight: Sequence[int] = ()) -> np.ndarray:
    tiles = []
    for index, path in enumerate(paths):
        tile = cv2.resize(_read_bgr(path), (size, size), interpolation=cv2.INTER_NEAREST)
        color = HIGHLIGHT if index in highlight else (255, 255, 255)
        tiles.append(cv2.copyMakeBorder(tile, 3, 3, 3, 3, cv2.BORDER_CONSTANT, value=color))
    return cv2.hconcat(tiles)


def _write_demo(image: np.ndarray, work_dir: str, name: str) -> Path:
    out = Path(work_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if not cv2.imwrite(str(path), image):
        raise OSError(f"failed to write {path}")
    return path


def _demo_attribute(cfg, model, image_path, work_dir, topk):
    dataset = build_dataset(cfg, _eval_split(cfg), **dataset_defaults(cfg, model))
    tensor, size = load_image(image_path, dataset.image_size)
    target = Path(image_path).resolve()
    record = next((r for r in dataset.landmark_lookup.values() if Path(r.image_path).resolve() == target), None)
    coords, visible = dataset.landmarks_for(record.image_id if record else "", size)
    scores = model.scores(tensor[None], coords[None], visible[None])[0]
    order = torch.argsort(scores, descending=True, stable=True)[:topk].tolist()
    canvas = _read_bgr(image_path)
    print(f"✓ top-{len(order)} attributes for {image_path}:")
    for rank, index in enumerate(order):
        print(f"  {rank + 1}. {dataset.attribute_names[index]}  {float(scores[index]):.4f}")
    if record is not None:
        for index, lm in enumerate(record.landmarks):
            if lm.visible:
                cv2.circle(canvas, (int(round(lm.x)), int(round(lm.y))), 2, PALETTE[index % len(PALETTE)], -1)
    else:
        print("  (no landmarks listed for this image, landmark features are zero)")
    return _write_demo(canvas, work_dir, f"demo_{Path(image_path).stem}.png")


def _demo_landmark(cfg, model, image_path, work_dir, topk):
    tensor, (width, height) = load_image(image_path, int(cfg.get("data.image_size", 64)))
    pred = model.locate(tensor[None])
    canvas = _read_bgr(image_path)
    print(f"✓ landmarks for {image_path} ({width}x{height}):")
    for index, ((px, py), logit) in enumerate(zip(to_pixels(pred.coords[0], width, height).tolist(),
                                                  pred.vis_logit[0])):
        prob = float(torch.sigmoid(logit))
        print(f"  {index}: ({px:.1f}, {py:.1f}) visible {prob:.2f}")
        color = PALETTE[index % len(PALETTE)]
        cv2.circle(canvas, (int(round(px)), int(round(py))), 2, color, -1 if prob >= 0.5 else 1)
    return _write_demo(canvas, work_dir, f"demo_{Path(image_path).stem}.png")


def _demo_retrieval(cfg, model, image_path, work_dir, topk):
    dataset = build_dataset(cfg, _eval_split(cfg), **dataset_defaults(cfg, model))
    gallery = [i for i, r in enumerate(dataset.records) if r.role == "gallery"]
    if not gallery:
        raise DataError(f"{dataset.annotation_path}: no gallery images to rank")
    query, _ = load_image(image_path, dataset.image_size)
    query_emb = model.embed(query[None]).numpy()
    gallery_emb = torch.cat([model.embed(torch.stack([dataset.image(i) for i in gallery[s:s + 32]]))
                             for s in range(0, len(gallery), 32)]).numpy()
    distances = cdist(query_emb, gallery_emb)[0]
    ranked = np.argsort(distances, kind="stable")[:topk]
    print(f"✓ top-{len(ranked)} gallery matches for {image_path}:")
    for rank, position in enumerate(ranked):
        record = dataset.records[gallery[position]]
        print(f"  {rank + 1}. {record.item_id}  {record.image_id}  {distances[position]:.4f}")
    paths = [image_path] + [dataset.records[gallery[p]].image_path for p in ranked]
    return _write_demo(_montage(paths, dataset.image_size, highlight=(0,)), work_dir,
                       f"demo_{Path(image_path).stem}.png")


def _demo_compat(cfg, model, image_path, work_dir, topk, question=0):
    dataset = build_dataset(cfg, _eval_split(cfg), **dataset_defaults(cfg, model))
    questions = dataset.data.fitb
    if not 0 <= question < len(questions):
        raise UsageError(f"--question {question} out of range, {len(questions)} FITB question(s)")
    q = questions[question]
    lookup = model.lookup(dataset, q.context + q.candidates)
    with model.inference():
        scores = compatibility.fitb_scores(q.context, q.candidates, lookup, model.spaces)
        answer = compatibility.fitb_answer(q, lookup, model.spaces)
    print(f"✓ FITB question {question}: context {', '.join(q.context)}")
    for index, (candidate, score) in enumerate(zip(q.candidates, scores)):
        marker = "->" if index == answer else "  "
        print(f"  {marker} {index}. {candidate}  mean distance {score:.4f}")
    paths = [dataset.data.image_path(i) for i in q.context + q.candidates]
    return _write_demo(_montage(paths, dataset.image_size, highlight=(len(q.context) + answer,)), work_dir,
                       f"demo_fitb_{question}.png")


_DEMOS = {"attribute": _demo_attribute, "landmark": _demo_landmark, "retrieval": _demo_retrieval}


def cmd_demo(config_path: str, checkpoint: str, image_path: Optional[str], work_dir: str,
             overrides: Sequence[str] = (), topk: int = 5, question: int = 0,
             allow_mismatch: bool = False) -> ExitStatus:
    cfg = load_run_config(config_path, overrides)
    model = _trained_model(cfg, checkpoint, allow_mismatch)
    if model.task == "compat":
        written = _demo_compat(cfg, model, image_path, work_dir, topk, question)
    else:
        if not image_path:
            raise UsageError(f"the {model.task} demo needs an image path")
        if not Path(image_path).is_file():
            raise DataError(f"image not found: {image_path}")
        written = _DEMOS[model.task](cfg, model, image_path, work_dir, topk)
    print(f"✓ annotated image -> {written}")
    return ExitStatus.OK


# ---------------------------------------------------------------------------
# zoo / synth

def cmd_zoo(action: str, model_id: Optional[str] = None, dest: str = "checkpoints",
            manifest: str = str(DEFAULT_MANIFEST)) -> ExitStatus:
    zoo = model_zoo.load_manifest(manifest)
    if action == "list":
        print(f"✓ {len(zoo.entries)} model(s) in {zoo.source}")
        for entry in zoo.entries:
            metrics = ", ".join(f"{k} {v:.4f}" for k, v in sorted(entry.metrics.items()))
            print(f"  {entry.model_id:24s} {entry.task:10s} {entry.byte_size:>12d}  {metrics}")
        return ExitStatus.OK
    if not model_id:
        raise UsageError("zoo fetch needs a model id")
    path = model_zoo.fetch(zoo, model_id, dest)
    print(f"✓ {model_id} verified -> {path}")
    return ExitStatus.OK


def cmd_synth(task: str, n: int, seed: int, out_dir: str, image_size: int = 64) -> ExitStatus:
    ds = synthetic_data.synth_dataset(task, n, seed, image_size)
    written = synthetic_data.write_synthetic(ds, out_dir)
    print(f"✓ synthetic {task} dataset: {len(ds.images)} image(s), {len(written)} file(s) -> {out_dir}")
    return ExitStatus.OK


# ---------------------------------------------------------------------------

def build_parser() -> FashionArgumentParser:
    parser = FashionArgumentParser(prog="fashionkit", description="Visual fashion analysis toolkit")
    common = FashionArgumentParser(add_help=False)
    common.add_argument("--work-dir", default="work_dirs/run", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("--allow-fingerprint-mismatch", action="store_true",
                        help="load a checkpoint trained with a different model config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a config")
    p.add_argument("config")
    p.add_argument("--trace", action="store_true", help="record the hook event trace")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=lambda a: cmd_train(a.config, a.override, a.work_dir, a.trace, a.resume,
                                            a.allow_fingerprint_mismatch))

    p = sub.add_parser("test", parents=[common], help="write a predictions document")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="predictions path (default <work-dir>/predictions.json)")
    p.set_defaults(func=lambda a: cmd_test(a.config, a.checkpoint, a.out or str(Path(a.work_dir) / "predictions.json"),
                                           a.override, a.allow_fingerprint_mismatch))

    p = sub.add_parser("evaluate", parents=[common], help="score a predictions document")
    p.add_argument("task", choices=evaluation.TASKS)
    p.add_argument("predictions")
    p.add_argument("annotations")
    p.add_argument("--out", help="report path (default <work-dir>/report.json)")
    p.add_argument("--config", help="config whose 'evaluation' section sets k values and thresholds")
    p.set_defaults(func=lambda a: cmd_evaluate(a.task, a.predictions, a.annotations,
                                               a.out or str(Path(a.work_dir) / "report.json"), a.config))

    p = sub.add_parser("demo", parents=[common], help="run a trained model on one image")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("image", nargs="?")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--question", type=int, default=0, help="FITB question index for the compat demo")
    p.set_defaults(func=lambda a: cmd_demo(a.config, a.checkpoint, a.image, a.work_dir, a.override, a.topk,
                                           a.question, a.allow_fingerprint_mismatch))

    p = sub.add_parser("zoo", help="list or fetch pretrained models")
    p.add_argument("action", choices=("list", "fetch"))
    p.add_argument("model_id", nargs="?")
    p.add_argument("--dest", default="checkpoints")
    p.add_argument("--manifest", default=str(DEFAULT_MANIFEST), help="manifest path or URL")
    p.set_defaults(func=lambda a: cmd_zoo(a.action, a.model_id, a.dest, a.manifest))

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("task")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda a: cmd_synth(a.task, a.n, a.seed, a.out, a.image_size))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="[%(asctime)s] %(levelname)s %(name)s: %(message)s",
                        datefmt="%H:%M:%S")
    try:
        args = build_parser().parse_args(argv)
        return int(args.func(args))
    except ConfigError as e:
        print(f"✗ {e}", file=sys.stderr)
        return ExitStatus.USAGE
    except DataError as e:
        print(f"✗ {e}", file=sys.stderr)
        return ExitStatus.DATA
    except (TrainingError, OSError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return ExitStatus.RUNTIME


if __name__ == "__main__":
    sys.exit(main())
