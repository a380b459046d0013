"""
Task pipelines assembled from a backbone and a head.

Every pipeline exposes train_step(batch) -> loss, predict(dataset) -> a
predictions document (see evaluation.py) and evaluate(dataset, cfg).
"""

import contextlib
import logging
from typing import Any, Dict, Iterator, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

import compatibility
from backbones import LandmarkPooling, global_pool
from config_core import BACKBONES, HEADS, MODELS, Config, build_from_config
from evaluation import evaluate_document
from fashion_errors import ConfigError
from fashion_metrics import MetricReport
from heads import LandmarkPrediction, attribute_loss, landmark_loss, triplet_loss

logger = logging.getLogger(__name__)

PREDICT_BATCH = 32
DECIMALS = 6


def to_pixels(coords: torch.Tensor, width: float, height: float) -> torch.Tensor:
    """Normalized (..., 2) coordinates -> float64 pixels inside [0, size), also after rounding"""
    size = torch.tensor([float(width), float(height)], dtype=torch.float64)
    return torch.minimum(coords.detach().double() * size, size - 10.0 ** -DECIMALS)


def _rounded(values: torch.Tensor) -> List[float]:
    return [round(float(v), DECIMALS) for v in values.reshape(-1)]


def _chunks(count: int, size: int = PREDICT_BATCH) -> Iterator[range]:
    for start in range(0, count, size):
        yield range(start, min(start + size, count))


class FashionModel(nn.Module):
    task = ""

    def __init__(self, backbone: Dict[str, Any]):
        super().__init__()
        self.backbone = build_from_config(BACKBONES, backbone)

    @contextlib.contextmanager
    def inference(self):
        """Eval mode without autograd; restores the previous mode"""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                yield
        finally:
            self.train(was_training)

    def train_step(self, batch: Dict[str, Any]) -> torch.Tensor:
        raise NotImplementedError

    def predict(self, dataset) -> Dict[str, Any]:
        raise NotImplementedError

    def evaluate(self, dataset, cfg=None) -> MetricReport:
        return evaluate_document(self.task, self.predict(dataset), dataset.annotation_path, cfg)


@MODELS.register("AttributePredictor")
class AttributePredictor(FashionModel):
    """Attribute logits from global features, optionally joined with landmark-pooled features"""

    task = "attribute"

    def __init__(self, backbone: Dict[str, Any], head: Dict[str, Any], pooling: str = "global",
                 num_landmarks: Optional[int] = None, window: int = 3):
        super().__init__(backbone)
        if pooling not in ("global", "landmark"):
            raise ValueError(f"unknown pooling '{pooling}', expected 'global' or 'landmark'")
        channels = self.backbone.out_channels
        self.pooling = pooling
        self.num_landmarks = num_landmarks
        self.landmark_pooling = None
        in_features = channels
        if pooling == "landmark":
            if not num_landmarks:
                raise ValueError("landmark pooling needs num_landmarks")
            self.landmark_pooling = LandmarkPooling(num_landmarks, self.backbone.stride, window)
            in_features += num_landmarks * channels
        self.head = build_from_config(HEADS, head, in_features=in_features)

    def forward(self, images: torch.Tensor, landmarks: Optional[torch.Tensor] = None,
                visible: Optional[torch.Tensor] = None) -> torch.Tensor:
        features = self.backbone(images)
        pooled = global_pool(features)
        if self.landmark_pooling is not None:
            pooled = torch.cat([pooled, self.landmark_pooling(features, landmarks, visible)], dim=1)
        return self.head(pooled)

    def train_step(self, batch):
        logits = self(batch["image"], batch.get("landmarks"), batch.get("visible"))
        return attribute_loss(logits, batch["labels"])

    def scores(self, images, landmarks=None, visible=None) -> torch.Tensor:
        with self.inference():
            return torch.sigmoid(self(images, landmarks, visible))

    def predict(self, dataset):
        table = {}
        for rows in _chunks(len(dataset)):
            samples = [dataset[i] for i in rows]
            scores = self.scores(torch.stack([s["image"] for s in samples]),
                                 torch.stack([s["landmarks"] for s in samples]),
                                 torch.stack([s["visible"] for s in samples]))
            for index, row in zip(rows, scores):
                table[dataset.records[index].image_id] = _rounded(row)
        return {"task": self.task, "scores": table}


@MODELS.register("LandmarkDetector")
class LandmarkDetector(FashionModel):
    task = "landmark"

    def __init__(self, backbone: Dict[str, Any], head: Dict[str, Any]):
        super().__init__(backbone)
        self.head = build_from_config(HEADS, head, in_features=self.backbone.out_channels)
        self.num_landmarks = self.head.num_landmarks

    def forward(self, images: torch.Tensor) -> LandmarkPrediction:
        return self.head(self.backbone(images))

    def train_step(self, batch):
        return landmark_loss(self(batch["image"]), batch["coords"], batch["visible"])

    def locate(self, images: torch.Tensor) -> LandmarkPrediction:
        with self.inference():
            return self(images)

    def predict(self, dataset):
        table = {}
        for rows in _chunks(len(dataset)):
            pred = self.locate(torch.stack([dataset[i]["image"] for i in rows]))
            for index, coords, logits in zip(rows, pred.coords, pred.vis_logit):
                width, height = dataset.records[index].image_size
                table[dataset.records[index].image_id] = [
                    [round(float(x), DECIMALS), round(float(y), DECIMALS), round(float(torch.sigmoid(v)), DECIMALS)]
                    for (x, y), v in zip(to_pixels(coords, width, height), logits)]
        return {"task": self.task, "landmarks": table}


@MODELS.register("RetrievalEmbedder")
class RetrievalEmbedder(FashionModel):
    task = "retrieval"

    def __init__(self, backbone: Dict[str, Any], head: Dict[str, Any], margin: float = 0.3):
        super().__init__(backbone)
        if margin <= 0:
            raise ValueError(f"triplet margin must be positive, got {margin}")
        self.head = build_from_config(HEADS, head, in_features=self.backbone.out_channels)
        self.margin = margin

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(global_pool(self.backbone(images)))

    def train_step(self, batch):
        n = batch["anchor"].shape[0]
        embeddings = self(torch.cat([batch["anchor"], batch["positive"], batch["negative"]]))
        return triplet_loss(embeddings[:n], embeddings[n:2 * n], embeddings[2 * n:], self.margin)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        with self.inference():
            return self(images)

    def predict(self, dataset):
        table = {}
        for rows in _chunks(len(dataset.records)):
            embeddings = self.embed(torch.stack([dataset.image(i) for i in rows]))
            for index, row in zip(rows, embeddings):
                table[dataset.records[index].image_id] = _rounded(row)
        return {"task": self.task, "embeddings": table}


@MODELS.register("CompatibilityModel")
class CompatibilityModel(FashionModel):
    """Shared item embedding with per-type-pair projections"""

    task = "compat"

    def __init__(self, backbone: Dict[str, Any], embed_dim: int = 64, strategy: str = "fully_connected",
                 proj_dim: Optional[int] = None, margin: float = 0.2,
                 types: Sequence[str] = ("top", "bottom", "shoe")):
        super().__init__(backbone)
        if margin <= 0:
            raise ValueError(f"margin must be positive, got {margin}")
        self.embed_fc = nn.Linear(self.backbone.out_channels, embed_dim)
        self.spaces = compatibility.TypeSpaces(types, embed_dim, strategy, proj_dim)
        self.margin = margin

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.embed_fc(global_pool(self.backbone(images))), p=2, dim=-1)

    def train_step(self, batch):
        n = batch["anchor"].shape[0]
        embeddings = self(torch.cat([batch["anchor"], batch["positive"], batch["negative"]]))
        return compatibility.compat_triplet_loss(self.spaces, embeddings[:n], embeddings[n:2 * n],
                                                 embeddings[2 * n:], batch["anchor_type"],
                                                 batch["positive_type"], self.margin)

    def embed_items(self, dataset, item_ids: Sequence[str]) -> Dict[str, torch.Tensor]:
        item_ids = list(item_ids)
        table = {}
        with self.inference():
            for rows in _chunks(len(item_ids)):
                embeddings = self(torch.stack([dataset.item_image(item_ids[i]) for i in rows]))
                for i, row in zip(rows, embeddings):
                    table[item_ids[i]] = row
        return table

    def lookup(self, dataset, item_ids: Sequence[str]):
        table = self.embed_items(dataset, item_ids)
        return lambda item_id: (table[item_id], dataset.item_type(item_id))

    def predict(self, dataset):
        data = dataset.data
        needed = sorted({i for q in data.fitb for i in q.context + q.candidates} | {i for q in data.compat for i in q.items})
        lookup = self.lookup(dataset, needed)
        with self.inference():
            answers = [compatibility.fitb_answer(q, lookup, self.spaces) for q in data.fitb]
            scores = [round(compatibility.outfit_score(q.items, lookup, self.spaces), DECIMALS) for q in data.compat]
        return {"task": self.task, "fitb": answers, "compat_scores": scores}


def build_model(cfg: Config) -> FashionModel:
    """Seed torch and build the pipeline named by model.type"""
    if "model.type" not in cfg:
        raise ConfigError("missing config key 'model.type'", path="model.type")
    torch.manual_seed(int(cfg.get("seed", 0)))
    return build_from_config(MODELS, cfg.get("model"))
