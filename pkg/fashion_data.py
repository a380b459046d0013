"""
Torch datasets over parsed annotation files.

Images are read with OpenCV, converted to RGB, resized to a square input
size and scaled to [-1, 1]. Random choices (retrieval negatives) are a pure
function of (seed, epoch, index) so a resumed run sees the same batches.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

from annotation_io import load_attribute_file, load_landmark_file, load_polyvore, parse_retrieval_split
from config_core import DATASETS
from fashion_errors import DataError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_image(path: PathLike, size: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Read an image as a (3, size, size) float tensor in [-1, 1]; returns (tensor, (w, h))"""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DataError(f"cannot read image {path}")
    height, width = image.shape[:2]
    image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    if (width, height) != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
    tensor = torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()
    return tensor, (width, height)


class FashionDataset(Dataset):
    """Shared image cache and epoch bookkeeping"""

    task = ""

    def __init__(self, image_size: int = 64, seed: int = 0, cache: bool = True):
        if image_size < 16:
            raise ValueError(f"image_size must be at least 16, got {image_size}")
        self.image_size = int(image_size)
        self.seed = int(seed)
        self.epoch = 0
        self.cache = cache
        self._images: Dict[str, Tuple[torch.Tensor, Tuple[int, int]]] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng((self.seed, self.epoch, int(index)))

    def read(self, path: PathLike) -> Tuple[torch.Tensor, Tuple[int, int]]:
        key = str(path)
        if key in self._images:
            return self._images[key]
        loaded = load_image(key, self.image_size)
        if self.cache:
            self._images[key] = loaded
        return loaded


@DATASETS.register("AttributeDataset")
class AttributeDataset(FashionDataset):
    task = "attribute"

    def __init__(self, ann_file: PathLike, landmark_file: Optional[PathLike] = None,
                 image_root: Optional[PathLike] = None, num_landmarks: Optional[int] = None,
                 image_size: int = 64, seed: int = 0, cache: bool = True):
        super().__init__(image_size, seed, cache)
        self.annotation_path = Path(ann_file)
        self.attribute_names, self.records = load_attribute_file(ann_file, image_root)
        if not self.records:
            raise ValidationError(f"{ann_file}: attribute dataset is empty")
        self.landmark_lookup = {}
        self.num_landmarks = num_landmarks or 0
        if landmark_file is not None:
            file_landmarks, landmark_records = load_landmark_file(landmark_file, image_root)
            if num_landmarks is not None and file_landmarks != num_landmarks:
                raise ValidationError(f"{landmark_file}: file has {file_landmarks} landmarks, "
                                      f"model expects {num_landmarks}")
            self.num_landmarks = file_landmarks
            self.landmark_lookup = {r.image_id: r for r in landmark_records}

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def __len__(self) -> int:
        return len(self.records)

    def landmarks_for(self, image_id: str, original_size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pixel landmarks rescaled to the network input; all invisible when unlisted"""
        coords = torch.zeros(self.num_landmarks, 2)
        visible = torch.zeros(self.num_landmarks)
        record = self.landmark_lookup.get(image_id)
        if record is None:
            return coords, visible
        width, height = original_size
        for index, landmark in enumerate(record.landmarks):
            coords[index, 0] = landmark.x * self.image_size / width
            coords[index, 1] = landmark.y * self.image_size / height
            visible[index] = float(landmark.visible)
        return coords, visible

    def __getitem__(self, index: int) -> Dict[str, Any]:
        record = self.records[index]
        image, size = self.read(record.image_path)
        coords, visible = self.landmarks_for(record.image_id, size)
        return {"image": image, "labels": torch.tensor(record.labels, dtype=torch.float32),
                "landmarks": coords, "visible": visible, "index": index}


@DATASETS.register("LandmarkDataset")
class LandmarkDataset(FashionDataset):
    task = "landmark"

    def __init__(self, ann_file: PathLike, image_root: Optional[PathLike] = None,
                 image_size: int = 64, seed: int = 0, cache: bool = True):
        super().__init__(image_size, seed, cache)
        self.annotation_path = Path(ann_file)
        self.num_landmarks, self.records = load_landmark_file(ann_file, image_root)
        if not self.records:
            raise ValidationError(f"{ann_file}: landmark dataset is empty")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        record = self.records[index]
        image, _ = self.read(record.image_path)
        width, height = record.image_size
        coords = torch.tensor([[lm.x / width, lm.y / height] if lm.visible else [0.0, 0.0]
                               for lm in record.landmarks], dtype=torch.float32)
        visible = torch.tensor([float(lm.visible) for lm in record.landmarks])
        return {"image": image, "coords": coords, "visible": visible, "index": index}


@DATASETS.register("RetrievalDataset")
class RetrievalDataset(FashionDataset):
    """Triplets over the selected roles; negatives are re-drawn every epoch"""

    task = "retrieval"

    def __init__(self, ann_file: PathLike, image_root: Optional[PathLike] = None,
                 roles: Sequence[str] = ("train",), image_size: int = 64, seed: int = 0, cache: bool = True):
        super().__init__(image_size, seed, cache)
        self.annotation_path = Path(ann_file)
        self.records = parse_retrieval_split(ann_file, image_root)
        self.samples = [i for i, r in enumerate(self.records) if r.role in roles]
        if not self.samples:
            raise ValidationError(f"{ann_file}: no images with role(s) {', '.join(roles)}")
        self.by_item: Dict[str, List[int]] = {}
        for index in self.samples:
            self.by_item.setdefault(self.records[index].item_id, []).append(index)
        if len(self.by_item) < 2:
            raise ValidationError(f"{ann_file}: triplet sampling needs at least 2 items")
        self.items = sorted(self.by_item)

    def __len__(self) -> int:
        return len(self.samples)

    def image(self, record_index: int) -> torch.Tensor:
        return self.read(self.records[record_index].image_path)[0]

    def __getitem__(self, index: int) -> Dict[str, Any]:
        rng = self._rng(index)
        anchor = self.samples[index]
        item = self.records[anchor].item_id
        same = [i for i in self.by_item[item] if i != anchor] or [anchor]
        positive = same[int(rng.integers(len(same)))]
        others = [i for i in self.items if i != item]
        negative_item = others[int(rng.integers(len(others)))]
        pool = self.by_item[negative_item]
        negative = pool[int(rng.integers(len(pool)))]
        return {"anchor": self.image(anchor), "positive": self.image(positive),
                "negative": self.image(negative), "index": index}


@DATASETS.register("PolyvoreDataset")
class PolyvoreDataset(FashionDataset):
    """Type-aware (anchor, positive, negative) item triplets.

    Triplets come from incompatible compatibility questions (the outfit they
    were derived from supplies anchor and positive, the swapped-in item is the
    negative) and from FITB questions (context, answer, distractor).
    Optionally each outfit pair also gets a random same-type negative.
    """

    task = "compat"

    def __init__(self, root: PathLike, split: Optional[str] = None, image_size: int = 64, seed: int = 0,
                 outfit_negatives: bool = False, cache: bool = True):
        super().__init__(image_size, seed, cache)
        self.annotation_path = Path(root)
        self.data = load_polyvore(root, split)
        self.outfit_negatives = outfit_negatives
        self.by_type: Dict[str, List[str]] = {}
        for item_id, type_label in sorted(self.data.catalog.items()):
            self.by_type.setdefault(type_label, []).append(item_id)
        self.triplets: List[Tuple[str, str, Optional[str]]] = self._question_triplets()
        if outfit_negatives:
            for outfit in self.data.outfits:
                for anchor in outfit.items:
                    for positive in outfit.items:
                        if anchor.item_id != positive.item_id:
                            self.triplets.append((anchor.item_id, positive.item_id, None))
        if not self.triplets:
            raise ValidationError(f"{root}: no training triplets could be derived")

    def _question_triplets(self) -> List[Tuple[str, str, Optional[str]]]:
        triplets = []
        owners: Dict[str, List[int]] = {}
        for index, outfit in enumerate(self.data.outfits):
            for item in outfit.items:
                owners.setdefault(item.item_id, []).append(index)
        for question in self.data.compat:
            if question.label:
                continue
            asked = set(question.items)
            shared_counts: Dict[int, int] = {}
            for item_id in asked:
                for owner in owners.get(item_id, []):
                    shared_counts[owner] = shared_counts.get(owner, 0) + 1
            for owner, shared in sorted(shared_counts.items()):
                outfit_ids = {i.item_id for i in self.data.outfits[owner].items}
                if shared != len(asked) - 1 or len(outfit_ids) != len(asked):
                    continue
                (removed,), (inserted,) = tuple(outfit_ids - asked), tuple(asked - outfit_ids)
                for anchor in sorted(asked & outfit_ids):
                    triplets.append((anchor, removed, inserted))
                break
        for question in self.data.fitb:
            answer = question.candidates[question.answer_index]
            for anchor in question.context:
                for index, distractor in enumerate(question.candidates):
                    if index != question.answer_index:
                        triplets.append((anchor, answer, distractor))
        return triplets

    def __len__(self) -> int:
        return len(self.triplets)

    def item_type(self, item_id: str) -> str:
        return self.data.catalog[item_id]

    def item_image(self, item_id: str) -> torch.Tensor:
        return self.read(self.data.image_path(item_id))[0]

    def __getitem__(self, index: int) -> Dict[str, Any]:
        anchor, positive, negative = self.triplets[index]
        if negative is None:
            rng = self._rng(index)
            pool = [i for i in self.by_type[self.item_type(positive)] if i != positive]
            negative = pool[int(rng.integers(len(pool)))] if pool else positive
        return {"anchor": self.item_image(anchor), "positive": self.item_image(positive),
                "negative": self.item_image(negative), "anchor_type": self.item_type(anchor),
                "positive_type": self.item_type(positive), "index": index}
