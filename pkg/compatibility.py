"""
Type-aware outfit compatibility embeddings.

Each unordered pair of garment types gets its own projection of the shared
item embedding; pairs outside the configured types fall back to the
"general" space, which is the shared embedding itself.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

GENERAL = "general"
STRATEGIES = ("fully_connected", "learned_metric")

EmbedLookup = Callable[[str], Tuple[torch.Tensor, str]]


def pair_key(type_a: str, type_b: str) -> str:
    first, second = sorted((type_a, type_b))
    return f"{first}|{second}"


@dataclass
class TypePairSpace:
    pair: Tuple[str, str]
    strategy: str
    linear: Optional[nn.Linear] = None
    weight: Optional[torch.Tensor] = None

    @property
    def is_general(self) -> bool:
        return self.linear is None and self.weight is None


def compat_project(e: torch.Tensor, space: TypePairSpace) -> torch.Tensor:
    if space.linear is not None:
        return space.linear(e)
    if space.weight is not None:
        return e * space.weight.pow(2)
    return e


def compat_distance(e1: torch.Tensor, e2: torch.Tensor, space: TypePairSpace) -> torch.Tensor:
    """Euclidean distance in the pair's projected space"""
    return torch.linalg.vector_norm(compat_project(e1, space) - compat_project(e2, space), dim=-1)


class TypeSpaces(nn.Module):
    """One projection per unordered type pair plus the general space"""

    def __init__(self, types: Sequence[str], embed_dim: int, strategy: str = "fully_connected",
                 proj_dim: Optional[int] = None):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown projection strategy '{strategy}', expected one of {', '.join(STRATEGIES)}")
        self.types = tuple(types)
        self.strategy = strategy
        keys = sorted({pair_key(a, b) for i, a in enumerate(self.types) for b in self.types[i:]})
        if strategy == "fully_connected":
            self.linears = nn.ModuleDict({k: nn.Linear(embed_dim, proj_dim or embed_dim) for k in keys})
            self.weights = nn.ParameterDict()
        else:
            self.linears = nn.ModuleDict()
            self.weights = nn.ParameterDict({k: nn.Parameter(torch.ones(embed_dim)) for k in keys})
        self._warned = set()

    def space(self, type_a: str, type_b: str) -> TypePairSpace:
        key = pair_key(type_a, type_b)
        pair = tuple(sorted((type_a, type_b)))
        if key in self.linears:
            return TypePairSpace(pair, self.strategy, linear=self.linears[key])
        if key in self.weights:
            return TypePairSpace(pair, self.strategy, weight=self.weights[key])
        if key not in self._warned:
            self._warned.add(key)
            logger.warning("no projection for type pair %s, using the general space", key)
        return TypePairSpace(pair, self.strategy)

    def general(self) -> TypePairSpace:
        return TypePairSpace((GENERAL, GENERAL), self.strategy)

    def distance(self, e1: torch.Tensor, e2: torch.Tensor, type_a: str, type_b: str) -> torch.Tensor:
        return compat_distance(e1, e2, self.space(type_a, type_b))

    def batch_distance(self, e1: torch.Tensor, e2: torch.Tensor, types_a: Sequence[str],
                       types_b: Sequence[str]) -> torch.Tensor:
        """Row-wise distances with a per-row type pair"""
        keys = [pair_key(a, b) for a, b in zip(types_a, types_b)]
        out = e1.new_zeros(len(keys))
        for key in sorted(set(keys)):
            rows = torch.tensor([i for i, k in enumerate(keys) if k == key], dtype=torch.long, device=e1.device)
            type_a, type_b = key.split("|")
            out = out.index_put((rows,), self.distance(e1[rows], e2[rows], type_a, type_b))
        return out


def compat_triplet_loss(spaces: TypeSpaces, anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                        anchor_types: Sequence[str], positive_types: Sequence[str],
                        margin: float = 0.2) -> torch.Tensor:
    """Margin loss in each triplet's type-pair space plus the same loss in the general space.

    The negative shares the positive's type, so both distances use one space.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    d_pos = spaces.batch_distance(anchor, positive, anchor_types, positive_types)
    d_neg = spaces.batch_distance(anchor, negative, anchor_types, positive_types)
    general = spaces.general()
    g_pos = compat_distance(anchor, positive, general)
    g_neg = compat_distance(anchor, negative, general)
    return F.relu(d_pos - d_neg + margin).mean() + F.relu(g_pos - g_neg + margin).mean()


def _mean_distance(candidate: str, others: Sequence[str], lookup: EmbedLookup, spaces: TypeSpaces) -> float:
    emb, kind = lookup(candidate)
    total = 0.0
    for other in others:
        other_emb, other_kind = lookup(other)
        total += float(spaces.distance(emb, other_emb, kind, other_kind))
    return total / len(others)


def fitb_scores(context: Sequence[str], candidates: Sequence[str], lookup: EmbedLookup,
                spaces: TypeSpaces) -> List[float]:
    if not context:
        raise ValueError("FITB question has an empty context")
    return [_mean_distance(c, context, lookup, spaces) for c in candidates]


def fitb_answer(question, lookup: EmbedLookup, spaces: TypeSpaces) -> int:
    """Candidate with the lowest mean distance to the context; ties go to the lower index"""
    scores = fitb_scores(question.context, question.candidates, lookup, spaces)
    best = 0
    for index, score in enumerate(scores):
        if score < scores[best]:
            best = index
    return best


def outfit_score(items: Sequence[str], lookup: EmbedLookup, spaces: TypeSpaces) -> float:
    """Negated mean pairwise distance; higher means more compatible"""
    if len(items) < 2:
        raise ValueError("an outfit score needs at least 2 items")
    distances = []
    for i, a in enumerate(items):
        emb_a, kind_a = lookup(a)
        for b in items[i + 1:]:
            emb_b, kind_b = lookup(b)
            distances.append(float(spaces.distance(emb_a, emb_b, kind_a, kind_b)))
    return -sum(distances) / len(distances)
