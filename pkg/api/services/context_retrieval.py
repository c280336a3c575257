"""
Context sample retrieval over the training split.

Every training record is given a polarity (positive = with disease) by one of
three strategies; a query then receives n positive and n negative context
samples drawn uniformly from those classes, never including itself.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import IndexDegenerateError, InvalidParameterError, RetrievalUnderflowError
from .data_pipeline import SampleRecord
from .text import contains_keyword

logger = logging.getLogger(__name__)

STRATEGIES = ("label", "keyword", "random")
POSITIVE = "positive"
NEGATIVE = "negative"
DEFAULT_KEYWORDS = ("Note",)


def stable_hash(*parts) -> int:
    """64-bit integer from sha256 of the parts; independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def classify_polarity(
    record: SampleRecord,
    strategy: str = "label",
    keywords: Iterable[str] = DEFAULT_KEYWORDS,
    seed: int = 0,
) -> str:
    if strategy == "label":
        return NEGATIVE if record.no_finding else POSITIVE
    if strategy == "keyword":
        return POSITIVE if contains_keyword(record.report, keywords) else NEGATIVE
    if strategy == "random":
        return POSITIVE if stable_hash("polarity", seed, record.id) & 1 else NEGATIVE
    raise InvalidParameterError(f"unknown retrieval strategy '{strategy}'")


@dataclass(frozen=True)
class ContextIndex:
    positives: Tuple[str, ...]
    negatives: Tuple[str, ...]
    strategy: str
    seed: int
    keywords: Tuple[str, ...] = DEFAULT_KEYWORDS
    records: Mapping[str, SampleRecord] = field(default_factory=dict, compare=False, repr=False)

    @property
    def counts(self) -> Dict[str, int]:
        return {POSITIVE: len(self.positives), NEGATIVE: len(self.negatives)}

    def polarity_of(self, sample_id: str) -> str:
        return POSITIVE if sample_id in set(self.positives) else NEGATIVE


@dataclass
class ContextSampleSet:
    query_id: str
    positives: List[SampleRecord]
    negatives: List[SampleRecord]
    positive_features: Optional[torch.Tensor] = None  # (n, C) global features
    negative_features: Optional[torch.Tensor] = None

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise InvalidParameterError("context set must hold as many positives as negatives")

    @property
    def n_pairs(self) -> int:
        return len(self.positives)

    @property
    def ids(self) -> Tuple[List[str], List[str]]:
        return [r.id for r in self.positives], [r.id for r in self.negatives]


def build_index(
    corpus: Sequence[SampleRecord],
    strategy: str = "label",
    seed: int = 0,
    keywords: Iterable[str] = DEFAULT_KEYWORDS,
) -> ContextIndex:
    """Assign a polarity to every train-split record; other splits are ignored."""
    if strategy not in STRATEGIES:
        raise InvalidParameterError(f"unknown retrieval strategy '{strategy}'")
    keywords = tuple(keywords)
    train = [r for r in corpus if r.split == "train"]
    if not train:
        raise InvalidParameterError("cannot build a context index from an empty training split")

    positives, negatives = [], []
    for record in train:
        polarity = classify_polarity(record, strategy, keywords, seed)
        (positives if polarity == POSITIVE else negatives).append(record.id)
    if not positives or not negatives:
        raise IndexDegenerateError(
            f"{strategy} strategy left an empty class ({len(positives)} positive, {len(negatives)} negative)"
        )
    logger.info(f"Context index ({strategy}): {len(positives)} positive, {len(negatives)} negative")
    return ContextIndex(
        positives=tuple(positives),
        negatives=tuple(negatives),
        strategy=strategy,
        seed=seed,
        keywords=keywords,
        records={r.id: r for r in train},
    )


def _require_seed(seed: int) -> None:
    if seed < 0:
        raise InvalidParameterError(f"context seed must be non-negative, got {seed}")


def epoch_stream(seed: int, epoch: int) -> np.random.Generator:
    """The shared per-epoch generator used by non-fixed retrieval."""
    _require_seed(seed)
    if epoch < 0:
        raise InvalidParameterError(f"epoch must be non-negative, got {epoch}")
    return np.random.default_rng([seed, epoch, 0x5EED])


def _draw(pool: Sequence[str], query_id: str, n: int, rng: np.random.Generator, polarity: str) -> List[str]:
    candidates = [i for i in pool if i != query_id]
    if len(candidates) < n:
        raise RetrievalUnderflowError(
            f"need {n} {polarity} context samples for '{query_id}', only {len(candidates)} available"
        )
    return [candidates[i] for i in rng.choice(len(candidates), size=n, replace=False)]


def retrieve(
    index: ContextIndex,
    query_id: str,
    n_pairs: int = 3,
    fixed_pair: bool = True,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> ContextSampleSet:
    """
    Draw n_pairs positives and n_pairs negatives for one query.

    With fixed_pair the draw depends only on (query id, seed). Otherwise it
    consumes rng, which callers share across an epoch (see epoch_stream).
    """
    if n_pairs < 1:
        raise InvalidParameterError(f"n_pairs must be >= 1, got {n_pairs}")
    _require_seed(seed)
    if fixed_pair:
        rng = np.random.default_rng([seed, stable_hash("fixed", query_id)])
    elif rng is None:
        rng = epoch_stream(seed, 0)
    positives = _draw(index.positives, query_id, n_pairs, rng, POSITIVE)
    negatives = _draw(index.negatives, query_id, n_pairs, rng, NEGATIVE)
    return ContextSampleSet(
        query_id=query_id,
        positives=[index.records[i] for i in positives],
        negatives=[index.records[i] for i in negatives],
    )
