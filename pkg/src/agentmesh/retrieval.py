"""Two-stage search over a registry snapshot plus the ranking metrics.

Stage 1 is an exhaustive cosine scan with a deterministic token-hash
embedding (dimension 256), so identical inputs always rank identically.
Stage 2 hands the stage-1 candidates to a pluggable re-rank provider; a
provider failure falls back to the stage-1 ordering unchanged.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Protocol, Sequence

import numpy as np

from ._util import tokens
from .protocol import ResourceKind, ResourceManifest

logger = logging.getLogger(__name__)

DIM = 256
SCORE_DECIMALS = 12  # cosines quantized so equal values tie regardless of
                     # float accumulation order; ties then break by id


def _bucket(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % DIM


def embed(text: str) -> np.ndarray:
    """Deterministic bag-of-hashed-tokens embedding, unit L2 norm.

    Empty or token-free text maps to the zero vector.
    """
    vec = np.zeros(DIM, dtype=np.float64)
    for t in tokens(text):
        vec[_bucket(t)] += 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


class Stage(str, Enum):
    RETRIEVED = "retrieved"
    RERANKED = "reranked"


@dataclass
class RankedList:
    query_id: str
    items: list[tuple[str, float]]
    stage: Stage

    def __post_init__(self):
        ids = [rid for rid, _ in self.items]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate resource_ids in ranked list")
        scores = [s for _, s in self.items]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValueError("ranked list scores must be non-increasing")

    def ids(self) -> list[str]:
        return [rid for rid, _ in self.items]


@dataclass(frozen=True)
class IndexedResource:
    resource_id: str
    kind: ResourceKind
    text: str
    text_tokens: frozenset[str]


class SearchIndex:
    """Immutable embedding index over active manifests; rebuild on mutation."""

    def __init__(self, manifests: Iterable[ResourceManifest]):
        self.entries: list[IndexedResource] = []
        rows = []
        for m in sorted(manifests, key=lambda m: m.resource_id):
            text = m.search_text()
            self.entries.append(IndexedResource(
                resource_id=m.resource_id,
                kind=m.kind,
                text=text,
                text_tokens=frozenset(tokens(text)),
            ))
            rows.append(embed(text))
        self._matrix = np.vstack(rows) if rows else np.zeros((0, DIM))

    def __len__(self) -> int:
        return len(self.entries)

    def scores(self, query_vec: np.ndarray) -> np.ndarray:
        return self._matrix @ query_vec


def retrieve(
    index: SearchIndex,
    query: str,
    k: int,
    *,
    query_id: str = "",
    kind: ResourceKind | None = None,
    required_keywords: Sequence[str] | None = None,
) -> RankedList:
    """Exhaustive cosine top-k over the index; ties broken by resource_id.

    ``kind`` and ``required_keywords`` filter candidates before ranking:
    a surviving entry must have the requested kind and contain every
    required keyword token in its text.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    needed = {t for kw in (required_keywords or []) for t in tokens(kw)}
    qvec = embed(query)
    scores = index.scores(qvec)
    scored: list[tuple[float, str]] = []
    for i, entry in enumerate(index.entries):
        if kind is not None and entry.kind is not kind:
            continue
        if needed and not needed.issubset(entry.text_tokens):
            continue
        scored.append((round(float(scores[i]), SCORE_DECIMALS), entry.resource_id))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return RankedList(query_id=query_id, items=[(rid, s) for s, rid in scored[:k]],
                      stage=Stage.RETRIEVED)


@dataclass(frozen=True)
class RerankCandidate:
    resource_id: str
    text: str
    score: float


class RerankProvider(Protocol):
    name: str

    def rank(self, query: str, context: str,
             candidates: Sequence[RerankCandidate]) -> list[tuple[str, float]]:
        """Return (resource_id, score in [0,1]) pairs; may truncate."""
        ...


class IdentityReranker:
    """Keeps the stage-1 ordering and scores."""

    name = "identity"

    def rank(self, query, context, candidates):
        return [(c.resource_id, c.score) for c in candidates]


class LexicalOverlapReranker:
    """Scores each candidate by query-token coverage of its description."""

    name = "lexical_overlap"

    def rank(self, query, context, candidates):
        q = set(tokens(query))
        if not q:
            return [(c.resource_id, c.score) for c in candidates]
        out = []
        for c in candidates:
            overlap = len(q & set(tokens(c.text))) / len(q)
            out.append((c.resource_id, overlap))
        return out


def rerank(
    query: str,
    context: str,
    candidates: RankedList,
    provider: RerankProvider,
    texts: dict[str, str] | None = None,
) -> RankedList:
    """Stage 2: re-order stage-1 candidates through the provider.

    Ids the provider leaves out are dropped; ids it invents are ignored; any
    provider exception falls back to the input ranking unchanged (logged).
    """
    if candidates.stage is not Stage.RETRIEVED:
        raise ValueError("rerank expects a stage-1 (retrieved) list")
    texts = texts or {}
    inputs = [RerankCandidate(rid, texts.get(rid, ""), score)
              for rid, score in candidates.items]
    try:
        proposed = provider.rank(query, context, inputs)
    except Exception:
        logger.warning("rerank provider %r failed; falling back to stage-1 order",
                       getattr(provider, "name", provider), exc_info=True)
        return RankedList(candidates.query_id, list(candidates.items), Stage.RERANKED)
    known = {c.resource_id for c in inputs}
    seen: set[str] = set()
    items: list[tuple[str, float]] = []
    for rid, score in proposed:
        if rid not in known or rid in seen:
            continue
        seen.add(rid)
        items.append((rid, min(1.0, max(0.0, float(score)))))
    items.sort(key=lambda pair: (-pair[1], pair[0]))
    return RankedList(candidates.query_id, items, Stage.RERANKED)


def ndcg_at_k(ranking: Sequence[str], relevance: dict[str, float], k: int) -> float:
    """Normalized discounted cumulative gain with 2^grade - 1 gains.

    Returns 0.0 when the ideal DCG is zero (no positively graded items).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for i, rid in enumerate(ranking[:k]):
        grade = relevance.get(rid, 0.0)
        dcg += (2.0 ** grade - 1.0) / math.log2(i + 2)
    ideal = sorted(relevance.values(), reverse=True)
    idcg = 0.0
    for i, grade in enumerate(ideal[:k]):
        idcg += (2.0 ** grade - 1.0) / math.log2(i + 2)
    return dcg / idcg if idcg > 0.0 else 0.0


def recall_at_k(ranking: Sequence[str], relevant: set[str], k: int) -> float:
    """Fraction of the relevant set present in the top k (1.0 for empty set)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        logger.debug("recall_at_k with empty relevant set; returning 1.0 by convention")
        return 1.0
    hits = sum(1 for rid in ranking[:k] if rid in relevant)
    return hits / len(relevant)
