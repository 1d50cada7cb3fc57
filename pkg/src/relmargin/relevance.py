"""Graded relevance between annotated items, and the margins derived from it.

Each item (a video-caption pair) carries a set of verb class ids and a set
of noun class ids.  The relevance of two items is the mean of the Jaccard
overlaps of their verb sets and of their noun sets, so it is a grade in
[0, 1]: 1 for identical class annotations, 0 for fully disjoint ones.
The separation margin used by the adaptive triplet loss is ``1 - relevance``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

#: Loss/margin levels: whole-annotation relevance, or one part of speech
#: with the opposite part treated as fully matching.
LEVELS = ("global", "verb", "noun")


@dataclass(frozen=True)
class CaptionAnnotation:
    """Verb and noun class ids attached to one item.

    Class ids are kept in their original order (so "the first noun class"
    is well defined for analysis tooling); all relevance arithmetic treats
    them as sets.  Ids must be non-negative and duplicate-free.
    """

    item_id: str
    verbs: tuple[int, ...]
    nouns: tuple[int, ...]

    def __init__(self, item_id: str, verbs: Iterable[int], nouns: Iterable[int]):
        object.__setattr__(self, "item_id", str(item_id))
        object.__setattr__(self, "verbs", _as_class_tuple(verbs, "verbs"))
        object.__setattr__(self, "nouns", _as_class_tuple(nouns, "nouns"))

    @property
    def verb_set(self) -> frozenset[int]:
        return frozenset(self.verbs)

    @property
    def noun_set(self) -> frozenset[int]:
        return frozenset(self.nouns)


def _as_class_tuple(classes: Iterable[int], name: str) -> tuple[int, ...]:
    out = tuple(int(c) for c in classes)
    if any(c < 0 for c in out):
        raise ValueError(f"{name} must contain non-negative class ids, got {out}")
    if len(set(out)) != len(out):
        raise ValueError(f"{name} must be duplicate-free, got {out}")
    return out


def _jaccard(a: frozenset[int], b: frozenset[int]) -> float:
    """Intersection-over-union of two class sets.

    Two empty sets count as vacuously identical (1.0); exactly one empty
    set gives 0.0.  The integer counts are compared before dividing so the
    result is exactly 1.0 whenever the sets are equal.
    """
    if not a and not b:
        return 1.0
    inter = len(a & b)
    union = len(a | b)
    if inter == union:
        return 1.0
    return inter / union


def relevance(a: CaptionAnnotation, b: CaptionAnnotation) -> float:
    """Graded relevance of two annotated items: the mean of the verb-set
    and noun-set Jaccard overlaps.  Symmetric, in [0, 1], and exactly 1.0
    iff both class sets coincide."""
    return 0.5 * (_jaccard(a.verb_set, b.verb_set) + _jaccard(a.noun_set, b.noun_set))


def pos_relevance(a: CaptionAnnotation, b: CaptionAnnotation, part: str) -> float:
    """Relevance restricted to one part of speech.

    The selected part contributes its Jaccard overlap; the opposite part is
    treated as fully matching (contributes 1), so the result is
    ``(J_part + 1) / 2`` and always lies in [0.5, 1].
    """
    if part == "verb":
        j = _jaccard(a.verb_set, b.verb_set)
    elif part == "noun":
        j = _jaccard(a.noun_set, b.noun_set)
    else:
        raise ValueError(f"part must be 'verb' or 'noun', got {part!r}")
    return 0.5 * (j + 1.0)


def margin_for(a: CaptionAnnotation, n: CaptionAnnotation, level: str = "global") -> float:
    """Separation margin for a triplet with anchor ``a`` and negative ``n``.

    The groundtruth pair is taken as maximally relevant, so the margin is
    ``1 - rel(a, n)`` where ``rel`` is `relevance` at the global level and
    `pos_relevance` at the verb/noun level.  Always in [0, 1].
    """
    if level == "global":
        return 1.0 - relevance(a, n)
    if level in ("verb", "noun"):
        return 1.0 - pos_relevance(a, n, level)
    raise ValueError(f"level must be one of {LEVELS}, got {level!r}")


@dataclass(frozen=True)
class RelevanceMatrix:
    """Dense query-by-item grid of relevance grades in [0, 1]."""

    queries: tuple[str, ...]
    items: tuple[str, ...]
    grid: np.ndarray  # shape (len(queries), len(items)), float64

    def __post_init__(self):
        if self.grid.shape != (len(self.queries), len(self.items)):
            raise ValueError(
                f"grid shape {self.grid.shape} does not match "
                f"{len(self.queries)} queries x {len(self.items)} items"
            )
        if self.grid.size and (self.grid.min() < 0.0 or self.grid.max() > 1.0):
            raise ValueError("relevance grid entries must lie in [0, 1]")

    def query_index(self, query_id: str) -> int:
        try:
            return self.queries.index(query_id)
        except ValueError:
            raise KeyError(f"unknown query id {query_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self.items.index(item_id)
        except ValueError:
            raise KeyError(f"unknown item id {item_id!r}") from None

    def row(self, query_id: str) -> np.ndarray:
        return self.grid[self.query_index(query_id)]


def relevance_matrix(
    queries: Sequence[CaptionAnnotation], items: Sequence[CaptionAnnotation]
) -> RelevanceMatrix:
    """Batch form of `relevance`: grid[i, j] = relevance(queries[i], items[j])."""
    if not queries or not items:
        raise ValueError("relevance_matrix requires non-empty query and item lists")
    grid = 0.5 * (
        pairwise_jaccard(queries, items, "verb") + pairwise_jaccard(queries, items, "noun")
    )
    return RelevanceMatrix(
        queries=tuple(a.item_id for a in queries),
        items=tuple(a.item_id for a in items),
        grid=grid,
    )


def pairwise_relevance(
    queries: Sequence[CaptionAnnotation], items: Sequence[CaptionAnnotation]
) -> np.ndarray:
    """Raw relevance grid without the id bookkeeping of `relevance_matrix`."""
    return 0.5 * (
        pairwise_jaccard(queries, items, "verb") + pairwise_jaccard(queries, items, "noun")
    )


def pairwise_jaccard(
    a: Sequence[CaptionAnnotation], b: Sequence[CaptionAnnotation], part: str
) -> np.ndarray:
    """Jaccard overlap of the ``part`` class sets for every (a, b) pair.

    Class sets are packed into uint64 bitmasks so the whole grid is a few
    vectorized popcounts; equal sets come out exactly 1.0 because the
    integer intersection/union counts are compared before dividing.
    """
    if part not in ("verb", "noun"):
        raise ValueError(f"part must be 'verb' or 'noun', got {part!r}")
    sets_a = [ann.verbs if part == "verb" else ann.nouns for ann in a]
    sets_b = [ann.verbs if part == "verb" else ann.nouns for ann in b]
    n_classes = max((max(s) + 1 for s in sets_a + sets_b if s), default=1)
    bits_a = _pack_bits(sets_a, n_classes)
    bits_b = _pack_bits(sets_b, n_classes)
    sizes_a = np.array([len(s) for s in sets_a], dtype=np.int64)
    sizes_b = np.array([len(s) for s in sets_b], dtype=np.int64)

    out = np.empty((len(sets_a), len(sets_b)), dtype=np.float64)
    # Cap the (chunk, n_b, words) broadcast buffer at ~32 MB.
    chunk = max(1, (1 << 22) // max(1, len(sets_b) * bits_a.shape[1]))
    for lo in range(0, len(sets_a), chunk):
        hi = min(lo + chunk, len(sets_a))
        inter = np.bitwise_count(bits_a[lo:hi, None, :] & bits_b[None, :, :]).sum(
            axis=2, dtype=np.int64
        )
        union = sizes_a[lo:hi, None] + sizes_b[None, :] - inter
        with np.errstate(invalid="ignore"):
            out[lo:hi] = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return out


def shares_any_class(
    a: Sequence[CaptionAnnotation], b: Sequence[CaptionAnnotation], part: str
) -> np.ndarray:
    """Boolean grid: does the ``part`` class set of each pair intersect?"""
    if part not in ("verb", "noun"):
        raise ValueError(f"part must be 'verb' or 'noun', got {part!r}")
    sets_a = [ann.verbs if part == "verb" else ann.nouns for ann in a]
    sets_b = [ann.verbs if part == "verb" else ann.nouns for ann in b]
    n_classes = max((max(s) + 1 for s in sets_a + sets_b if s), default=1)
    bits_a = _pack_bits(sets_a, n_classes)
    bits_b = _pack_bits(sets_b, n_classes)
    return (bits_a[:, None, :] & bits_b[None, :, :]).any(axis=2)


def pairwise_margin(
    a: Sequence[CaptionAnnotation], b: Sequence[CaptionAnnotation], level: str = "global"
) -> np.ndarray:
    """Margin grid: 1 - relevance at the requested level, for every pair."""
    if level == "global":
        return 1.0 - pairwise_relevance(a, b)
    if level in ("verb", "noun"):
        return 0.5 * (1.0 - pairwise_jaccard(a, b, level))
    raise ValueError(f"level must be one of {LEVELS}, got {level!r}")


def _pack_bits(class_sets: list[tuple[int, ...]], n_classes: int) -> np.ndarray:
    words = (n_classes + 63) // 64
    bits = np.zeros((len(class_sets), words), dtype=np.uint64)
    for i, classes in enumerate(class_sets):
        for c in classes:
            bits[i, c >> 6] |= np.uint64(1) << np.uint64(c & 63)
    return bits
