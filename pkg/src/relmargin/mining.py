"""Triplet construction: offline random sampling and online hard negatives.

Offline mining draws, for every training pair and independently per epoch,
a fixed number of random negatives (optionally constrained to differ in
verb class from the anchor, which bounds their relevance by 0.5).  Online
mining picks the most similar non-groundtruth candidate inside the current
batch.  Both emit `Triplet` records tagged with a direction (which tower
each element comes from) and a level (which relevance variant prices the
margin).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .relevance import (
    CaptionAnnotation,
    LEVELS,
    margin_for,
    pairwise_relevance,
    shares_any_class,
)

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset

log = logging.getLogger(__name__)

DIRECTIONS = ("cross-t2v", "cross-v2t", "within-text", "within-video")
_DIR_CODE = {d: i for i, d in enumerate(DIRECTIONS)}
_LEVEL_CODE = {lv: i for i, lv in enumerate(LEVELS)}


def term_for(direction: str, level: str) -> str:
    """Loss-term name for a (direction, level) tag, e.g. cross-global."""
    family = "cross" if direction.startswith("cross") else "within"
    return f"{family}-{level}"


@dataclass(frozen=True)
class Triplet:
    """(anchor, positive, negative) item indices plus direction/level tags."""

    anchor: int
    positive: int
    negative: int
    direction: str = "cross-t2v"
    level: str = "global"

    def __post_init__(self):
        if self.anchor == self.negative:
            raise ValueError("triplet negative must differ from its anchor")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")

    @property
    def term(self) -> str:
        return term_for(self.direction, self.level)


class TripletBatch(Sequence):
    """Column-oriented triplet store; behaves as a sequence of `Triplet`.

    ``skipped_anchors`` counts anchors the miner had to drop (no eligible
    negative under the constraint, or no within-modal positive).
    """

    def __init__(self, anchors, positives, negatives, directions, levels, skipped_anchors=0):
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.positives = np.asarray(positives, dtype=np.int64)
        self.negatives = np.asarray(negatives, dtype=np.int64)
        self.directions = np.asarray(directions, dtype=np.int8)
        self.levels = np.asarray(levels, dtype=np.int8)
        self.skipped_anchors = int(skipped_anchors)
        n = len(self.anchors)
        if not all(len(a) == n for a in (self.positives, self.negatives, self.directions, self.levels)):
            raise ValueError("triplet columns must have equal length")
        if np.any(self.anchors == self.negatives):
            raise ValueError("triplet negatives must differ from their anchors")

    @classmethod
    def uniform(cls, anchors, positives, negatives, direction: str, level: str, skipped_anchors=0):
        n = len(anchors)
        return cls(
            anchors,
            positives,
            negatives,
            np.full(n, _DIR_CODE[direction], dtype=np.int8),
            np.full(n, _LEVEL_CODE[level], dtype=np.int8),
            skipped_anchors,
        )

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet]) -> "TripletBatch":
        return cls(
            [t.anchor for t in triplets],
            [t.positive for t in triplets],
            [t.negative for t in triplets],
            [_DIR_CODE[t.direction] for t in triplets],
            [_LEVEL_CODE[t.level] for t in triplets],
        )

    @classmethod
    def concat(cls, batches: Sequence["TripletBatch"]) -> "TripletBatch":
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.anchors for b in batches]),
            np.concatenate([b.positives for b in batches]),
            np.concatenate([b.negatives for b in batches]),
            np.concatenate([b.directions for b in batches]),
            np.concatenate([b.levels for b in batches]),
            sum(b.skipped_anchors for b in batches),
        )

    @classmethod
    def empty(cls) -> "TripletBatch":
        return cls([], [], [], [], [])

    def take(self, sel: np.ndarray) -> "TripletBatch":
        return TripletBatch(
            self.anchors[sel],
            self.positives[sel],
            self.negatives[sel],
            self.directions[sel],
            self.levels[sel],
        )

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return Triplet(
            anchor=int(self.anchors[i]),
            positive=int(self.positives[i]),
            negative=int(self.negatives[i]),
            direction=DIRECTIONS[self.directions[i]],
            level=LEVELS[self.levels[i]],
        )

    def direction_names(self) -> list[str]:
        return [DIRECTIONS[c] for c in self.directions]

    def level_names(self) -> list[str]:
        return [LEVELS[c] for c in self.levels]


class MiningContext:
    """Precomputed pool structures shared across epochs of offline mining."""

    def __init__(self, annotations: Sequence[CaptionAnnotation], indices: Sequence[int]):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.pool_annotations = [annotations[i] for i in self.indices]
        self._verb_share = None
        self._rel1_lists = None

    @property
    def verb_share(self) -> np.ndarray:
        if self._verb_share is None:
            self._verb_share = shares_any_class(
                self.pool_annotations, self.pool_annotations, "verb"
            )
        return self._verb_share

    @property
    def rel1_lists(self) -> list[np.ndarray]:
        """Per pool position: positions of other items with relevance 1."""
        if self._rel1_lists is None:
            rel = pairwise_relevance(self.pool_annotations, self.pool_annotations)
            np.fill_diagonal(rel, 0.0)
            self._rel1_lists = [np.nonzero(rel[i] == 1.0)[0] for i in range(len(rel))]
        return self._rel1_lists


def mine_offline(
    dataset: "Dataset",
    per_example: int,
    constraint: str = "none",
    seed: int = 0,
    direction: str = "cross-t2v",
    level: str = "global",
    indices: Sequence[int] | None = None,
    ctx: MiningContext | None = None,
) -> TripletBatch:
    """Randomly sample ``per_example`` triplets for every pool item.

    For cross directions the positive is the anchor's groundtruth partner
    (the same item index on the opposite tower); for within directions it
    is a random co-member with relevance exactly 1, and anchors without one
    are skipped.  Negatives are drawn uniformly with replacement from the
    pool minus the anchor; under ``constraint="verbdiff"`` only items
    sharing no verb class with the anchor are eligible, so every emitted
    triplet has global relevance at most 0.5.  Deterministic given
    (dataset, seed, direction, level).
    """
    if per_example < 1:
        raise ValueError("per_example must be >= 1")
    if constraint not in ("none", "verbdiff"):
        raise ValueError(f"constraint must be 'none' or 'verbdiff', got {constraint!r}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    if indices is None:
        indices = dataset.splits["train"]
    if ctx is None:
        ctx = MiningContext(dataset.annotations, indices)
    pool = ctx.indices
    n = len(pool)
    if n < 2:
        raise ValueError("offline mining needs a pool of at least 2 items")

    rng = np.random.default_rng(
        np.random.SeedSequence((int(seed), _DIR_CODE[direction], _LEVEL_CODE[level]))
    )
    within = direction.startswith("within")
    skipped = 0
    anchors, positives, negatives = [], [], []

    if constraint == "none" and not within:
        # Vectorized fast path: uniform over pool minus the anchor itself.
        negs = rng.integers(0, n - 1, size=(n, per_example))
        negs += negs >= np.arange(n)[:, None]
        anchor_pos = np.repeat(np.arange(n), per_example)
        return TripletBatch.uniform(
            pool[anchor_pos], pool[anchor_pos], pool[negs.reshape(-1)], direction, level
        )

    rel1 = ctx.rel1_lists if within else None
    verb_share = ctx.verb_share if constraint == "verbdiff" else None
    for a in range(n):
        if within:
            pos_cands = rel1[a]
            if len(pos_cands) == 0:
                skipped += 1
                continue
        if verb_share is not None:
            elig = np.nonzero(~verb_share[a])[0]
            elig = elig[elig != a]
            if len(elig) == 0:
                skipped += 1
                continue
        if within:
            pos = pos_cands[rng.integers(0, len(pos_cands), per_example)]
        else:
            pos = np.full(per_example, a)
        if verb_share is not None:
            neg = elig[rng.integers(0, len(elig), per_example)]
        else:
            neg = rng.integers(0, n - 1, size=per_example)
            neg += neg >= a
        anchors.append(np.full(per_example, a))
        positives.append(pos)
        negatives.append(neg)

    if skipped:
        log.warning(
            "offline mining (%s/%s): skipped %d of %d anchors with no eligible %s",
            direction,
            level,
            skipped,
            n,
            "positive" if within else "negative",
        )
    if not anchors:
        batch = TripletBatch.empty()
        batch.skipped_anchors = skipped
        return batch
    return TripletBatch.uniform(
        pool[np.concatenate(anchors)],
        pool[np.concatenate(positives)],
        pool[np.concatenate(negatives)],
        direction,
        level,
        skipped,
    )


def mine_online_hard(
    anchor_embeddings: np.ndarray,
    candidate_embeddings: np.ndarray,
    groundtruth: Sequence[int] | None = None,
    direction: str = "cross-t2v",
    level: str = "global",
) -> TripletBatch:
    """Hardest-negative mining inside one batch.

    For every anchor the negative is the non-groundtruth candidate with the
    highest current similarity, ties broken by lowest index; the positive
    is the groundtruth candidate (by default the one at the anchor's own
    position).  Indices in the result are batch-local.  A batch of fewer
    than 2 candidates yields no triplets.
    """
    anchors = np.asarray(anchor_embeddings, dtype=np.float64)
    cands = np.asarray(candidate_embeddings, dtype=np.float64)
    n_a, n_c = anchors.shape[0], cands.shape[0]
    if groundtruth is None:
        if n_a != n_c:
            raise ValueError("identity groundtruth pairing needs equal anchor/candidate counts")
        gt = np.arange(n_a)
    else:
        gt = np.asarray(groundtruth, dtype=np.int64)
        if len(gt) != n_a:
            raise ValueError("groundtruth pairing must give one candidate per anchor")
    if n_c < 2:
        return TripletBatch.empty()

    sims = anchors @ cands.T
    sims[np.arange(n_a), gt] = -np.inf
    neg = np.argmax(sims, axis=1)  # ties resolve to the lowest index
    return TripletBatch.uniform(np.arange(n_a), gt, neg, direction, level)


#: Half-open 0.1-wide margin bins; the last bin is closed at 1.0.
HISTOGRAM_EDGES = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class MarginHistogram:
    """Counts of training margins per 0.1-wide bin over [0, 1]."""

    counts: tuple[int, ...]
    bin_edges: tuple[float, ...] = HISTOGRAM_EDGES

    def __post_init__(self):
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("histogram needs one count per bin")
        if any(c < 0 for c in self.counts):
            raise ValueError("histogram counts must be non-negative")

    @classmethod
    def from_margins(cls, margins: np.ndarray) -> "MarginHistogram":
        values = np.asarray(margins, dtype=np.float64)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("margins must lie in [0, 1]")
        bins = np.minimum((values * 10).astype(np.int64), 9)
        return cls(tuple(int(c) for c in np.bincount(bins, minlength=10)))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"{lo},{hi},{c}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        import json

        return json.dumps(
            {"bin_edges": list(self.bin_edges), "counts": list(self.counts)}, sort_keys=True
        )


def triplet_dump_csv(triplets: TripletBatch, margins: np.ndarray) -> str:
    """Debug dump of a triplet batch with its margins, one row per triplet."""
    if len(margins) != len(triplets):
        raise ValueError("need one margin per triplet")
    lines = ["anchor,positive,negative,direction,level,margin"]
    for i in range(len(triplets)):
        lines.append(
            f"{triplets.anchors[i]},{triplets.positives[i]},{triplets.negatives[i]},"
            f"{DIRECTIONS[triplets.directions[i]]},{LEVELS[triplets.levels[i]]},"
            f"{float(margins[i])!r}"
        )
    return "\n".join(lines) + "\n"


def parse_triplet_dump(text: str) -> tuple[TripletBatch, np.ndarray]:
    """Inverse of `triplet_dump_csv`; returns the batch and its margins."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "anchor,positive,negative,direction,level,margin":
        raise ValueError("not a triplet dump: bad or missing header")
    anchors, positives, negatives, dirs, levels, margins = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 6:
            raise ValueError(f"line {lineno}: expected 6 columns, got {len(cells)}")
        try:
            anchors.append(int(cells[0]))
            positives.append(int(cells[1]))
            negatives.append(int(cells[2]))
            dirs.append(_DIR_CODE[cells[3]])
            levels.append(_LEVEL_CODE[cells[4]])
            margins.append(float(cells[5]))
        except (ValueError, KeyError):
            raise ValueError(f"line {lineno}: malformed triplet row {line!r}") from None
    batch = TripletBatch(anchors, positives, negatives, dirs, levels)
    return batch, np.asarray(margins, dtype=np.float64)


def margin_histogram(
    triplets: Sequence[Triplet] | TripletBatch,
    annotations: Sequence[CaptionAnnotation],
    level: str | None = None,
) -> MarginHistogram:
    """Histogram of relevance-based margins for a triplet collection.

    ``level`` forces one relevance level for every triplet; when omitted,
    each triplet's own level tag is used.
    """
    if isinstance(triplets, TripletBatch):
        trips = [triplets[i] for i in range(len(triplets))]
    else:
        trips = list(triplets)
    margins = np.array(
        [
            margin_for(annotations[t.anchor], annotations[t.negative], level or t.level)
            for t in trips
        ],
        dtype=np.float64,
    )
    return MarginHistogram.from_margins(margins)
