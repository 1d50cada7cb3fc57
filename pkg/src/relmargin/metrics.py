"""Rank-aware retrieval evaluation: graded nDCG, binary mAP, recall@k.

Conventions shared by every operation here:

* rankings are in descending similarity order, rank 1 first;
* nDCG truncates both DCG and the ideal DCG at N_r, the number of pool
  items with relevance > 0 to the query;
* mAP uses the binary rule "relevant iff relevance == 1.0" (exact, which
  is safe because relevance grades are ratios of integer set counts);
* queries with no positively relevant item are skipped and counted, never
  scored as zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .relevance import RelevanceMatrix, pairwise_relevance

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset
    from .model import EmbeddingModel


@dataclass(frozen=True)
class RankingList:
    """One query's ranked pool, best first."""

    query_id: str
    ranked_item_ids: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.ranked_item_ids)) != len(self.ranked_item_ids):
            raise ValueError("ranking contains duplicate item ids")


def dcg(rel_of_rank: Sequence[float], n_r: int) -> float:
    """Discounted cumulative gain over the first ``n_r`` ranks.

    ``rel_of_rank`` holds the relevance of the item at each rank, rank 1
    first; the discount for rank k is 1/log2(k+1).
    """
    if n_r > len(rel_of_rank):
        raise ValueError(f"n_r={n_r} exceeds ranking length {len(rel_of_rank)}")
    rels = np.asarray(rel_of_rank[:n_r], dtype=np.float64)
    return float(rels @ _discounts(n_r))


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg(query_id: str, ranking: RankingList, rel: RelevanceMatrix) -> float | None:
    """Normalized DCG of one ranking; ``None`` when the query has no
    positively relevant item in the pool (the query is skipped, never
    divided by zero).

    The ranking must cover exactly the matrix's item pool.  Both the DCG
    and the ideal DCG are truncated at N_r = #{items with relevance > 0}.
    """
    row = rel.row(query_id)
    pool = set(rel.items)
    if set(ranking.ranked_item_ids) != pool or len(ranking.ranked_item_ids) != len(rel.items):
        raise ValueError("ranking does not cover the evaluation pool exactly")
    n_r = int(np.count_nonzero(row > 0.0))
    if n_r == 0:
        return None
    ranked_rels = np.array(
        [row[rel.item_index(i)] for i in ranking.ranked_item_ids], dtype=np.float64
    )
    ideal = np.sort(row)[::-1]
    value = float(ranked_rels[:n_r] @ _discounts(n_r)) / float(ideal[:n_r] @ _discounts(n_r))
    # an ideally ordered ranking with tied grades can land an ulp above 1
    # because the same products are summed in a different order
    return min(value, 1.0)


def average_precision(query_id: str, ranking: RankingList, rel: RelevanceMatrix) -> float | None:
    """Average precision with the binary rule "relevant iff rel == 1.0";
    ``None`` when the pool holds no maximally relevant item.

    Every term is a ratio of small integers, so the sum is accumulated as
    an exact rational and floated once at the end; tiny hand-checkable
    cases (hits at ranks 1 and 3 giving 5/6) come out bit-exact.
    """
    row = rel.row(query_id)
    relevant = row == 1.0
    n_r = int(np.count_nonzero(relevant))
    if n_r == 0:
        return None
    hits = 0
    total = Fraction(0)
    for k, item_id in enumerate(ranking.ranked_item_ids, start=1):
        if relevant[rel.item_index(item_id)]:
            hits += 1
            total += Fraction(hits, k)
    return float(total / n_r)


def recall_at_k(ranking: RankingList, groundtruth_id: str, k: int) -> int:
    """1 iff the groundtruth item appears within the first ``k`` ranks."""
    return int(groundtruth_id in ranking.ranked_item_ids[:k])


# --- full-split evaluation -------------------------------------------------

#: Column order of the one-row machine-readable report.
REPORT_CSV_COLUMNS = (
    "run_id",
    "margin_mode",
    "margin_value",
    "mining",
    "loss_terms",
    "seed",
    "ndcg_t2v",
    "ndcg_v2t",
    "ndcg_avg",
    "map_t2v",
    "map_v2t",
    "map_avg",
    "r1_avg",
    "r5_avg",
    "r10_avg",
    "skipped_queries",
)

_METRIC_FIELDS = (
    "ndcg_t2v",
    "ndcg_v2t",
    "ndcg_avg",
    "map_t2v",
    "map_v2t",
    "map_avg",
    "r1_avg",
    "r5_avg",
    "r10_avg",
)


@dataclass(frozen=True)
class EvalReport:
    """Per-direction and direction-averaged retrieval metrics for one split.

    Values are stored as fractions in [0, 1]; serialized outputs carry them
    multiplied by 100 (percentage points).  ``skipped_queries`` counts the
    (direction, metric, query) events where a query had no positively
    relevant pool item and was excluded from the mean.
    """

    ndcg_t2v: float
    ndcg_v2t: float
    ndcg_avg: float
    map_t2v: float
    map_v2t: float
    map_avg: float
    r1_avg: float
    r5_avg: float
    r10_avg: float
    skipped_queries: int = 0

    def to_dict(self) -> dict:
        """Machine form: full-precision percentage points."""
        out = {name: getattr(self, name) * 100.0 for name in _METRIC_FIELDS}
        out["skipped_queries"] = self.skipped_queries
        return out

    def to_csv_row(self, meta: dict) -> list:
        row = []
        for col in REPORT_CSV_COLUMNS:
            if col in _METRIC_FIELDS:
                row.append(repr(getattr(self, col) * 100.0))
            elif col == "skipped_queries":
                row.append(str(self.skipped_queries))
            else:
                row.append(str(meta.get(col, "")))
        return row

    def __str__(self) -> str:
        parts = [f"{name}={getattr(self, name) * 100.0:.1f}" for name in _METRIC_FIELDS]
        parts.append(f"skipped={self.skipped_queries}")
        return " ".join(parts)


def report_csv(report: EvalReport, meta: dict) -> str:
    """Header plus one data row, as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_CSV_COLUMNS)
    writer.writerow(report.to_csv_row(meta))
    return buf.getvalue()


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True)


def evaluate(
    model: "EmbeddingModel",
    dataset: "Dataset",
    indices: Sequence[int],
    rel: np.ndarray | None = None,
) -> EvalReport:
    """Evaluate a model on the pool formed by ``indices``.

    Encodes every pool item on both sides, ranks each direction by cosine
    similarity (stable sort, ties broken by ascending item index), and
    averages per-query nDCG/mAP/recall over the non-skipped queries, then
    over the two directions.  ``rel`` may carry a precomputed relevance
    grid for the pool; otherwise it is derived from the annotations.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("evaluation split is empty")
    if model.f_v != dataset.video_features.shape[1]:
        raise ValueError(
            f"model expects video dim {model.f_v}, dataset has {dataset.video_features.shape[1]}"
        )
    if model.f_q != dataset.text_features.shape[1]:
        raise ValueError(
            f"model expects text dim {model.f_q}, dataset has {dataset.text_features.shape[1]}"
        )
    anns = [dataset.annotations[i] for i in idx]
    if rel is None:
        rel = pairwise_relevance(anns, anns)
    if rel.shape != (idx.size, idx.size):
        raise ValueError(f"relevance grid shape {rel.shape} does not match pool size {idx.size}")

    emb_video = model.encode_video(dataset.video_features[idx])
    emb_text = model.encode_text(dataset.text_features[idx])

    t2v = _direction_metrics(emb_text @ emb_video.T, rel)
    v2t = _direction_metrics(emb_video @ emb_text.T, rel)

    return EvalReport(
        ndcg_t2v=t2v["ndcg"],
        ndcg_v2t=v2t["ndcg"],
        ndcg_avg=0.5 * (t2v["ndcg"] + v2t["ndcg"]),
        map_t2v=t2v["map"],
        map_v2t=v2t["map"],
        map_avg=0.5 * (t2v["map"] + v2t["map"]),
        r1_avg=0.5 * (t2v["r1"] + v2t["r1"]),
        r5_avg=0.5 * (t2v["r5"] + v2t["r5"]),
        r10_avg=0.5 * (t2v["r10"] + v2t["r10"]),
        skipped_queries=t2v["skipped"] + v2t["skipped"],
    )


def _direction_metrics(sims: np.ndarray, rel: np.ndarray) -> dict:
    """Mean nDCG/mAP/recall over one direction's queries.

    ``sims[i, j]`` is the similarity of query i to pool item j; the
    groundtruth partner of query i is pool item i (same annotation index).
    """
    n = sims.shape[0]
    disc = _discounts(n)
    ndcg_sum = 0.0
    ndcg_n = 0
    ap_sum = 0.0
    ap_n = 0
    r1 = r5 = r10 = 0
    skipped = 0
    for i in range(n):
        order = np.argsort(-sims[i], kind="stable")
        row = rel[i]
        ranked_rels = row[order]

        n_r = int(np.count_nonzero(row > 0.0))
        if n_r == 0:
            skipped += 1
        else:
            ideal = np.sort(row)[::-1]
            value = float(ranked_rels[:n_r] @ disc[:n_r]) / float(ideal[:n_r] @ disc[:n_r])
            ndcg_sum += min(value, 1.0)  # same roundoff clamp as `ndcg`
            ndcg_n += 1

        relevant = ranked_rels == 1.0
        n_rel = int(np.count_nonzero(relevant))
        if n_rel == 0:
            skipped += 1
        else:
            hits = np.cumsum(relevant)
            ap_sum += float((hits[relevant] / (np.nonzero(relevant)[0] + 1)).sum()) / n_rel
            ap_n += 1

        gt_rank = int(np.nonzero(order == i)[0][0])
        r1 += gt_rank < 1
        r5 += gt_rank < 5
        r10 += gt_rank < 10

    return {
        "ndcg": ndcg_sum / ndcg_n if ndcg_n else 0.0,
        "map": ap_sum / ap_n if ap_n else 0.0,
        "r1": r1 / n,
        "r5": r5 / n,
        "r10": r10 / n,
        "skipped": skipped,
    }
