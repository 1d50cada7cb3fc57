"""Triplet hinge losses with fixed or relevance-priced margins.

A triplet (anchor, positive, negative) pays max(0, margin + s_an - s_ap)
where s is cosine similarity.  The margin is either a constant or priced
by how wrong the negative is: margin = 1 - relevance(anchor, negative),
so near-duplicates of the anchor are pushed away only slightly while
unrelated items must clear the full unit margin.  Six loss terms pair a
retrieval family (cross-modal, within-modal) with the relevance level
that prices the margin (global, verb, noun); each term is the mean hinge
over its own triplets and the total is the weighted sum of term means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .relevance import CaptionAnnotation, LEVELS, margin_for
from .mining import TripletBatch

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset
    from .model import EmbeddingModel

#: Index = 3 * family + level, matching the code arithmetic in batch_loss.
TERMS = (
    "cross-global",
    "cross-verb",
    "cross-noun",
    "within-global",
    "within-verb",
    "within-noun",
)


@dataclass(frozen=True)
class MarginSpec:
    """Margin policy: a constant, or 1 - relevance(anchor, negative)."""

    mode: str
    fixed_value: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "relevance"):
            raise ValueError(f"margin mode must be 'fixed' or 'relevance', got {self.mode!r}")
        v = float(self.fixed_value)
        if not np.isfinite(v) or v < 0.0:
            raise ValueError(f"fixed margin must be finite and non-negative, got {v}")
        object.__setattr__(self, "fixed_value", v)

    @classmethod
    def parse(cls, text: str) -> "MarginSpec":
        """Parse the CLI grammar: ``relevance`` or ``fixed:<value>``."""
        spec = text.strip()
        if spec == "relevance":
            return cls("relevance")
        if spec.startswith("fixed:"):
            try:
                value = float(spec[len("fixed:") :])
            except ValueError:
                raise ValueError(f"bad fixed margin in {text!r}") from None
            return cls("fixed", value)
        raise ValueError(f"margin must be 'relevance' or 'fixed:<value>', got {text!r}")

    @property
    def label(self) -> str:
        if self.mode == "relevance":
            return "relevance"
        return f"fixed:{self.fixed_value:g}"


def parse_terms(text: str) -> tuple[str, ...]:
    """Parse a comma-separated loss-term list, e.g. ``cross-global,within-verb``."""
    terms = tuple(t.strip() for t in text.split(",") if t.strip())
    if not terms:
        raise ValueError("at least one loss term is required")
    for t in terms:
        if t not in TERMS:
            raise ValueError(f"unknown loss term {t!r}; choose from {', '.join(TERMS)}")
    if len(set(terms)) != len(terms):
        raise ValueError("loss terms must not repeat")
    return terms


@dataclass(frozen=True)
class LossConfig:
    """Which terms to train, their weights, and the margin policy."""

    terms: tuple[str, ...] = ("cross-global",)
    margin: MarginSpec = MarginSpec("relevance")
    term_weights: Mapping[str, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", parse_terms(",".join(self.terms)))
        weights = dict(self.term_weights or {})
        for t in weights:
            if t not in self.terms:
                raise ValueError(f"weight given for {t!r}, which is not an active term")
        full = {}
        for t in self.terms:
            w = float(weights.get(t, 1.0))
            if not np.isfinite(w) or w < 0.0:
                raise ValueError(f"weight for {t!r} must be finite and non-negative")
            full[t] = w
        object.__setattr__(self, "term_weights", full)

    def weight(self, term: str) -> float:
        return self.term_weights[term]


@dataclass(frozen=True)
class LossValue:
    """Batch loss breakdown: term means, term triplet counts, weighted total."""

    total: float
    per_term: dict[str, float]
    term_counts: dict[str, int]
    active_triplets: int


def similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors (a plain dot product once unit-norm)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"similarity expects two equal-length vectors, got {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(u @ v / (nu * nv))


def triplet_loss(s_ap, s_an, margin):
    """Hinge max(0, margin + s_an - s_ap); elementwise on arrays."""
    out = np.maximum(0.0, np.asarray(margin, dtype=np.float64) + s_an - s_ap)
    return float(out) if out.ndim == 0 else out


def relevance_triplet_loss(
    s_ap: float,
    s_an: float,
    anchor: CaptionAnnotation,
    negative: CaptionAnnotation,
    level: str = "global",
) -> float:
    """Hinge with the margin priced by anchor/negative relevance."""
    return float(triplet_loss(s_ap, s_an, margin_for(anchor, negative, level)))


def triplet_margins(
    triplets: TripletBatch,
    annotations: Sequence[CaptionAnnotation],
    spec: MarginSpec,
) -> np.ndarray:
    """Per-triplet margin under ``spec``, using each triplet's own level."""
    n = len(triplets)
    if spec.mode == "fixed":
        return np.full(n, spec.fixed_value, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = margin_for(
            annotations[triplets.anchors[i]],
            annotations[triplets.negatives[i]],
            LEVELS[triplets.levels[i]],
        )
    return out


def _zero_grads(model: "EmbeddingModel") -> dict:
    out = {}
    for side in ("video", "text"):
        t = model.tower(side)
        out[side] = {name: np.zeros_like(getattr(t, name)) for name in ("W1", "b1", "W2", "b2")}
    return out


def batch_loss(
    model: "EmbeddingModel",
    dataset: "Dataset",
    triplets: TripletBatch,
    config: LossConfig,
    margins: np.ndarray | None = None,
):
    """Loss of one triplet batch plus exact gradients for every parameter.

    Encodes only the dataset rows the batch touches, once per (row, tower).
    ``margins`` can supply precomputed per-triplet margins (the trainer
    gathers them from relevance tables); otherwise they follow
    ``config.margin``.  Returns ``(LossValue, grads)`` with
    ``grads[side][param]`` shaped like the model blocks; a side the batch
    never touches gets zeros.
    """
    n_t = len(triplets)
    empty_value = LossValue(
        0.0, {t: 0.0 for t in config.terms}, {t: 0 for t in config.terms}, 0
    )
    if n_t == 0:
        return empty_value, _zero_grads(model)

    if margins is None:
        margins = triplet_margins(triplets, dataset.annotations, config.margin)
    margins = np.asarray(margins, dtype=np.float64)
    if margins.shape != (n_t,):
        raise ValueError(f"margins must have shape ({n_t},), got {margins.shape}")
    if not np.all(np.isfinite(margins)) or np.any(margins < 0.0):
        raise ValueError("margins must be finite and non-negative")

    dirs = triplets.directions
    t_codes = np.where(dirs >= 2, 3, 0) + triplets.levels
    allowed = {TERMS.index(t) for t in config.terms}
    stray = set(np.unique(t_codes).tolist()) - allowed
    if stray:
        names = ", ".join(TERMS[k] for k in sorted(stray))
        raise ValueError(f"batch contains triplets for inactive loss terms: {names}")

    # Which tower each role reads from: text anchors for t2v and within-text,
    # video candidates for t2v and within-video.
    a_text = (dirs == 0) | (dirs == 2)
    c_video = (dirs == 0) | (dirs == 3)

    uniq_v = np.unique(
        np.concatenate(
            [triplets.anchors[~a_text], triplets.positives[c_video], triplets.negatives[c_video]]
        )
    )
    uniq_t = np.unique(
        np.concatenate(
            [triplets.anchors[a_text], triplets.positives[~c_video], triplets.negatives[~c_video]]
        )
    )
    cache_v = model.forward("video", dataset.video_features[uniq_v])
    cache_t = model.forward("text", dataset.text_features[uniq_t])

    pa = np.empty(n_t, dtype=np.int64)
    pa[a_text] = np.searchsorted(uniq_t, triplets.anchors[a_text])
    pa[~a_text] = np.searchsorted(uniq_v, triplets.anchors[~a_text])
    pp = np.empty(n_t, dtype=np.int64)
    pp[c_video] = np.searchsorted(uniq_v, triplets.positives[c_video])
    pp[~c_video] = np.searchsorted(uniq_t, triplets.positives[~c_video])
    pn = np.empty(n_t, dtype=np.int64)
    pn[c_video] = np.searchsorted(uniq_v, triplets.negatives[c_video])
    pn[~c_video] = np.searchsorted(uniq_t, triplets.negatives[~c_video])

    d = model.d
    a_emb = np.empty((n_t, d))
    a_emb[a_text] = cache_t.y[pa[a_text]]
    a_emb[~a_text] = cache_v.y[pa[~a_text]]
    p_emb = np.empty((n_t, d))
    p_emb[c_video] = cache_v.y[pp[c_video]]
    p_emb[~c_video] = cache_t.y[pp[~c_video]]
    n_emb = np.empty((n_t, d))
    n_emb[c_video] = cache_v.y[pn[c_video]]
    n_emb[~c_video] = cache_t.y[pn[~c_video]]

    s_ap = np.einsum("ij,ij->i", a_emb, p_emb)
    s_an = np.einsum("ij,ij->i", a_emb, n_emb)
    slack = margins + s_an - s_ap
    hinge = np.maximum(slack, 0.0)
    active = slack > 0.0  # the hinge subgradient is 0 exactly at the boundary

    counts = np.bincount(t_codes, minlength=len(TERMS))
    sums = np.bincount(t_codes, weights=hinge, minlength=len(TERMS))
    per_term, term_counts = {}, {}
    total = 0.0
    coef_by_term = np.zeros(len(TERMS))
    for term in config.terms:
        k = TERMS.index(term)
        c = int(counts[k])
        mean = float(sums[k] / c) if c else 0.0
        per_term[term] = mean
        term_counts[term] = c
        total += config.weight(term) * mean
        if c:
            coef_by_term[k] = config.weight(term) / c

    coef = np.where(active, coef_by_term[t_codes], 0.0)[:, None]
    ga = coef * (n_emb - p_emb)
    gpn = coef * a_emb  # added at the negative, subtracted at the positive
    g_v = np.zeros_like(cache_v.y)
    g_t = np.zeros_like(cache_t.y)
    np.add.at(g_t, pa[a_text], ga[a_text])
    np.add.at(g_v, pa[~a_text], ga[~a_text])
    np.add.at(g_v, pp[c_video], -gpn[c_video])
    np.add.at(g_t, pp[~c_video], -gpn[~c_video])
    np.add.at(g_v, pn[c_video], gpn[c_video])
    np.add.at(g_t, pn[~c_video], gpn[~c_video])

    grads = {
        "video": model.backward("video", cache_v, g_v),
        "text": model.backward("text", cache_t, g_t),
    }
    value = LossValue(
        total=float(total),
        per_term=per_term,
        term_counts=term_counts,
        active_triplets=int(np.count_nonzero(active)),
    )
    return value, grads
