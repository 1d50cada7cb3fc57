"""From-scratch training loop: mine, batch, SGD with momentum, validate.

Every epoch re-mines triplets for each active loss term (its cross or
within directions at its relevance level), shuffles them with a seed
derived from (run seed, epoch), and applies plain momentum SGD.  The
model snapshot with the best validation ndcg_avg is what training
returns.  The per-epoch log records term losses, a margin histogram,
and validation metrics; it deliberately excludes the margin policy so
that configurations which induce identical arithmetic produce identical
logs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .loss import LossConfig, MarginSpec, batch_loss, triplet_margins
from .metrics import evaluate
from .mining import (
    MarginHistogram,
    MiningContext,
    TripletBatch,
    mine_offline,
    mine_online_hard,
)
from .model import EmbeddingModel, PARAM_ORDER
from .relevance import LEVELS, pairwise_margin, pairwise_relevance

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries a diagnostic record of the batch."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class MiningConfig:
    """How training triplets are produced each epoch."""

    mode: str = "offline"
    constraint: str = "none"
    per_example: int = 3

    def __post_init__(self):
        if self.mode not in ("offline", "online-hard"):
            raise ValueError(f"mining mode must be 'offline' or 'online-hard', got {self.mode!r}")
        if self.constraint not in ("none", "verbdiff"):
            raise ValueError(f"mining constraint must be 'none' or 'verbdiff', got {self.constraint!r}")
        if self.mode == "online-hard" and self.constraint != "none":
            raise ValueError("constraints apply to offline mining only")
        if self.per_example < 1:
            raise ValueError("per_example must be >= 1")

    @classmethod
    def parse(cls, text: str, per_example: int = 3) -> "MiningConfig":
        """CLI grammar: ``offline``, ``offline:verbdiff``, or ``online-hard``."""
        spec = text.strip()
        if spec == "online-hard":
            return cls("online-hard", "none", per_example)
        if spec == "offline":
            return cls("offline", "none", per_example)
        if spec.startswith("offline:"):
            return cls("offline", spec[len("offline:") :], per_example)
        raise ValueError(
            f"mining must be 'offline', 'offline:<constraint>' or 'online-hard', got {text!r}"
        )

    @property
    def label(self) -> str:
        if self.mode == "offline" and self.constraint != "none":
            return f"offline:{self.constraint}"
        return self.mode


@dataclass(frozen=True)
class TrainConfig:
    """Everything train() needs besides the dataset."""

    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 1
    embed_dim: int = 64
    hidden_dim: int | None = None  # None means 2 * embed_dim
    val_interval: int = 5
    patience: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0.0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.embed_dim < 1 or (self.hidden_dim is not None and self.hidden_dim < 1):
            raise ValueError("embedding dims must be >= 1")
        if self.val_interval < 1 or self.patience < 1:
            raise ValueError("val_interval and patience must be >= 1")
        if self.mining.mode == "online-hard" and any(
            t.startswith("within") for t in self.loss.terms
        ):
            raise ValueError(
                "online-hard mining defines no within-modal positives; "
                "use offline mining for within-* terms"
            )

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else 2 * self.embed_dim

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "val_interval": self.val_interval,
            "patience": self.patience,
            "loss": {
                "terms": list(self.loss.terms),
                "term_weights": dict(self.loss.term_weights),
                "margin": {"mode": self.loss.margin.mode, "fixed_value": self.loss.margin.fixed_value},
            },
            "mining": {
                "mode": self.mining.mode,
                "constraint": self.mining.constraint,
                "per_example": self.mining.per_example,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        loss_raw = raw["loss"]
        margin_raw = loss_raw["margin"]
        loss = LossConfig(
            terms=tuple(loss_raw["terms"]),
            margin=MarginSpec(margin_raw["mode"], margin_raw["fixed_value"]),
            term_weights=loss_raw.get("term_weights"),
        )
        mining_raw = raw["mining"]
        mining = MiningConfig(
            mode=mining_raw["mode"],
            constraint=mining_raw["constraint"],
            per_example=mining_raw["per_example"],
        )
        return cls(
            epochs=raw["epochs"],
            batch_size=raw["batch_size"],
            learning_rate=raw["learning_rate"],
            momentum=raw["momentum"],
            seed=raw["seed"],
            embed_dim=raw["embed_dim"],
            hidden_dim=raw["hidden_dim"],
            val_interval=raw["val_interval"],
            patience=raw["patience"],
            loss=loss,
            mining=mining,
        )


def run_id(config: TrainConfig, data_fingerprint: str) -> str:
    """Stable short id for one training run: hash of config plus dataset."""
    blob = json.dumps(
        {"config": config.to_dict(), "data": data_fingerprint}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class TrainLog:
    """Per-epoch training records, serializable as JSON Lines."""

    records: list[dict]

    def __post_init__(self):
        epochs = [r["epoch"] for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("log epochs must be strictly increasing")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(records)

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())

    def validated_records(self) -> list[dict]:
        return [r for r in self.records if r.get("val") is not None]

    def best_epoch(self) -> int:
        """Epoch whose validation ndcg_avg was selected (earliest strict max)."""
        best, best_epoch = -np.inf, None
        for r in self.validated_records():
            if r["val"]["ndcg_avg"] > best:
                best, best_epoch = r["val"]["ndcg_avg"], r["epoch"]
        if best_epoch is None:
            raise ValueError("log has no validation records")
        return best_epoch

    def margin_hist_total(self) -> MarginHistogram:
        """Histogram of training margins summed over all logged epochs."""
        counts = np.zeros(10, dtype=np.int64)
        for r in self.records:
            counts += np.asarray(r["margin_hist"], dtype=np.int64)
        return MarginHistogram(tuple(int(c) for c in counts))


def expand_terms(terms: Sequence[str]) -> list[tuple[str, str]]:
    """Loss terms to (direction, level) mining combos, both directions each."""
    combos = []
    for term in terms:
        family, level = term.split("-", 1)
        if family == "cross":
            combos += [("cross-t2v", level), ("cross-v2t", level)]
        else:
            combos += [("within-text", level), ("within-video", level)]
    return combos


def margin_tables(dataset: "Dataset", levels: Sequence[str]) -> dict[str, np.ndarray]:
    """Full-dataset margin grid per level, for fast per-triplet gathers."""
    anns = list(dataset.annotations)
    return {lv: pairwise_margin(anns, anns, lv) for lv in levels}


def _gather_margins(
    batch: TripletBatch, spec: MarginSpec, tables: dict[str, np.ndarray] | None
) -> np.ndarray:
    if spec.mode == "fixed":
        return np.full(len(batch), spec.fixed_value, dtype=np.float64)
    out = np.empty(len(batch), dtype=np.float64)
    for code, level in enumerate(LEVELS):
        mask = batch.levels == code
        if mask.any():
            out[mask] = tables[level][batch.anchors[mask], batch.negatives[mask]]
    return out


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(tuple(int(e) for e in entropy)).generate_state(1)[0])


def train(
    dataset: "Dataset",
    config: TrainConfig,
    tables: dict[str, np.ndarray] | None = None,
    on_first_epoch_triplets=None,
):
    """Train a two-tower model; returns (best model, TrainLog).

    Deterministic given (dataset, config): mining, shuffling, and init all
    derive their seeds from config.seed.  ``tables`` may pass precomputed
    margin grids (pure functions of the dataset) to share across runs.
    ``on_first_epoch_triplets``, if given, receives (TripletBatch, margins)
    for the first epoch's mining output; debug dumps hook in there.
    """
    train_idx = np.asarray(dataset.splits["train"], dtype=np.int64)
    val_idx = np.asarray(dataset.splits["val"], dtype=np.int64)
    if train_idx.size < 2:
        raise ValueError("training needs a train split with at least 2 items")
    if val_idx.size == 0:
        raise ValueError("training needs a non-empty validation split")

    model = EmbeddingModel.init(
        dataset.f_v, dataset.f_q, config.hidden, config.embed_dim, seed=config.seed
    )
    velocity = {
        side: {name: np.zeros_like(getattr(model.tower(side), name)) for name in ("W1", "b1", "W2", "b2")}
        for side in ("video", "text")
    }
    combos = expand_terms(config.loss.terms)
    if config.loss.margin.mode == "relevance" and tables is None:
        tables = margin_tables(dataset, sorted({lv for _, lv in combos}))
    ctx = MiningContext(dataset.annotations, train_idx)
    val_anns = [dataset.annotations[i] for i in val_idx]
    val_rel = pairwise_relevance(val_anns, val_anns)

    records: list[dict] = []
    best_ndcg, best_params, best_epoch = -np.inf, None, None
    stale_validations = 0
    dump_pending = on_first_epoch_triplets is not None

    for epoch in range(1, config.epochs + 1):
        mining_seed = _derived_seed(config.seed, 0x5EED, epoch)
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence((int(config.seed), 0x0DD5, int(epoch)))
        )
        epoch_margins: list[np.ndarray] = []
        term_sums = {t: 0.0 for t in config.loss.terms}
        term_counts = {t: 0 for t in config.loss.terms}
        active = 0
        skipped_anchors = 0

        def step(batch: TripletBatch, margins: np.ndarray, step_no: int):
            nonlocal active
            value, grads = batch_loss(model, dataset, batch, config.loss, margins)
            if not np.isfinite(value.total):
                diag = {
                    "epoch": epoch,
                    "step": step_no,
                    "triplets": len(batch),
                    "term_counts": value.term_counts,
                    "margin_min": float(margins.min()) if len(batch) else None,
                    "margin_max": float(margins.max()) if len(batch) else None,
                    "loss_total": value.total,
                }
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step_no}", diag
                )
            for t in config.loss.terms:
                term_sums[t] += value.per_term[t] * value.term_counts[t]
                term_counts[t] += value.term_counts[t]
            active += value.active_triplets
            for side, name in PARAM_ORDER:
                v = velocity[side][name]
                v *= config.momentum
                v += grads[side][name]
                getattr(model.tower(side), name)[...] -= config.learning_rate * v

        if config.mining.mode == "offline":
            mined = TripletBatch.concat(
                [
                    mine_offline(
                        dataset,
                        config.mining.per_example,
                        constraint=config.mining.constraint,
                        seed=mining_seed,
                        direction=d,
                        level=lv,
                        indices=train_idx,
                        ctx=ctx,
                    )
                    for d, lv in combos
                ]
            )
            skipped_anchors = mined.skipped_anchors
            margins = _gather_margins(mined, config.loss.margin, tables)
            epoch_margins.append(margins)
            if dump_pending:
                on_first_epoch_triplets(mined, margins)
                dump_pending = False
            order = shuffle_rng.permutation(len(mined))
            for step_no, start in enumerate(range(0, len(order), config.batch_size)):
                sel = order[start : start + config.batch_size]
                step(mined.take(sel), margins[sel], step_no)
        else:
            order = shuffle_rng.permutation(train_idx)
            for step_no, start in enumerate(range(0, len(order), config.batch_size)):
                chunk = order[start : start + config.batch_size]
                if len(chunk) < 2:
                    continue
                emb_v = model.encode_video(dataset.video_features[chunk])
                emb_t = model.encode_text(dataset.text_features[chunk])
                parts = []
                for d, lv in combos:
                    local = mine_online_hard(
                        emb_t if d == "cross-t2v" else emb_v,
                        emb_v if d == "cross-t2v" else emb_t,
                        direction=d,
                        level=lv,
                    )
                    parts.append(
                        TripletBatch(
                            chunk[local.anchors],
                            chunk[local.positives],
                            chunk[local.negatives],
                            local.directions,
                            local.levels,
                        )
                    )
                batch = TripletBatch.concat(parts)
                margins = _gather_margins(batch, config.loss.margin, tables)
                epoch_margins.append(margins)
                if dump_pending:
                    on_first_epoch_triplets(batch, margins)
                    dump_pending = False
                step(batch, margins, step_no)

        all_margins = np.concatenate(epoch_margins) if epoch_margins else np.empty(0)
        # Over-unit fixed margins land in the top bin for logging purposes.
        hist = MarginHistogram.from_margins(np.clip(all_margins, 0.0, 1.0))
        record = {
            "epoch": epoch,
            "triplets": int(all_margins.size),
            "skipped_anchors": int(skipped_anchors),
            "active_triplets": int(active),
            "loss_terms": {
                t: (term_sums[t] / term_counts[t]) if term_counts[t] else 0.0
                for t in config.loss.terms
            },
            "margin_hist": list(hist.counts),
            "val": None,
        }
        record["loss_total"] = float(
            sum(config.loss.weight(t) * record["loss_terms"][t] for t in config.loss.terms)
        )

        stop = False
        if epoch % config.val_interval == 0 or epoch == config.epochs:
            report = evaluate(model, dataset, val_idx, rel=val_rel)
            record["val"] = report.to_dict()
            if report.ndcg_avg * 100.0 > best_ndcg:
                best_ndcg = report.ndcg_avg * 100.0
                best_params = model.to_vector()
                best_epoch = epoch
                stale_validations = 0
            else:
                stale_validations += 1
                if stale_validations >= config.patience:
                    stop = True
        records.append(record)
        if stop:
            break

    model.set_vector(best_params)
    log = TrainLog(records)
    assert log.best_epoch() == best_epoch
    return model, log


def grad_check(
    model: EmbeddingModel,
    triplets: TripletBatch,
    dataset: "Dataset",
    config: LossConfig,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every weight, or a seeded 10k subsample for larger models.  For
    coordinates where both gradients are below 1e-7 the absolute error is
    used, since a relative error over noise-floor values is meaningless.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    work = model.copy()
    margins = triplet_margins(triplets, dataset.annotations, config.margin)
    _, grads = batch_loss(work, dataset, triplets, config, margins)
    analytic = np.concatenate([grads[side][name].ravel() for side, name in PARAM_ORDER])
    base = work.to_vector()
    n = base.size
    if n > 10_000:
        rng = np.random.default_rng(np.random.SeedSequence((0x6AD, n)))
        sel = np.sort(rng.choice(n, size=10_000, replace=False))
    else:
        sel = np.arange(n)

    worst = 0.0
    vec = base.copy()
    for i in sel:
        saved = vec[i]
        vec[i] = saved + eps
        work.set_vector(vec)
        up = batch_loss(work, dataset, triplets, config, margins)[0].total
        vec[i] = saved - eps
        work.set_vector(vec)
        down = batch_loss(work, dataset, triplets, config, margins)[0].total
        vec[i] = saved
        numeric = (up - down) / (2.0 * eps)
        a = analytic[i]
        denom = max(abs(a), abs(numeric))
        err = abs(a - numeric) if denom < 1e-7 else abs(a - numeric) / denom
        worst = max(worst, err)
    return float(worst)
