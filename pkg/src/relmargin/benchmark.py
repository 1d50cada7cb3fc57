"""Frozen desk-scale benchmark and the margin-sweep harness.

The standard dataset, the fixed-margin grid, the seed set, and the
training hyper-parameters are all constants here so the sweep acts as a
regression test: the relevance-priced margin must beat the default fixed
margin on graded metrics while holding recall, run after run.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, SyntheticSpec, generate_synthetic
from .loss import LossConfig, MarginSpec
from .metrics import REPORT_CSV_COLUMNS, EvalReport, evaluate
from .relevance import pairwise_relevance
from .training import (
    MiningConfig,
    TrainConfig,
    TrainLog,
    margin_tables,
    run_id,
    train,
)
from .model import EmbeddingModel

#: Generator settings for the standard benchmark dataset.  Frozen.
STANDARD_SPEC = SyntheticSpec(
    n_verb_classes=40,
    n_noun_classes=120,
    n_items=2000,
    nouns_per_item=(1, 3),
    f_v=256,
    f_q=256,
    noise_sigma=0.1,
    duplicate_rate=0.3,
    seed=1,
)

#: Fixed-margin grid swept alongside the relevance margin.  Frozen.
FIXED_MARGINS = tuple(round(0.1 * i, 1) for i in range(1, 16))

#: Training seeds for every sweep setting.  Frozen.
SWEEP_SEEDS = (1, 2, 3)

SUMMARY_METRICS = ("ndcg_avg", "map_avg", "r1_avg")


def standard_dataset() -> Dataset:
    """The frozen benchmark dataset (regenerated, not shipped)."""
    return generate_synthetic(STANDARD_SPEC)


def benchmark_config(margin: MarginSpec, seed: int) -> TrainConfig:
    """Frozen training hyper-parameters for one sweep cell."""
    return TrainConfig(
        epochs=40,
        batch_size=256,
        learning_rate=0.05,
        momentum=0.9,
        seed=seed,
        embed_dim=64,
        hidden_dim=128,
        val_interval=5,
        patience=4,
        loss=LossConfig(terms=("cross-global",), margin=margin),
        mining=MiningConfig("offline", "none", 3),
    )


def sweep_margins(fixed: Sequence[float] = FIXED_MARGINS) -> list[MarginSpec]:
    """The fixed grid plus the relevance margin, in sweep order."""
    return [MarginSpec("fixed", v) for v in fixed] + [MarginSpec("relevance")]


@dataclass
class SweepCell:
    """One (margin setting, seed) run; failed cells keep their error text."""

    margin: MarginSpec
    seed: int
    run_id: str
    config: TrainConfig
    report: EvalReport | None = None
    error: str | None = None

    @property
    def label(self) -> str:
        return self.margin.label

    def meta(self) -> dict:
        return {
            "run_id": self.run_id,
            "margin_mode": self.margin.mode,
            "margin_value": repr(self.margin.fixed_value) if self.margin.mode == "fixed" else "",
            "mining": self.config.mining.label,
            "loss_terms": ",".join(self.config.loss.terms),
            "seed": self.seed,
        }


@dataclass
class SweepReport:
    """All sweep cells plus per-setting mean/stddev summaries."""

    cells: list[SweepCell]
    summary: dict[str, dict] = field(init=False)

    def __post_init__(self):
        self.summary = {}
        for cell in self.cells:
            self.summary.setdefault(cell.label, {"n": 0, "failed": 0})
        for label, entry in self.summary.items():
            reports = [c.report for c in self.cells if c.label == label and c.report is not None]
            entry["n"] = len(reports)
            entry["failed"] = sum(1 for c in self.cells if c.label == label and c.report is None)
            for metric in SUMMARY_METRICS:
                values = np.array([getattr(r, metric) * 100.0 for r in reports])
                entry[metric] = {
                    "mean": float(values.mean()) if values.size else None,
                    # population stddev: the seed set is the whole population
                    "std": float(values.std(ddof=0)) if values.size else None,
                }

    @property
    def failed_cells(self) -> list[SweepCell]:
        return [c for c in self.cells if c.report is None]

    def mean(self, label: str, metric: str = "ndcg_avg") -> float:
        value = self.summary[label][metric]["mean"]
        if value is None:
            raise ValueError(f"no successful runs for setting {label!r}")
        return value

    def best_fixed(self, metric: str = "ndcg_avg") -> tuple[str, float]:
        """Fixed-margin setting with the highest mean of ``metric``."""
        best = None
        for label, entry in self.summary.items():
            if not label.startswith("fixed:") or entry[metric]["mean"] is None:
                continue
            if best is None or entry[metric]["mean"] > best[1]:
                best = (label, entry[metric]["mean"])
        if best is None:
            raise ValueError("sweep has no successful fixed-margin runs")
        return best

    def to_csv(self) -> str:
        """One report row per successful cell, in grid order."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_CSV_COLUMNS)
        for cell in self.cells:
            if cell.report is not None:
                writer.writerow(cell.report.to_csv_row(cell.meta()))
        return buf.getvalue()

    def summary_csv(self) -> str:
        """Plot-ready per-setting aggregate table."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["margin", "runs", "failed"]
        for metric in SUMMARY_METRICS:
            header += [f"{metric}_mean", f"{metric}_std"]
        writer.writerow(header)
        for label in self.summary:
            entry = self.summary[label]
            row = [label, entry["n"], entry["failed"]]
            for metric in SUMMARY_METRICS:
                mean, std = entry[metric]["mean"], entry[metric]["std"]
                row += ["" if mean is None else repr(mean), "" if std is None else repr(std)]
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        cells = []
        for cell in self.cells:
            entry = dict(cell.meta())
            entry["status"] = "ok" if cell.report is not None else "failed"
            entry["error"] = cell.error
            entry["metrics"] = cell.report.to_dict() if cell.report is not None else None
            cells.append(entry)
        return json.dumps({"cells": cells, "summary": self.summary}, sort_keys=True, indent=2)


def run_cell(
    dataset: Dataset,
    config: TrainConfig,
    tables: dict | None = None,
    test_rel: np.ndarray | None = None,
):
    """Train one configuration and evaluate it on the test split."""
    model, log = train(dataset, config, tables=tables)
    report = evaluate(model, dataset, dataset.splits["test"], rel=test_rel)
    return model, log, report


def run_sweep(
    dataset: Dataset,
    margins: Sequence[MarginSpec] | None = None,
    seeds: Sequence[int] = SWEEP_SEEDS,
    config_fn: Callable[[MarginSpec, int], TrainConfig] = benchmark_config,
    workers: int = 1,
    on_cell: Callable[[SweepCell, EmbeddingModel, TrainLog], None] | None = None,
) -> SweepReport:
    """Train every (margin, seed) cell and summarize per setting.

    Cell failures are recorded and the remaining cells still run.
    ``on_cell`` is invoked (possibly from worker threads) for each
    successful cell, e.g. to persist its artifacts.  Results are
    assembled in grid order regardless of scheduling.
    """
    if margins is None:
        margins = sweep_margins()
    if not margins or not seeds:
        raise ValueError("sweep needs at least one margin setting and one seed")

    fingerprint = dataset.fingerprint()
    cells = [
        SweepCell(
            margin=m,
            seed=s,
            config=config_fn(m, s),
            run_id="",
        )
        for m in margins
        for s in seeds
    ]
    for cell in cells:
        cell.run_id = run_id(cell.config, fingerprint)

    levels = sorted(
        {t.split("-", 1)[1] for c in cells if c.margin.mode == "relevance" for t in c.config.loss.terms}
    )
    tables = margin_tables(dataset, levels) if levels else None
    test_idx = dataset.splits["test"]
    test_anns = [dataset.annotations[i] for i in test_idx]
    test_rel = pairwise_relevance(test_anns, test_anns)

    def execute(cell: SweepCell):
        try:
            model, log, report = run_cell(
                dataset,
                cell.config,
                tables=tables if cell.margin.mode == "relevance" else None,
                test_rel=test_rel,
            )
            cell.report = report
            if on_cell is not None:
                on_cell(cell, model, log)
        except Exception as exc:  # keep sweeping; the report marks the cell
            cell.error = f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(execute, cells))
    else:
        for cell in cells:
            execute(cell)
    return SweepReport(cells)
