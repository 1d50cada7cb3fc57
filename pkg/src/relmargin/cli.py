"""Command-line entry point: gen / train / sweep / hist / probe / replay.

Every command resolves its arguments into a plain-JSON params dict, runs
a core function over it, and writes that dict as ``config.json`` next to
its outputs.  ``replay`` re-executes any saved config, which is what
makes runs reproducible bit-for-bit: the cores derive everything else
(run ids, seeds, file contents) from the params and the dataset.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
import numpy as np

from .benchmark import FIXED_MARGINS, SWEEP_SEEDS, benchmark_config, run_sweep
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset_dir, save_dataset
from .loss import LossConfig, MarginSpec, parse_terms
from .metrics import evaluate, report_csv, report_json
from .mining import MarginHistogram, margin_histogram, parse_triplet_dump, triplet_dump_csv
from .model import EmbeddingModel
from .training import (
    MiningConfig,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    run_id,
    train,
)

CONFIG_FILE = "config.json"


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_config(out_dir: Path, command: str, params: dict) -> None:
    payload = {"command": command, "params": params}
    _write_text(out_dir / CONFIG_FILE, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_data(path: str):
    try:
        return load_dataset_dir(path)
    except DatasetError as exc:
        raise click.ClickException(str(exc)) from None


def _cell_meta(config: TrainConfig, rid: str) -> dict:
    margin = config.loss.margin
    return {
        "run_id": rid,
        "margin_mode": margin.mode,
        "margin_value": repr(margin.fixed_value) if margin.mode == "fixed" else "",
        "mining": config.mining.label,
        "loss_terms": ",".join(config.loss.terms),
        "seed": config.seed,
    }


def _write_run_artifacts(run_dir: Path, model, log: TrainLog, report, meta: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    model.save(run_dir / "checkpoint.bin")
    log.save(run_dir / "trainlog.jsonl")
    _write_text(run_dir / "report.json", report_json(report) + "\n")
    _write_text(run_dir / "report.csv", report_csv(report, meta))
    _write_text(run_dir / "hist.csv", log.margin_hist_total().to_csv())


# -- cores (shared by the commands and replay) ------------------------------


def _run_gen(params: dict) -> None:
    spec = SyntheticSpec(
        n_verb_classes=params["verbs"],
        n_noun_classes=params["nouns"],
        n_items=params["items"],
        nouns_per_item=tuple(params["nouns_per_item"]),
        f_v=params["dim_video"],
        f_q=params["dim_text"],
        noise_sigma=params["noise_sigma"],
        duplicate_rate=params["duplicate_rate"],
        seed=params["seed"],
    )
    dataset = generate_synthetic(spec)
    out_dir = Path(params["out"])
    paths = save_dataset(dataset, out_dir)
    _write_config(out_dir, "gen", params)
    for name in sorted(paths):
        click.echo(f"wrote {paths[name]}")


def _run_train(params: dict) -> Path:
    dataset = _load_data(params["data"])
    config = TrainConfig.from_dict(params["train"])
    rid = run_id(config, dataset.fingerprint())
    run_dir = Path(params["out"]) / rid

    dump: list[str] = []
    sink = None
    if params.get("dump_triplets"):

        def sink(batch, margins):
            dump.append(triplet_dump_csv(batch, margins))

    try:
        model, log = train(dataset, config, on_first_epoch_triplets=sink)
    except TrainingDivergedError as exc:
        raise click.ClickException(f"{exc} | diagnostics: {json.dumps(exc.record, sort_keys=True)}")
    report = evaluate(model, dataset, dataset.splits["test"])

    _write_run_artifacts(run_dir, model, log, report, _cell_meta(config, rid))
    if dump:
        _write_text(run_dir / "triplets.csv", dump[0])
    _write_config(run_dir, "train", params)
    click.echo(f"run {rid} (best epoch {log.best_epoch()})")
    click.echo(f"test: {report}")
    click.echo(f"artifacts in {run_dir}")
    return run_dir


def _run_sweep(params: dict) -> None:
    dataset = _load_data(params["data"])
    margins = [MarginSpec("fixed", v) for v in params["margins"]] + [MarginSpec("relevance")]
    seeds = list(params["seeds"])
    workers = int(params.get("workers", 1))
    env_cap = os.environ.get("RELM_THREADS")
    if env_cap:
        workers = max(1, min(workers, int(env_cap)))
    out_dir = Path(params["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def on_cell(cell, model, log):
        run_dir = out_dir / cell.run_id
        _write_run_artifacts(run_dir, model, log, cell.report, cell.meta())
        # each cell dir replays on its own as a train command
        _write_config(
            run_dir,
            "train",
            {
                "data": params["data"],
                "out": str(out_dir),
                "dump_triplets": False,
                "train": cell.config.to_dict(),
            },
        )

    report = run_sweep(
        dataset,
        margins=margins,
        seeds=seeds,
        config_fn=lambda m, s: _sweep_cell_config(params, m, s),
        workers=workers,
        on_cell=on_cell,
    )
    _write_text(out_dir / "sweep_report.csv", report.to_csv())
    _write_text(out_dir / "sweep_summary.csv", report.summary_csv())
    _write_text(out_dir / "sweep_report.json", report.to_json() + "\n")
    _write_config(out_dir, "sweep", params)

    for label, entry in report.summary.items():
        mean = entry["ndcg_avg"]["mean"]
        shown = "failed" if mean is None else f"ndcg_avg {mean:.2f}"
        click.echo(f"{label}: {shown} over {entry['n']} runs")
    click.echo(f"sweep artifacts in {out_dir}")
    if report.failed_cells:
        failed = ", ".join(f"{c.label}/seed{c.seed}" for c in report.failed_cells)
        raise click.ClickException(f"{len(report.failed_cells)} sweep cells failed: {failed}")


def _sweep_cell_config(params: dict, margin: MarginSpec, seed: int) -> TrainConfig:
    config = benchmark_config(margin, seed)
    overrides = params.get("train_overrides") or {}
    if overrides:
        raw = config.to_dict()
        raw.update(overrides)
        raw["seed"] = seed
        config = TrainConfig.from_dict(raw)
    return config


def _run_hist(params: dict) -> None:
    level = params.get("level")
    if params.get("run"):
        log = TrainLog.load(Path(params["run"]) / "trainlog.jsonl")
        hist = log.margin_hist_total()
    else:
        with open(params["triplets"], "r", encoding="utf-8") as fh:
            batch, margins = parse_triplet_dump(fh.read())
        if level:
            dataset = _load_data(params["data"])
            hist = margin_histogram(batch, dataset.annotations, level)
        else:
            hist = MarginHistogram.from_margins(np.clip(margins, 0.0, 1.0))
    out_dir = Path(params["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "hist.csv", hist.to_csv())
    _write_text(out_dir / "hist.json", hist.to_json() + "\n")
    _write_config(out_dir, "hist", params)
    for lo, hi, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
        click.echo(f"[{lo:.1f},{hi:.1f}) {count}")
    click.echo(f"histogram in {out_dir} ({hist.total} triplets)")


def _run_probe(params: dict) -> None:
    dataset = _load_data(params["data"])
    model = EmbeddingModel.load(params["checkpoint"])
    try:
        qi = dataset.index(params["query"])
    except KeyError as exc:
        raise click.ClickException(str(exc)) from None
    k = int(params["k"])
    by = params["similar_by"]
    ann = dataset.annotations[qi]

    query_emb = model.encode_text(dataset.text_features[qi : qi + 1])[0]
    video_emb = model.encode_video(dataset.video_features)
    sims = video_emb @ query_emb

    verb_set, noun_set = set(ann.verbs), set(ann.nouns)
    first_noun = ann.nouns[0] if ann.nouns else None
    similar_pool, dissimilar_pool = [], []
    for j, other in enumerate(dataset.annotations):
        if j == qi:
            continue
        shares_verb = bool(verb_set & set(other.verbs))
        shares_noun = bool(noun_set & set(other.nouns))
        is_similar = {
            "verb": shares_verb,
            "noun": shares_noun,
            "either": shares_verb or shares_noun,
        }[by]
        if is_similar:
            similar_pool.append(j)
        if not shares_verb and (first_noun is None or first_noun not in other.nouns):
            dissimilar_pool.append(j)

    rng = np.random.default_rng(np.random.SeedSequence((int(params["seed"]), 0x9B0E)))

    def sample(pool: list[int]) -> dict:
        chosen = pool
        if len(pool) > k:
            chosen = sorted(rng.choice(len(pool), size=k, replace=False))
            chosen = [pool[i] for i in chosen]
        values = [float(sims[j]) for j in chosen]
        return {
            "requested": k,
            "used": len(chosen),
            "items": [dataset.ids[j] for j in chosen],
            "similarities": values,
            "mean": float(np.mean(values)) if values else None,
        }

    result = {
        "query": params["query"],
        "similar_by": by,
        "groundtruth_similarity": float(sims[qi]),
        "similar": sample(similar_pool),
        "dissimilar": sample(dissimilar_pool),
    }
    out_dir = Path(params["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "probe.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    _write_config(out_dir, "probe", params)

    click.echo(f"s(v,q)  groundtruth          : {result['groundtruth_similarity']:+.4f}")
    for key, label in (("similar", "s(v+,q)"), ("dissimilar", "s(v-,q)")):
        entry = result[key]
        mean = "n/a" if entry["mean"] is None else f"{entry['mean']:+.4f}"
        note = "" if entry["used"] == k else f"  (only {entry['used']} of {k} eligible)"
        click.echo(f"{label} mean of {entry['used']:3d} {key:10s}: {mean}{note}")
    click.echo(f"probe report in {out_dir}")


_CORES = {
    "gen": _run_gen,
    "train": _run_train,
    "sweep": _run_sweep,
    "hist": _run_hist,
    "probe": _run_probe,
}


# -- click wiring -----------------------------------------------------------


@click.group()
def main():
    """Train and evaluate joint embeddings with relevance-priced margins."""


@main.command()
@click.option("--items", default=2000, show_default=True, help="Number of paired items.")
@click.option("--verbs", default=40, show_default=True, help="Verb class count.")
@click.option("--nouns", default=120, show_default=True, help="Noun class count.")
@click.option("--nouns-per-item", default="1:3", show_default=True, help="Range lo:hi of noun classes per item.")
@click.option("--dim-video", default=256, show_default=True)
@click.option("--dim-text", default=256, show_default=True)
@click.option("--noise-sigma", default=0.1, show_default=True)
@click.option("--duplicate-rate", default=0.3, show_default=True, help="Chance an item reuses an earlier annotation.")
@click.option("--seed", default=1, show_default=True)
@click.option("--out", default="data", show_default=True, help="Output directory.")
def gen(items, verbs, nouns, nouns_per_item, dim_video, dim_text, noise_sigma, duplicate_rate, seed, out):
    """Generate a synthetic dataset (defaults produce the standard benchmark)."""
    try:
        lo, _, hi = nouns_per_item.partition(":")
        rng = [int(lo), int(hi if hi else lo)]
    except ValueError:
        raise click.UsageError(f"--nouns-per-item must be lo:hi, got {nouns_per_item!r}")
    params = {
        "items": items,
        "verbs": verbs,
        "nouns": nouns,
        "nouns_per_item": rng,
        "dim_video": dim_video,
        "dim_text": dim_text,
        "noise_sigma": noise_sigma,
        "duplicate_rate": duplicate_rate,
        "seed": seed,
        "out": out,
    }
    try:
        _run_gen(params)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


@main.command(name="train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--out", default="runs", show_default=True, help="Parent directory for run outputs.")
@click.option("--margin", default="relevance", show_default=True, help="'relevance' or 'fixed:<value>'.")
@click.option("--mining", default="offline", show_default=True, help="'offline', 'offline:verbdiff', or 'online-hard'.")
@click.option("--per-example", default=3, show_default=True, help="Offline negatives per anchor per term.")
@click.option("--loss", default="cross-global", show_default=True, help="Comma-separated loss terms.")
@click.option("--epochs", default=40, show_default=True)
@click.option("--batch-size", default=256, show_default=True)
@click.option("--learning-rate", default=0.05, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--seed", default=1, show_default=True)
@click.option("--embed-dim", default=64, show_default=True)
@click.option("--hidden-dim", default=None, type=int, help="Defaults to 2x embed dim.")
@click.option("--val-interval", default=5, show_default=True)
@click.option("--patience", default=4, show_default=True)
@click.option("--dump-triplets", is_flag=True, help="Also write the first epoch's triplets as CSV.")
def train_cmd(data, out, margin, mining, per_example, loss, epochs, batch_size, learning_rate,
              momentum, seed, embed_dim, hidden_dim, val_interval, patience, dump_triplets):
    """Train one model and evaluate it on the test split."""
    try:
        config = TrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            learning_rate=learning_rate,
            momentum=momentum,
            seed=seed,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            val_interval=val_interval,
            patience=patience,
            loss=LossConfig(terms=parse_terms(loss), margin=MarginSpec.parse(margin)),
            mining=MiningConfig.parse(mining, per_example=per_example),
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    params = {
        "data": str(Path(data).resolve()),
        "out": out,
        "dump_triplets": bool(dump_triplets),
        "train": config.to_dict(),
    }
    _run_train(params)


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", default="sweep", show_default=True)
@click.option("--margins", default=",".join(str(v) for v in FIXED_MARGINS), show_default=True,
              help="Comma-separated fixed margins; a relevance run is always added.")
@click.option("--seeds", default=",".join(str(s) for s in SWEEP_SEEDS), show_default=True)
@click.option("--workers", default=1, show_default=True, help="Concurrent cells (capped by RELM_THREADS).")
def sweep(data, out, margins, seeds, workers):
    """Sweep fixed margins plus the relevance margin on the frozen setup."""
    try:
        margin_values = [float(v) for v in margins.split(",") if v.strip()]
        seed_values = [int(v) for v in seeds.split(",") if v.strip()]
        if not margin_values or not seed_values:
            raise ValueError("need at least one margin and one seed")
        for v in margin_values:
            MarginSpec("fixed", v)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    params = {
        "data": str(Path(data).resolve()),
        "out": out,
        "margins": margin_values,
        "seeds": seed_values,
        "workers": workers,
    }
    _run_sweep(params)


@main.command()
@click.option("--run", type=click.Path(exists=True, file_okay=False), help="Run directory with trainlog.jsonl.")
@click.option("--triplets", type=click.Path(exists=True, dir_okay=False), help="Triplet dump CSV.")
@click.option("--level", type=click.Choice(["global", "verb", "noun"]), default=None,
              help="Recompute margins at this level (triplet dumps only, needs --data).")
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Dataset directory for --level.")
@click.option("--out", default="hist", show_default=True)
def hist(run, triplets, level, data, out):
    """Margin histogram from a run directory or a triplet dump."""
    if bool(run) == bool(triplets):
        raise click.UsageError("give exactly one of --run or --triplets")
    if level and not triplets:
        raise click.UsageError("--level recomputes margins and needs a --triplets dump")
    if level and not data:
        raise click.UsageError("--level needs --data to look up annotations")
    params = {
        "run": str(Path(run).resolve()) if run else None,
        "triplets": str(Path(triplets).resolve()) if triplets else None,
        "level": level,
        "data": str(Path(data).resolve()) if data else None,
        "out": out,
    }
    _run_hist(params)


@main.command()
@click.option("--run", type=click.Path(exists=True, file_okay=False), help="Run directory with checkpoint.bin.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Checkpoint file.")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--query", required=True, help="Query item id.")
@click.option("--k", default=10, show_default=True, help="Items to average per group.")
@click.option("--similar-by", type=click.Choice(["verb", "noun", "either"]), default="either",
              show_default=True, help="What counts as a similar item.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="probe", show_default=True)
def probe(run, checkpoint, data, query, k, similar_by, seed, out):
    """Similarity probe: groundtruth vs similar vs dissimilar items."""
    if bool(run) == bool(checkpoint):
        raise click.UsageError("give exactly one of --run or --checkpoint")
    if k < 1:
        raise click.UsageError("--k must be >= 1")
    ckpt = Path(checkpoint) if checkpoint else Path(run) / "checkpoint.bin"
    if not ckpt.is_file():
        raise click.UsageError(f"no checkpoint at {ckpt}")
    params = {
        "checkpoint": str(ckpt.resolve()),
        "data": str(Path(data).resolve()),
        "query": query,
        "k": k,
        "similar_by": similar_by,
        "seed": seed,
        "out": out,
    }
    _run_probe(params)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Redirect outputs (defaults to the recorded location).")
def replay(config_path, out):
    """Re-execute a saved config.json; outputs are reproduced bit-for-bit."""
    with open(config_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    command = payload.get("command")
    if command not in _CORES:
        raise click.UsageError(f"config has unknown command {command!r}")
    params = dict(payload["params"])
    if out is not None:
        params["out"] = out
    _CORES[command](params)


if __name__ == "__main__":  # pragma: no cover
    main()
