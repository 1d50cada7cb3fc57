"""Synthetic paired-modality datasets and their on-disk formats.

Items carry a verb class and a few noun classes; video and text feature
vectors encode those classes as indicator blocks (plus Gaussian noise)
under two different class-to-dimension layouts, so the cross-modal
mapping has to be learned.  Class frequencies follow a 1/(rank+1) power
law and a duplicate rate reuses earlier annotations verbatim, which
together produce the graded relevance structure the margin pricing and
the nDCG evaluation need: relevance-1 duplicate groups, partially
overlapping pairs, and unrelated pairs.

Files: annotations JSONL (one ``{"id", "verbs", "nouns"}`` object per
line), one feature CSV per modality (header ``id,dim=<k>``), and a
splits JSON with train/val/test id arrays.  All UTF-8 with LF endings;
floats are written with ``repr`` so a save/load cycle is lossless and
repeated saves are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .relevance import CaptionAnnotation

SPLIT_NAMES = ("train", "val", "test")

ANNOTATIONS_FILE = "annotations.jsonl"
VIDEO_FEATURES_FILE = "video_features.csv"
TEXT_FEATURES_FILE = "text_features.csv"
SPLITS_FILE = "splits.json"


class DatasetError(ValueError):
    """A dataset file is missing, malformed, or internally inconsistent."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic generator."""

    n_verb_classes: int = 40
    n_noun_classes: int = 120
    n_items: int = 2000
    nouns_per_item: tuple[int, int] = (1, 3)
    f_v: int = 256
    f_q: int = 256
    noise_sigma: float = 0.1
    duplicate_rate: float = 0.3
    seed: int = 1

    def __post_init__(self):
        for name in ("n_verb_classes", "n_noun_classes", "n_items"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.nouns_per_item
        if not (1 <= lo <= hi <= self.n_noun_classes):
            raise ValueError(
                f"nouns_per_item range {self.nouns_per_item} must satisfy "
                f"1 <= lo <= hi <= {self.n_noun_classes}"
            )
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0.0 <= self.duplicate_rate < 1.0):
            raise ValueError("duplicate_rate must lie in [0, 1)")


class Dataset:
    """Immutable collection of paired items with annotations and splits."""

    def __init__(self, ids, annotations, video_features, text_features, splits):
        self.ids = tuple(str(i) for i in ids)
        self.annotations = tuple(annotations)
        self.video_features = np.ascontiguousarray(video_features, dtype=np.float64)
        self.text_features = np.ascontiguousarray(text_features, dtype=np.float64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}
        self._validate()
        self.video_features.flags.writeable = False
        self.text_features.flags.writeable = False
        for arr in self.splits.values():
            arr.flags.writeable = False
        self._index = {item_id: i for i, item_id in enumerate(self.ids)}

    def _validate(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise DatasetError("item ids must be unique")
        if len(self.annotations) != n:
            raise DatasetError(f"{len(self.annotations)} annotations for {n} ids")
        for i, ann in enumerate(self.annotations):
            if not isinstance(ann, CaptionAnnotation):
                raise DatasetError(f"annotation {i} is not a CaptionAnnotation")
            if ann.item_id != self.ids[i]:
                raise DatasetError(
                    f"annotation {i} is for id {ann.item_id!r}, expected {self.ids[i]!r}"
                )
        for name, arr in (("video", self.video_features), ("text", self.text_features)):
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DatasetError(f"{name} features must be a ({n}, dim) array, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"{name} features contain non-finite values")
        if set(self.splits) != set(SPLIT_NAMES):
            raise DatasetError(f"splits must have keys {SPLIT_NAMES}, got {sorted(self.splits)}")
        seen = np.zeros(n, dtype=bool)
        for name in SPLIT_NAMES:
            idx = self.splits[name]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"{name} split references an out-of-range item index")
            if np.any(seen[idx]):
                raise DatasetError("splits must be disjoint")
            seen[idx] = True

    @property
    def n_items(self) -> int:
        return len(self.ids)

    @property
    def f_v(self) -> int:
        return self.video_features.shape[1]

    @property
    def f_q(self) -> int:
        return self.text_features.shape[1]

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise KeyError(f"unknown item id {item_id!r}") from None

    def split_ids(self, name: str) -> list[str]:
        return [self.ids[i] for i in self.splits[name]]

    def fingerprint(self) -> str:
        """Content hash over annotations, features, and splits (cached)."""
        cached = getattr(self, "_fingerprint", None)
        if cached is None:
            h = hashlib.sha256()
            for ann in self.annotations:
                h.update(f"{ann.item_id}|{ann.verbs}|{ann.nouns}\n".encode())
            h.update(self.video_features.tobytes())
            h.update(self.text_features.tobytes())
            for name in SPLIT_NAMES:
                h.update(self.splits[name].tobytes())
            cached = h.hexdigest()
            self._fingerprint = cached
        return cached


def _zipf_probs(n_classes: int) -> np.ndarray:
    # 1/(rank+1) frequencies give a heavy head and a long tail of classes,
    # so random pairs still collide on popular classes often enough to
    # populate every relevance grade.
    p = 1.0 / (np.arange(n_classes, dtype=np.float64) + 1.0)
    return p / p.sum()


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministically build a Dataset from ``spec`` (seed included)."""
    nv, nn = spec.n_verb_classes, spec.n_noun_classes
    if spec.f_v < nv + nn or spec.f_q < nv + nn:
        raise ValueError(
            f"feature dims must fit the class blocks: need >= {nv + nn}, "
            f"got f_v={spec.f_v}, f_q={spec.f_q}"
        )
    n = spec.n_items
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 0xDA7A)))
    p_verb = _zipf_probs(nv)
    p_noun = _zipf_probs(nn)
    lo, hi = spec.nouns_per_item

    width = max(4, len(str(n - 1)))
    ids = [f"item{i:0{width}d}" for i in range(n)]
    verbs_of: list[tuple[int, ...]] = []
    nouns_of: list[tuple[int, ...]] = []
    for i in range(n):
        if i > 0 and rng.random() < spec.duplicate_rate:
            j = int(rng.integers(0, i))
            verbs_of.append(verbs_of[j])
            nouns_of.append(nouns_of[j])
            continue
        verb = int(rng.choice(nv, p=p_verb))
        k = int(rng.integers(lo, hi + 1))
        nouns = rng.choice(nn, size=k, replace=False, p=p_noun)
        verbs_of.append((verb,))
        nouns_of.append(tuple(int(c) for c in nouns))
    annotations = [
        CaptionAnnotation(item_id=ids[i], verbs=verbs_of[i], nouns=nouns_of[i])
        for i in range(n)
    ]

    # Class slot s -> feature dimension, identity for video and a seeded
    # permutation for text; slots 0..nv-1 are verbs, the rest nouns.
    video_dims = np.arange(nv + nn)
    text_dims = rng.permutation(spec.f_q)[: nv + nn]

    def signal(f: int, dims: np.ndarray) -> np.ndarray:
        sig = np.zeros((n, f))
        for i in range(n):
            sig[i, dims[verbs_of[i][0]]] = 1.0
            # multi-hot noun block scaled to unit length
            nouns = np.asarray(nouns_of[i])
            sig[i, dims[nv + nouns]] = 1.0 / np.sqrt(len(nouns))
        return sig

    video = signal(spec.f_v, video_dims) + rng.normal(0.0, spec.noise_sigma, (n, spec.f_v))
    text = signal(spec.f_q, text_dims) + rng.normal(0.0, spec.noise_sigma, (n, spec.f_q))

    order = rng.permutation(n)
    n_train = int(n * 0.7)
    n_val = int(n * 0.1)
    splits = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }
    return Dataset(ids, annotations, video, text, splits)


# -- persistence -----------------------------------------------------------


def save_annotations(annotations: Sequence[CaptionAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            fh.write(
                json.dumps({"id": ann.item_id, "verbs": list(ann.verbs), "nouns": list(ann.nouns)})
            )
            fh.write("\n")


def load_annotations(path) -> list[CaptionAnnotation]:
    out = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ann = CaptionAnnotation(
                    item_id=str(obj["id"]), verbs=obj["verbs"], nouns=obj["nouns"]
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed annotation line ({exc})") from None
            if ann.item_id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {ann.item_id!r}")
            seen.add(ann.item_id)
            out.append(ann)
    if not out:
        raise DatasetError(f"{path}: no annotations found")
    return out


def _save_features(ids: Sequence[str], features: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"id,dim={features.shape[1]}\n")
        for item_id, row in zip(ids, features):
            fh.write(item_id)
            for v in row:
                fh.write(",")
                fh.write(repr(float(v)))
            fh.write("\n")


def _load_features(path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        parts = header.split(",")
        if len(parts) != 2 or parts[0] != "id" or not parts[1].startswith("dim="):
            raise DatasetError(f"{path}:1: expected header 'id,dim=<k>', got {header!r}")
        try:
            dim = int(parts[1][len("dim=") :])
        except ValueError:
            raise DatasetError(f"{path}:1: bad dimension in header {header!r}") from None
        if dim < 1:
            raise DatasetError(f"{path}:1: dimension must be >= 1")
        rows: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(",")
            item_id = cells[0]
            if len(cells) != dim + 1:
                raise DatasetError(
                    f"{path}:{lineno}: row for id {item_id!r} has {len(cells) - 1} "
                    f"values, expected {dim}"
                )
            try:
                values = np.array([float(c) for c in cells[1:]], dtype=np.float64)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric value in row") from None
            if not np.all(np.isfinite(values)):
                raise DatasetError(f"{path}:{lineno}: non-finite value in row")
            if item_id in rows:
                raise DatasetError(f"{path}:{lineno}: duplicate id {item_id!r}")
            rows[item_id] = values
    return rows, dim


def save_dataset(dataset: Dataset, directory) -> dict[str, Path]:
    """Write the four dataset files under ``directory``; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "annotations": directory / ANNOTATIONS_FILE,
        "video_features": directory / VIDEO_FEATURES_FILE,
        "text_features": directory / TEXT_FEATURES_FILE,
        "splits": directory / SPLITS_FILE,
    }
    save_annotations(dataset.annotations, paths["annotations"])
    _save_features(dataset.ids, dataset.video_features, paths["video_features"])
    _save_features(dataset.ids, dataset.text_features, paths["text_features"])
    split_ids = {name: dataset.split_ids(name) for name in SPLIT_NAMES}
    with open(paths["splits"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(split_ids, sort_keys=True))
        fh.write("\n")
    return paths


def load_dataset(annotations_path, video_features_path, text_features_path, splits_path) -> Dataset:
    """Load and cross-validate the four dataset files."""
    annotations = load_annotations(annotations_path)
    ids = [ann.item_id for ann in annotations]
    id_set = set(ids)

    def gather(path, want_dim=None):
        rows, dim = _load_features(path)
        for item_id in rows:
            if item_id not in id_set:
                raise DatasetError(f"{path}: feature row for unknown id {item_id!r}")
        missing = [i for i in ids if i not in rows]
        if missing:
            raise DatasetError(f"{path}: missing feature row for id {missing[0]!r}")
        return np.stack([rows[i] for i in ids]), dim

    video, _ = gather(video_features_path)
    text, _ = gather(text_features_path)

    try:
        with open(splits_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{splits_path}: malformed JSON ({exc})") from None
    if not isinstance(raw, dict) or set(raw) != set(SPLIT_NAMES):
        raise DatasetError(f"{splits_path}: expected an object with keys {SPLIT_NAMES}")
    index = {item_id: i for i, item_id in enumerate(ids)}
    splits = {}
    for name in SPLIT_NAMES:
        members = raw[name]
        if not isinstance(members, list):
            raise DatasetError(f"{splits_path}: split {name!r} must be an id array")
        for item_id in members:
            if item_id not in index:
                raise DatasetError(f"{splits_path}: split {name!r} references unknown id {item_id!r}")
        splits[name] = np.array(sorted(index[i] for i in members), dtype=np.int64)

    try:
        return Dataset(ids, annotations, video, text, splits)
    except DatasetError as exc:
        raise DatasetError(f"inconsistent dataset files: {exc}") from None


def load_dataset_dir(directory) -> Dataset:
    """Load a dataset saved by ``save_dataset`` from its directory."""
    directory = Path(directory)
    for name in (ANNOTATIONS_FILE, VIDEO_FEATURES_FILE, TEXT_FEATURES_FILE, SPLITS_FILE):
        if not (directory / name).is_file():
            raise DatasetError(f"{directory} is missing {name}")
    return load_dataset(
        directory / ANNOTATIONS_FILE,
        directory / VIDEO_FEATURES_FILE,
        directory / TEXT_FEATURES_FILE,
        directory / SPLITS_FILE,
    )
