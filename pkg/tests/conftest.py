"""Shared fixtures: small deterministic datasets and config factories."""

import numpy as np
import pytest

from relmargin import (
    Dataset,
    LossConfig,
    MarginSpec,
    MiningConfig,
    SyntheticSpec,
    TrainConfig,
    generate_synthetic,
)
from relmargin.relevance import CaptionAnnotation

# Small enough to train in well under a second, but with duplicate groups
# (for within-modal positives) and partial class overlaps.
TINY_SPEC = SyntheticSpec(
    n_verb_classes=6,
    n_noun_classes=15,
    n_items=80,
    nouns_per_item=(1, 3),
    f_v=24,
    f_q=24,
    noise_sigma=0.1,
    duplicate_rate=0.4,
    seed=3,
)


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return generate_synthetic(TINY_SPEC)


def make_dataset(annotations, f_v=8, f_q=8, seed=0, splits=None) -> Dataset:
    """Dataset with given annotations, random features, all-train splits."""
    n = len(annotations)
    rng = np.random.default_rng(seed)
    if splits is None:
        splits = {"train": np.arange(n), "val": [], "test": []}
    return Dataset(
        ids=[a.item_id for a in annotations],
        annotations=annotations,
        video_features=rng.normal(size=(n, f_v)),
        text_features=rng.normal(size=(n, f_q)),
        splits=splits,
    )


def random_annotations(rng, n, n_verbs=8, n_nouns=20, allow_empty=False):
    """Random class-set annotations, optionally with empty sets mixed in."""
    out = []
    for i in range(n):
        nv = int(rng.integers(0 if allow_empty else 1, 3))
        nn = int(rng.integers(0 if allow_empty else 1, 4))
        verbs = rng.choice(n_verbs, size=nv, replace=False)
        nouns = rng.choice(n_nouns, size=nn, replace=False)
        out.append(CaptionAnnotation(item_id=f"a{i}", verbs=verbs, nouns=nouns))
    return out


def quick_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=4,
        batch_size=64,
        learning_rate=0.05,
        momentum=0.9,
        seed=7,
        embed_dim=8,
        hidden_dim=12,
        val_interval=2,
        patience=10,
        loss=LossConfig(terms=("cross-global",), margin=MarginSpec("relevance")),
        mining=MiningConfig("offline", "none", 2),
    )
    base.update(overrides)
    return TrainConfig(**base)
