"""Scikit-learn style wrapper around the trainer.

`RelevanceMarginEmbedder` is a fit/transform estimator whose constructor
params mirror TrainConfig as plain strings and scalars, so it works with
``get_params``/``set_params``, cloning, and grid search.  ``fit`` takes a
`Dataset` (the samples are paired across two modalities, which a flat X
matrix cannot express); ``transform`` maps raw feature rows of one
modality into the joint space.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .loss import LossConfig, MarginSpec, parse_terms
from .metrics import EvalReport, evaluate
from .training import MiningConfig, TrainConfig, train


class RelevanceMarginEmbedder(BaseEstimator):
    """Two-tower joint embedding trained with margin-priced triplet loss.

    Parameters are accepted in their CLI string forms (``margin="fixed:0.5"``,
    ``mining="offline:verbdiff"``, ``loss_terms="cross-global,within-verb"``)
    or as the corresponding config objects.
    """

    def __init__(
        self,
        epochs=40,
        batch_size=256,
        learning_rate=0.05,
        momentum=0.9,
        seed=1,
        embed_dim=64,
        hidden_dim=None,
        val_interval=5,
        patience=4,
        margin="relevance",
        mining="offline",
        per_example=3,
        loss_terms="cross-global",
        term_weights=None,
        modality="video",
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.val_interval = val_interval
        self.patience = patience
        self.margin = margin
        self.mining = mining
        self.per_example = per_example
        self.loss_terms = loss_terms
        self.term_weights = term_weights
        self.modality = modality

    def _train_config(self) -> TrainConfig:
        margin = self.margin if isinstance(self.margin, MarginSpec) else MarginSpec.parse(self.margin)
        if isinstance(self.mining, MiningConfig):
            mining = self.mining
        else:
            mining = MiningConfig.parse(self.mining, per_example=self.per_example)
        terms = (
            parse_terms(self.loss_terms)
            if isinstance(self.loss_terms, str)
            else tuple(self.loss_terms)
        )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.seed,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            val_interval=self.val_interval,
            patience=self.patience,
            loss=LossConfig(terms=terms, margin=margin, term_weights=self.term_weights),
            mining=mining,
        )

    def fit(self, X: Dataset, y=None):
        """Train on a Dataset; y is ignored (pairing lives in the dataset)."""
        if not isinstance(X, Dataset):
            raise TypeError(
                f"fit expects a Dataset (paired modalities and splits), got {type(X).__name__}"
            )
        if self.modality not in ("video", "text"):
            raise ValueError(f"modality must be 'video' or 'text', got {self.modality!r}")
        config = self._train_config()
        self.model_, self.log_ = train(X, config)
        self.config_ = config
        self.n_features_video_ = X.f_v
        self.n_features_text_ = X.f_q
        return self

    def _encode(self, X, modality: str) -> np.ndarray:
        check_is_fitted(self, "model_")
        expected = self.n_features_video_ if modality == "video" else self.n_features_text_
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != expected:
            raise ValueError(f"{modality} features have {X.shape[1]} dims, expected {expected}")
        if modality == "video":
            return self.model_.encode_video(X)
        return self.model_.encode_text(X)

    def transform(self, X) -> np.ndarray:
        """Embed raw feature rows of the configured modality (unit-norm rows)."""
        return self._encode(X, self.modality)

    def encode_video(self, X) -> np.ndarray:
        return self._encode(X, "video")

    def encode_text(self, X) -> np.ndarray:
        return self._encode(X, "text")

    def evaluate(self, X: Dataset, split: str = "test") -> EvalReport:
        """Retrieval metrics of the fitted model on one split of a Dataset."""
        check_is_fitted(self, "model_")
        if not isinstance(X, Dataset):
            raise TypeError(f"evaluate expects a Dataset, got {type(X).__name__}")
        return evaluate(self.model_, X, X.splits[split])

    def score(self, X: Dataset, y=None) -> float:
        """Direction-averaged test nDCG in [0, 1]; higher is better."""
        return self.evaluate(X).ndcg_avg
