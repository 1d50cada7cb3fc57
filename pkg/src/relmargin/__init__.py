"""Training and evaluation toolkit for cross-modal retrieval where the
triplet-loss margin is priced by graded relevance between items."""

from .relevance import (
    CaptionAnnotation,
    LEVELS,
    RelevanceMatrix,
    margin_for,
    pairwise_relevance,
    pos_relevance,
    relevance,
    relevance_matrix,
)
from .metrics import (
    EvalReport,
    RankingList,
    average_precision,
    dcg,
    evaluate,
    ndcg,
    recall_at_k,
)
from .mining import (
    DIRECTIONS,
    MarginHistogram,
    Triplet,
    TripletBatch,
    margin_histogram,
    mine_offline,
    mine_online_hard,
)
from .loss import (
    LossConfig,
    LossValue,
    MarginSpec,
    TERMS,
    batch_loss,
    parse_terms,
    relevance_triplet_loss,
    similarity,
    triplet_loss,
    triplet_margins,
)
from .model import EmbeddingModel, Tower
from .data import (
    Dataset,
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    save_dataset,
)
from .training import (
    MiningConfig,
    TrainConfig,
    TrainLog,
    TrainingDivergedError,
    grad_check,
    train,
)
from .benchmark import (
    FIXED_MARGINS,
    STANDARD_SPEC,
    SWEEP_SEEDS,
    SweepReport,
    benchmark_config,
    run_sweep,
    standard_dataset,
)
from .estimator import RelevanceMarginEmbedder

__version__ = "0.1.0"

__all__ = [
    "CaptionAnnotation",
    "LEVELS",
    "RelevanceMatrix",
    "margin_for",
    "pairwise_relevance",
    "pos_relevance",
    "relevance",
    "relevance_matrix",
    "EvalReport",
    "RankingList",
    "average_precision",
    "dcg",
    "evaluate",
    "ndcg",
    "recall_at_k",
    "DIRECTIONS",
    "MarginHistogram",
    "Triplet",
    "TripletBatch",
    "margin_histogram",
    "mine_offline",
    "mine_online_hard",
    "LossConfig",
    "LossValue",
    "MarginSpec",
    "TERMS",
    "batch_loss",
    "parse_terms",
    "relevance_triplet_loss",
    "similarity",
    "triplet_loss",
    "triplet_margins",
    "EmbeddingModel",
    "Tower",
    "Dataset",
    "DatasetError",
    "SyntheticSpec",
    "generate_synthetic",
    "load_dataset",
    "load_dataset_dir",
    "save_dataset",
    "MiningConfig",
    "TrainConfig",
    "TrainLog",
    "TrainingDivergedError",
    "grad_check",
    "train",
    "FIXED_MARGINS",
    "STANDARD_SPEC",
    "SWEEP_SEEDS",
    "SweepReport",
    "benchmark_config",
    "run_sweep",
    "standard_dataset",
    "RelevanceMarginEmbedder",
    "__version__",
]
