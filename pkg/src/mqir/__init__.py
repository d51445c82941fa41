"""Multi-query image retrieval: hierarchical matching + graph reasoning."""

from .data import (Batch, Dataset, QuerySet, Record, RegionFeatureSet,
                   SyntheticConfig, SyntheticWorld, Vocabulary,
                   build_vocabulary, generate_synthetic_dataset,
                   iterate_batches, load_dataset, save_dataset, tokenize_query)
from .estimator import MultiQueryRetriever
from .evaluation import (MetricsReport, RoundRanking, compute_metrics,
                         count_parameters, default_ablation_grid, evaluate,
                         format_report, rank_gallery, run_ablation)
from .losses import (aggregate_similarity, ensemble_similarity, infonce_loss,
                     total_loss)
from .model import ModelConfig, RetrievalScorer, SimilarityBundle
from .training import TrainConfig, TrainResult, train_model, train_split_pair

__version__ = "0.1.0"

__all__ = [
    "Batch", "Dataset", "QuerySet", "Record", "RegionFeatureSet",
    "SyntheticConfig", "SyntheticWorld", "Vocabulary", "build_vocabulary",
    "generate_synthetic_dataset", "iterate_batches", "load_dataset",
    "save_dataset", "tokenize_query", "MultiQueryRetriever", "MetricsReport",
    "RoundRanking", "compute_metrics", "count_parameters",
    "default_ablation_grid", "evaluate", "format_report", "rank_gallery",
    "run_ablation", "aggregate_similarity", "ensemble_similarity",
    "infonce_loss", "total_loss", "ModelConfig", "RetrievalScorer",
    "SimilarityBundle", "TrainConfig", "TrainResult", "train_model",
    "train_split_pair",
]
