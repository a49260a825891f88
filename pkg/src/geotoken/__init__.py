"""Hierarchical geocell tokenization and retrieval-augmented geolocalization."""

from .align import AlignConfig, AlignEncoder, Embedding, encode_gps, train_align
from .config import PredictConfig, RunConfig, SweepConfig
from .decode import (
    Candidate,
    CandidatePool,
    beam_search,
    greedy,
    greedy_batch,
    sample_pool,
)
from .errors import (
    ConfigError,
    DataFormatError,
    GeoTokenError,
    InvalidInputError,
    NumericalError,
)
from .gallery import Gallery, RetrievalResult
from .geocell import (
    DEFAULT_LEVELS,
    EARTH_RADIUS_KM,
    CellId,
    LatLon,
    TokenSequence,
    cell_diagonal_km,
    cell_id_of,
    common_prefix_len,
    common_prefix_len_batch,
    detokenize,
    detokenize_batch,
    tokenize,
    tokenize_batch,
)
from .geodesy import AccuracyReport, evaluate, evaluate_errors, haversine_km, haversine_km_batch
from .rerank import (
    JudgeClient,
    JudgeConfig,
    JudgeResult,
    RewardModelParams,
    select_ideal,
    select_judge,
    select_logprob,
    select_reward,
    select_similarity,
    train_reward_model,
)
from .seqmodel import EncoderInput, ModelConfig, TrainConfig, load_model, neighbor_context
from .synthworld import WorldConfig, generate, knn_baseline, knn_baseline_batch

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport",
    "AlignConfig",
    "AlignEncoder",
    "Candidate",
    "CandidatePool",
    "CellId",
    "ConfigError",
    "DataFormatError",
    "DEFAULT_LEVELS",
    "EARTH_RADIUS_KM",
    "Embedding",
    "EncoderInput",
    "Gallery",
    "GeoTokenError",
    "InvalidInputError",
    "JudgeClient",
    "JudgeConfig",
    "JudgeResult",
    "LatLon",
    "ModelConfig",
    "NumericalError",
    "PredictConfig",
    "RetrievalResult",
    "RewardModelParams",
    "RunConfig",
    "SweepConfig",
    "TokenSequence",
    "TrainConfig",
    "WorldConfig",
    "beam_search",
    "cell_diagonal_km",
    "cell_id_of",
    "common_prefix_len",
    "common_prefix_len_batch",
    "detokenize",
    "detokenize_batch",
    "encode_gps",
    "evaluate",
    "evaluate_errors",
    "generate",
    "greedy",
    "greedy_batch",
    "haversine_km",
    "haversine_km_batch",
    "knn_baseline",
    "knn_baseline_batch",
    "load_model",
    "neighbor_context",
    "sample_pool",
    "select_ideal",
    "select_judge",
    "select_logprob",
    "select_reward",
    "select_similarity",
    "tokenize",
    "tokenize_batch",
    "train_align",
    "train_reward_model",
]
