"""Iterative contrastive matching of public comment chunks to regulator responses."""

from .corpus import (
    CommentChunk,
    CommentDocument,
    CorpusStats,
    Response,
    RuleObservation,
    chunk_corpus,
    chunk_document,
    filter_rules,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from .encoder import (
    EmbeddingCache,
    EncoderParams,
    FeatureVector,
    build_embedding_cache,
    embed,
    embed_gradient,
    featurize,
    init_params,
    load_cache,
    load_checkpoint,
    params_checksum,
    save_cache,
    save_checkpoint,
)
from .evaluation import (
    AnnotatedPair,
    EvalReport,
    evaluate_method,
    iteration_curve,
    load_annotations,
    pearson,
    sample_binned_test_set,
)
from .mining import (
    HardSample,
    LossMatrix,
    PositivePair,
    build_corpus_cache,
    build_loss_matrix,
    mine_positive_pairs,
    select_hard_samples,
)
from .scoring import (
    NEGATIVE,
    POSITIVE,
    MatchScore,
    ScoringConfig,
    bce_loss,
    loss_gradient,
    match_probability,
)
from .trainer import (
    IterationReport,
    OptimizerState,
    TrainConfig,
    apply_update,
    run_iteration,
    train,
)

__version__ = "0.1.0"
