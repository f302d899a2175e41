"""tartan: instruction-aware retrieval at desk scale.

A retrieval task pairs queries with a natural-language instruction
describing what counts as relevant; scorers condition on the instruction,
negative mining includes documents from other tasks' corpora, and
evaluation contrasts each task's own corpus with a pooled cross-task one.
"""

from .checkpoint import fingerprint_params, load_checkpoint, save_checkpoint
from .encoder import (
    CrossParams,
    DualParams,
    Embedding,
    FeatureIds,
    embed,
    embed_query,
    embed_texts,
    featurize,
    init_cross_params,
    init_dual_params,
    score_cross,
    score_dual,
    tokenize,
)
from .errors import DataError, NumericError, TartanError
from .evaluation import (
    ExperimentConfig,
    RunReport,
    ablate_instructions,
    evaluate_pooled,
    make_dense_system,
    ndcg_at_k,
    recall_at_k,
    success_at_k,
    train_dual_model,
)
from .mining import (
    MiningConfig,
    build_training_instances,
    mine_hard_negatives,
    mine_unfollowing,
    read_pools,
    sample_negatives,
    write_pools,
)
from .schema import (
    Document,
    Instruction,
    NO_INSTRUCTION,
    Qrels,
    Query,
    Task,
    TrainingInstance,
    ValidationReport,
    compose_input,
    load_benchmark,
    load_task,
    save_benchmark,
    save_task,
    unify_dataset,
    validate_task,
)
from .search import (
    Bm25Stats,
    DenseIndex,
    RankedHit,
    bm25_search,
    build_index,
    load_index,
    pipeline_retrieve,
    rerank,
    retrieval_run,
    save_index,
    search_topk,
    write_run,
)
from .synth import SynthSpec, generate_benchmark
from .training import (
    CrossBatch,
    CrossItem,
    DualBatch,
    DualItem,
    TrainConfig,
    cross_loss_grad,
    distill_refresh,
    dual_loss_grad,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Bm25Stats",
    "CrossBatch",
    "CrossItem",
    "CrossParams",
    "DataError",
    "DenseIndex",
    "Document",
    "DualBatch",
    "DualItem",
    "DualParams",
    "Embedding",
    "ExperimentConfig",
    "FeatureIds",
    "Instruction",
    "MiningConfig",
    "NO_INSTRUCTION",
    "NumericError",
    "Qrels",
    "Query",
    "RankedHit",
    "RunReport",
    "SynthSpec",
    "TartanError",
    "Task",
    "TrainConfig",
    "TrainingInstance",
    "ValidationReport",
    "ablate_instructions",
    "bm25_search",
    "build_index",
    "build_training_instances",
    "compose_input",
    "cross_loss_grad",
    "distill_refresh",
    "dual_loss_grad",
    "embed",
    "embed_query",
    "embed_texts",
    "evaluate_pooled",
    "featurize",
    "fingerprint_params",
    "generate_benchmark",
    "init_cross_params",
    "init_dual_params",
    "load_benchmark",
    "load_checkpoint",
    "load_index",
    "load_task",
    "make_dense_system",
    "mine_hard_negatives",
    "mine_unfollowing",
    "ndcg_at_k",
    "pipeline_retrieve",
    "read_pools",
    "recall_at_k",
    "rerank",
    "retrieval_run",
    "sample_negatives",
    "save_benchmark",
    "save_checkpoint",
    "save_index",
    "save_task",
    "score_cross",
    "score_dual",
    "search_topk",
    "success_at_k",
    "tokenize",
    "train",
    "train_dual_model",
    "unify_dataset",
    "validate_task",
    "write_pools",
    "write_run",
]
