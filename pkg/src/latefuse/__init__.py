"""latefuse: late-interaction scoring over stored per-token hidden states,
fused with the pooled single-vector score of the same encoder."""

from .adapter import (
    AdapterGradients,
    AdapterParams,
    Optimizer,
    TrainConfig,
    TrainResult,
    adapted_late_score,
    adapter_forward,
    adapter_gradients,
    batch_loss,
    evaluate_mean_loss,
    infonce_loss,
    init_adapter_params,
    train_adapter,
)
from .embeddings import (
    DEFAULT_EXCLUDED_ROLES,
    Mode,
    RetrievalResult,
    ScoreBreakdown,
    SequenceEmbedding,
    TokenRole,
    normalize_rows,
    score_for_mode,
    valid_indices,
)
from .errors import LateFuseError
from .evaluation import (
    EvalReport,
    LAST_LAYER,
    LayerSweepConfig,
    LayerSweepRow,
    MetricSpec,
    Qrels,
    layer_sweep,
    ndcg_at_k,
    recall_at_k,
    records_by_layer,
    run_eval,
)
from .dumps import (
    DumpReader,
    Manifest,
    ValidationReport,
    build_manifest,
    load_adapter_params,
    read_dump,
    read_manifest,
    save_adapter_params,
    validate_dump,
    write_dump,
    write_manifest,
)
from .scoring import (
    MatchExplanation,
    ScoringConfig,
    explain_matches,
    hybrid_score,
    match_records,
    match_records_jsonl,
    maxsim_blocked,
    maxsim_reference,
    pooled_score,
    score_corpus,
)
from .toybench import (
    BenchmarkSpec,
    BindingDocument,
    SyntheticCodebook,
    generate_benchmark,
    generate_derangement,
    load_benchmark,
    pairwise_accuracy,
    save_benchmark,
    synthetic_encode_document,
    synthetic_encode_query,
    training_pairs,
)

__version__ = "0.1.0"
