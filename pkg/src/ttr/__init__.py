"""Two-tower embedding retrieval for high-cardinality ID features.

Trains and evaluates dot-product retrieval models where the user side is
either a raw user-ID embedding (DMF) or a pooled bag of previously ordered
stores, optionally sharing one embedding table between both towers. The
training loss is an in-batch sampled softmax with logQ correction,
accidental-hit removal, a cross-batch negative cache, and a temperature.
"""

from .data_model import (
    BagOfStores,
    InteractionRecord,
    SplitDataset,
    Vocabulary,
    build_bow_features,
    build_vocabularies,
    ingest_interactions,
    temporal_split,
    write_interactions,
)
from .embedding import (
    EmbeddingTable,
    adagrad_update,
    apply_gradients,
    lookup,
    new_table,
    pooled_backward,
    pooled_lookup,
)
from .evaluation import MetricsReport, evaluate, hit_rate_at_k, map_at_k, ndcg_at_k, top_k
from .loss import (
    FrequencyTable,
    LossOutput,
    NegativeCache,
    accidental_hit_mask,
    cache_push,
    freq_update,
    inbatch_softmax_loss,
)
from .synthgen import SynthConfig, generate
from .towers import (
    ModelConfig,
    TwoTowerModel,
    Variant,
    build_model,
    item_forward,
    parameter_count,
    query_forward,
    score,
)
from .trainer import (
    TrainConfig,
    TrainingLog,
    load_checkpoint,
    save_checkpoint,
    steps_to_threshold,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BagOfStores",
    "EmbeddingTable",
    "FrequencyTable",
    "InteractionRecord",
    "LossOutput",
    "MetricsReport",
    "ModelConfig",
    "NegativeCache",
    "SplitDataset",
    "SynthConfig",
    "TrainConfig",
    "TrainingLog",
    "TwoTowerModel",
    "Variant",
    "Vocabulary",
    "accidental_hit_mask",
    "adagrad_update",
    "apply_gradients",
    "build_bow_features",
    "build_model",
    "build_vocabularies",
    "cache_push",
    "evaluate",
    "freq_update",
    "generate",
    "hit_rate_at_k",
    "inbatch_softmax_loss",
    "ingest_interactions",
    "item_forward",
    "load_checkpoint",
    "lookup",
    "map_at_k",
    "ndcg_at_k",
    "new_table",
    "parameter_count",
    "pooled_backward",
    "pooled_lookup",
    "query_forward",
    "save_checkpoint",
    "score",
    "steps_to_threshold",
    "temporal_split",
    "top_k",
    "train",
    "write_interactions",
]
