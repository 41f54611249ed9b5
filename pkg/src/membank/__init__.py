"""Sampled feature memory bank with multi-head relation enhancement."""
from .estimators import CosineNearestCentroid, MemoryBankEnhancer
from .geo import (
    GeoConfig,
    GeoParams,
    attention_weights,
    enhance_batch,
    geo_enhance,
    geo_reference,
    geo_stack,
    relation_feature,
    similarity,
    stack_batch,
)
from .memory_bank import (
    BankStats,
    EvictionReport,
    MemoryBank,
    SamplingStrategy,
    Scope,
    UpdatePolicy,
)
from .pipeline import (
    BankConfig,
    FrameFeatures,
    FrameResult,
    PipelineConfig,
    VideoRunner,
    enhance_via_mem_bank,
    run_video,
    update_banks,
)
from .synthgen import ScoreModel, StreamSpec, generate_stream, labeled_eval_set
from .types import (
    DimensionMismatch,
    EmptyVector,
    FeatureVector,
    InvalidScore,
    KeySet,
    Level,
    NonFinite,
    ScoredFeature,
    frame_entropy,
    new_feature,
    seeded_rng,
)

__version__ = "0.1.0"
