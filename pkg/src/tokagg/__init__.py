"""Joint local-feature aggregation: attention tokenizer, refinement blocks,
margin-trained global descriptors, PQ compression, and retrieval evaluation."""

from .aggregation import (
    AttentionMaps,
    FeatureMap,
    LfsaParams,
    TokenizerMode,
    TokenizerParams,
    TokenSet,
    attention_entropy,
    lfsa_forward,
    tokenize,
    tokenize_gmm_oracle,
    tokenize_learned,
)
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateInputError,
    EvaluationError,
    FormatError,
    ShapeMismatchError,
    StateError,
    TokaggError,
    UndefinedAPError,
)
from .quantization import (
    PQCodebook,
    adc_distance,
    adc_table,
    kmeans_fit,
    pq_decode,
    pq_encode,
    pq_train,
)
from .refinement import (
    HeadParams,
    ModelConfig,
    ModelParams,
    RefinementBlockParams,
    forward_descriptor,
    head_project,
    init_model,
    mha_cross,
    mha_self,
    multiscale_descriptor,
    refine_stack,
)
from .retrieval import (
    DescriptorIndex,
    GroundTruth,
    Protocol,
    QueryGroundTruth,
    Ranking,
    average_precision,
    bench,
    evaluate_map,
    memory_bytes,
    search_topk,
)
from .tensor import Tensor, vjp_check
from .training import (
    ArcFaceParams,
    OptimizerState,
    SyntheticDatasetSpec,
    adjusted_cosine,
    arcface_loss,
    grad_check_full_model,
    sgd_step,
    synth_generate,
    train,
)

__version__ = "0.1.0"
