"""Two-stage KV-cache compression for autoregressive decoding.

Instruction tokens are merged into high-importance anchors at prefill; during
generation the cache is held at budget by fixed-point elimination. Full, Local
and H2O baselines and the ablation variants share the same machinery.
"""

from .cache import (
    BucketPartition,
    CacheError,
    CacheSlot,
    Discard,
    LayerKvCache,
    MergeMode,
    PolicyConfig,
    PolicyKind,
    Scope,
    Statistic,
)
from .model import ModelConfig, TinyTransformer, generate, init_model, teacher_force
from .policies import (
    CacheSet,
    elastic_decode_update,
    elastic_prefill_compress,
    h2o_decode_update,
    importance_scores,
    local_decode_update,
    merge_buckets,
    partition_buckets,
    select_anchors,
)

__version__ = "0.1.0"
