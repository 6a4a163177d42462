"""Desk-scale transformer engine with trainable layer-skip gates: a numpy
tensor core with reverse-mode autodiff, a decoder backbone with KV caching,
threshold routers trained via straight-through gradients against a capacity
hinge, mixture-of-experts skipping, and a cost-accounting benchmark harness.
"""

from .bench import (
    CostReport,
    EvalReport,
    benchmark_speed,
    equal_compute_report,
    evaluate_ppl,
    export_trace,
    layer_drop_baseline,
    load_trace,
    skip_ratio_summary,
)
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import Dataset, ingest_corpus, split_dataset, synthetic_corpus
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    DataError,
    PlanError,
    ShapeError,
    SkipgateError,
    StateError,
)
from .flops import FlopReport, count_flops
from .model import (
    KVCache,
    Model,
    ModelConfig,
    MoESettings,
    attention_layer,
    build_model,
    forward_dense,
    mlp_layer,
)
from .moe import (
    ExpertDropPlan,
    ExpertLoadReport,
    ExpertSkipRouters,
    expert_drop_baseline,
    moe_forward_skip,
    moe_layer_dense,
)
from .routing import (
    RoutePlan,
    RouterSpec,
    RouterState,
    SequenceSession,
    SkipMask,
    SkipTrace,
    binarize,
    default_plan,
    generate,
    infer_eval,
    init_routers,
    mod_forward_infer,
    mod_forward_train,
    route_score,
    train_forward,
    train_infer_gap,
)
from .tensor import FlopCounter, Tape, Tensor
from .training import (
    Adam,
    GridResult,
    LossBreakdown,
    TrainConfig,
    grid_search,
    mod_loss,
    pretrain_backbone,
    train_routers,
)

__version__ = "0.1.0"
