"""Sharded bidirectional contrastive loss with exact gradient reconstruction.

The full-batch loss over B image-text pairs needs a B x B similarity
matrix.  Splitting the batch over N ranks lets each rank work with two
b x B blocks (b = B/N) and reconstruct the exact full-batch gradients with
one all_reduce, cutting the loss-scope memory from B^2 to 2*B^2/N elements
and the similarity FLOPs by the same factor.  This package implements both
routes over an in-process deterministic collective fabric, proves their
equivalence numerically, and models the cost accounting analytically.
"""

from .costs import (
    CostInputs,
    CostReport,
    analytic_footprint,
    bytes_moved,
    measured_detail,
    measured_footprint,
    reports_to_csv,
    reports_to_json,
    reports_to_table,
    savings_fraction,
)
from .counters import Counters, tracking
from .errors import (
    CollectiveContractError,
    CollectiveTimeoutError,
    DeadlockError,
    DegenerateInputError,
    DomainError,
    LayoutError,
    ShapeError,
    TrainingDivergenceError,
)
from .fabric import CONCURRENT, LOCKSTEP, RankEndpoint, RankGroup, ReduceOp, run_ranks
from .matrix import (
    cross_entropy_mean,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    matmul,
    max_rel_error,
    row_softmax,
    softmax_ce_grad,
)
from .oracle import (
    FeatureBatch,
    GradPair,
    LossBreakdown,
    clip_grad_full,
    clip_loss_full,
    finite_diff_grad,
)
from .shard import (
    LocalGradContribution,
    ShardLayout,
    disco_step,
    local_labels,
    local_loss_and_grads,
    shard_slice,
)
from .towers import (
    PairedDataset,
    TowerParams,
    TrainConfig,
    encode,
    encode_backward,
    generate_dataset,
    init_tower_params,
    naive_param_grads,
    train_run,
)

__version__ = "0.1.0"

__all__ = [
    "CollectiveContractError",
    "CollectiveTimeoutError",
    "CONCURRENT",
    "CostInputs",
    "CostReport",
    "Counters",
    "DeadlockError",
    "DegenerateInputError",
    "DomainError",
    "FeatureBatch",
    "GradPair",
    "LayoutError",
    "LocalGradContribution",
    "LOCKSTEP",
    "LossBreakdown",
    "PairedDataset",
    "RankEndpoint",
    "RankGroup",
    "ReduceOp",
    "ShapeError",
    "ShardLayout",
    "TowerParams",
    "TrainConfig",
    "TrainingDivergenceError",
    "analytic_footprint",
    "bytes_moved",
    "clip_grad_full",
    "clip_loss_full",
    "cross_entropy_mean",
    "disco_step",
    "encode",
    "encode_backward",
    "finite_diff_grad",
    "generate_dataset",
    "init_tower_params",
    "l2_normalize_rows",
    "l2_normalize_rows_backward",
    "local_labels",
    "local_loss_and_grads",
    "matmul",
    "max_rel_error",
    "measured_detail",
    "measured_footprint",
    "naive_param_grads",
    "reports_to_csv",
    "reports_to_json",
    "reports_to_table",
    "row_softmax",
    "run_ranks",
    "savings_fraction",
    "shard_slice",
    "softmax_ce_grad",
    "tracking",
    "train_run",
]
