"""Per-rank decomposition of the contrastive loss with exact gradient exchange.

Each rank holds b = B/N feature rows and computes two b x B similarity
blocks against the gathered global features, never a full B x B matrix.
The chain rule splits each rank's loss over the gathered features into an
intra-rank part (rows the rank owns) and cross-rank contributions to every
other rank's rows; averaging the full-size contributions across ranks with
all_reduce reconstructs the full-batch gradients exactly.

With P_i = row_softmax(t * I_n @ T.T), labels the rank's global row indices,
and the 1/2 loss scale folded in once (G = (P - Y) / (2b)):

    d_image_full  =  scatter_rows(t * G_i @ T, rows of rank n)  +  t * G_t.T @ T_n
    d_text_full   =  scatter_rows(t * G_t @ I, rows of rank n)  +  t * G_i.T @ I_n

The first term lands only in the rank's own rows; the second spreads over
all B rows and carries the cross-rank information.
"""

from dataclasses import dataclass

import numpy as np

from .counters import Counters, tracking
from .errors import DomainError, LayoutError, ShapeError
from .fabric import RankEndpoint, ReduceOp
from .matrix import _check_finite, _softmax_ce_grad_inplace, cross_entropy_mean, matmul


@dataclass(frozen=True)
class ShardLayout:
    """Which contiguous slice of the global batch a rank owns."""

    world_size: int
    global_batch: int
    rank: int

    def __post_init__(self):
        if self.world_size < 1:
            raise LayoutError(f"world size must be >= 1, got {self.world_size}")
        if self.global_batch < 1:
            raise LayoutError(f"global batch must be >= 1, got {self.global_batch}")
        if self.global_batch % self.world_size != 0:
            raise LayoutError(
                f"global batch {self.global_batch} is not divisible by "
                f"world size {self.world_size}")
        if not 0 <= self.rank < self.world_size:
            raise LayoutError(
                f"rank {self.rank} outside [0, {self.world_size})")

    @property
    def local_batch(self) -> int:
        return self.global_batch // self.world_size

    @property
    def row_slice(self) -> slice:
        start = self.rank * self.local_batch
        return slice(start, start + self.local_batch)


@dataclass(frozen=True)
class LocalGradContribution:
    """One rank's full-size (B x D) additive contribution to the global gradients.

    Rows inside the rank's slice hold its intra-rank terms plus its share of
    the cross-rank sums; rows outside the slice hold only this rank's
    contributions to other ranks' features.
    """

    d_image_full: np.ndarray
    d_text_full: np.ndarray
    local_loss: float

    def __post_init__(self):
        if self.d_image_full.shape != self.d_text_full.shape:
            raise ShapeError(
                f"contribution shapes disagree: {self.d_image_full.shape} "
                f"vs {self.d_text_full.shape}")
        _check_finite(self.d_image_full, "image contribution")
        _check_finite(self.d_text_full, "text contribution")


def shard_slice(layout: ShardLayout, full: np.ndarray) -> np.ndarray:
    """Rows [n*b, (n+1)*b) of a global matrix, as a view."""
    if full.shape[0] != layout.global_batch:
        raise LayoutError(
            f"matrix has {full.shape[0]} rows, layout expects "
            f"{layout.global_batch}")
    return full[layout.row_slice]


def local_labels(layout: ShardLayout) -> np.ndarray:
    """Global column indices of the rank's positive pairs: arange(b) + b*rank."""
    b = layout.local_batch
    return np.arange(b) + b * layout.rank


def local_loss_and_grads(layout: ShardLayout, I_gathered: np.ndarray,
                         T_gathered: np.ndarray, t: float, *,
                         loss_counters: Counters | None = None,
                         exchange_counters: Counters | None = None,
                         flip_cross_rank_sign: bool = False) -> LocalGradContribution:
    """One rank's loss rows and full-size gradient contribution.

    Works entirely from the two b x B similarity blocks; after the loss is
    read off, each block is overwritten in place with its scaled softmax
    cross-entropy gradient, so the loss-scope peak is exactly 2*b*B
    elements.  ``flip_cross_rank_sign`` is a test hook that negates the
    rows outside the rank's slice (the cross-rank terms); it is a no-op at
    world size 1.
    """
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")
    if I_gathered.shape != T_gathered.shape:
        raise ShapeError(
            f"gathered shapes disagree: {I_gathered.shape} vs {T_gathered.shape}")
    if I_gathered.shape[0] != layout.global_batch:
        raise LayoutError(
            f"gathered matrices have {I_gathered.shape[0]} rows, layout "
            f"expects {layout.global_batch}")
    if loss_counters is None:
        loss_counters = Counters()
    if exchange_counters is None:
        exchange_counters = Counters()

    b = layout.local_batch
    batch, dim = I_gathered.shape
    rows = layout.row_slice
    I_n = I_gathered[rows]
    T_n = T_gathered[rows]
    labels = local_labels(layout)

    with tracking(loss_counters):
        logits_i = matmul(I_n, T_gathered, transpose_b=True)
        logits_t = matmul(T_n, I_gathered, transpose_b=True)
    logits_i *= t
    logits_t *= t
    loss_counters.alloc(2 * b * batch)

    local_loss = (cross_entropy_mean(logits_i, labels)
                  + cross_entropy_mean(logits_t, labels)) / 2.0

    # Overwrite each block with G = (P - Y) / (2b); the 1/2 is the loss scale.
    _softmax_ce_grad_inplace(logits_i, labels, 0.5 / b)
    _softmax_ce_grad_inplace(logits_t, labels, 0.5 / b)
    G_i, G_t = logits_i, logits_t

    with tracking(exchange_counters):
        d_image_full = matmul(G_t.T, T_n)
        d_image_full[rows] += matmul(G_i, T_gathered)
        d_text_full = matmul(G_i.T, I_n)
        d_text_full[rows] += matmul(G_t, I_gathered)
    d_image_full *= t
    d_text_full *= t
    exchange_counters.alloc(2 * batch * dim)
    loss_counters.release(2 * b * batch)

    if flip_cross_rank_sign:
        d_image_full[:rows.start] *= -1.0
        d_image_full[rows.stop:] *= -1.0
        d_text_full[:rows.start] *= -1.0
        d_text_full[rows.stop:] *= -1.0

    return LocalGradContribution(
        d_image_full=d_image_full, d_text_full=d_text_full,
        local_loss=float(local_loss))


def disco_step(endpoint: RankEndpoint, local_I: np.ndarray, local_T: np.ndarray,
               t: float, *, loss_counters: Counters | None = None,
               exchange_counters: Counters | None = None,
               flip_cross_rank_sign: bool = False):
    """One rank's share of the sharded loss step.

    Gathers both feature sets, computes this rank's contribution, averages
    the full-size contributions and the loss across ranks, and returns this
    rank's b x D slices of the averaged gradients plus the global loss.
    """
    if local_I.shape != local_T.shape:
        raise ShapeError(
            f"local feature shapes disagree: {local_I.shape} vs {local_T.shape}")
    if exchange_counters is None:
        exchange_counters = Counters()
    layout = ShardLayout(
        world_size=endpoint.world_size,
        global_batch=local_I.shape[0] * endpoint.world_size,
        rank=endpoint.rank)
    batch, dim = layout.global_batch, local_I.shape[1]

    I_gathered = endpoint.all_gather(local_I)
    T_gathered = endpoint.all_gather(local_T)
    exchange_counters.alloc(2 * batch * dim)

    contribution = local_loss_and_grads(
        layout, I_gathered, T_gathered, t,
        loss_counters=loss_counters, exchange_counters=exchange_counters,
        flip_cross_rank_sign=flip_cross_rank_sign)

    d_image = endpoint.all_reduce(contribution.d_image_full, ReduceOp.AVG)
    exchange_counters.alloc(batch * dim)
    exchange_counters.release(batch * dim)  # contribution buffer retired
    d_text = endpoint.all_reduce(contribution.d_text_full, ReduceOp.AVG)
    exchange_counters.alloc(batch * dim)
    exchange_counters.release(batch * dim)
    global_loss = endpoint.all_reduce_scalar(contribution.local_loss, ReduceOp.AVG)

    rows = layout.row_slice
    return d_image[rows], d_text[rows], global_loss
