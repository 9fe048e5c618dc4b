"""Full-batch reference computation of the contrastive loss and its gradients.

This is the ground truth the sharded path must match.  Both loss directions
come from a single B x B similarity matrix S = t * I @ T.T: the image-to-text
direction reads S row-wise and the text-to-image direction reads the
transpose as a view, never a copy.  The instrumented gradient path then
transforms the similarity buffer in place into the combined logit gradient,
so its loss-scope peak is exactly B*B elements; the B x D gradient products
are accounted separately as exchange buffers.

Gradients are with respect to the post-normalization features.  With
P1 = row_softmax(S), P2 = row_softmax(S.T), Y the identity, and the 1/2
loss scale folded in once:

    G = (P1 - Y + (P2 - Y).T) / (2B)
    d_image = t * G @ T
    d_text  = t * G.T @ I
"""

from dataclasses import dataclass

import numpy as np

from .counters import Counters, tracking
from .errors import DomainError, ShapeError
from .matrix import _check_finite, as_dense, cross_entropy_mean, matmul

NORM_TOLERANCE = 1e-9

ROLES = ("image", "text")


@dataclass(frozen=True)
class FeatureBatch:
    """A B x D matrix of row-normalized embeddings with a modality tag."""

    features: np.ndarray
    role: str

    def __post_init__(self):
        object.__setattr__(self, "features", as_dense(self.features))
        if self.role not in ROLES:
            raise DomainError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ShapeError(f"feature batch must be nonempty, got {self.features.shape}")
        norms = np.linalg.norm(self.features, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOLERANCE:
            raise DomainError(
                f"rows must be unit-norm within {NORM_TOLERANCE:.0e}; "
                f"worst deviation {worst:.3e}")

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LossBreakdown:
    """Total contrastive loss and its two directional halves."""

    total: float
    image_to_text: float
    text_to_image: float
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if abs(self.total - (self.image_to_text + self.text_to_image) / 2.0) > 1e-12:
            raise ValueError("total must equal the mean of the two directions")


@dataclass(frozen=True)
class GradPair:
    """Feature gradients (d_image, d_text), each B x D, with the loss they belong to."""

    d_image: np.ndarray
    d_text: np.ndarray
    loss: LossBreakdown

    def __post_init__(self):
        if self.d_image.shape != self.d_text.shape:
            raise ShapeError(
                f"gradient shapes disagree: {self.d_image.shape} vs {self.d_text.shape}")
        _check_finite(self.d_image, "image gradient")
        _check_finite(self.d_text, "text gradient")


def features_of(batch) -> np.ndarray:
    """Accept a FeatureBatch or a plain matrix and return the underlying array."""
    if isinstance(batch, FeatureBatch):
        return batch.features
    return np.asarray(batch)


def _check_pair(I: np.ndarray, T: np.ndarray, t: float) -> None:
    if I.ndim != 2 or T.ndim != 2 or I.shape != T.shape:
        raise ShapeError(f"feature shapes disagree: {I.shape} vs {T.shape}")
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")


def clip_loss_full(I, T, t: float) -> LossBreakdown:
    """Bidirectional contrastive loss over the full batch.

    S = t * I @ T.T; the image-to-text direction is the mean cross-entropy of
    the rows of S against the diagonal labels, the text-to-image direction
    likewise on S.T, and the total is their mean.
    """
    I, T = features_of(I), features_of(T)
    _check_pair(I, T, t)
    batch = I.shape[0]
    S = matmul(I, T, transpose_b=True)
    S *= t
    labels = np.arange(batch)
    image_to_text = cross_entropy_mean(S, labels)
    text_to_image = cross_entropy_mean(S.T, labels)
    return LossBreakdown(
        total=(image_to_text + text_to_image) / 2.0,
        image_to_text=image_to_text,
        text_to_image=text_to_image,
        temperature=float(t))


def clip_grad_full(I, T, t: float, *, loss_counters: Counters | None = None,
                   exchange_counters: Counters | None = None) -> GradPair:
    """Analytic gradients of ``clip_loss_full`` with respect to both feature sets.

    The similarity buffer is the only loss-scope allocation: the softmax
    statistics of its rows and columns are reduced to length-B vectors, the
    loss is read off those statistics, and the buffer is then overwritten
    row by row with the combined logit gradient G.  ``loss_counters`` sees
    exactly B*B live elements and the similarity FLOPs; the B x D products
    land in ``exchange_counters``.
    """
    I, T = features_of(I), features_of(T)
    _check_pair(I, T, t)
    if loss_counters is None:
        loss_counters = Counters()
    if exchange_counters is None:
        exchange_counters = Counters()
    batch, dim = I.shape

    with tracking(loss_counters):
        S = matmul(I, T, transpose_b=True)
    S *= t
    loss_counters.alloc(batch * batch)

    # Softmax statistics per row (direction 1) and per column (direction 2),
    # plus the diagonal, extracted before S is overwritten.  Row-by-row so no
    # temporary is more than one row long.
    diag = S.diagonal().copy()
    row_max = np.empty(batch)
    row_sum = np.empty(batch)
    col_max = np.empty(batch)
    col_sum = np.empty(batch)
    St = S.T
    for i in range(batch):
        row = S[i]
        row_max[i] = row.max()
        row_sum[i] = np.exp(row - row_max[i]).sum()
        col = St[i]
        col_max[i] = col.max()
        col_sum[i] = np.exp(col - col_max[i]).sum()
    image_to_text = float(np.mean(np.log(row_sum) + row_max - diag))
    text_to_image = float(np.mean(np.log(col_sum) + col_max - diag))

    # In-place transform S -> G = (P1 - Y + (P2 - Y).T) / (2B).
    scale = 1.0 / (2.0 * batch)
    for i in range(batch):
        row = S[i]
        col_part = np.exp(row - col_max)
        col_part /= col_sum
        row -= row_max[i]
        np.exp(row, out=row)
        row /= row_sum[i]
        row += col_part
        row[i] -= 2.0
        row *= scale
    _check_finite(S, "combined logit gradient")

    with tracking(exchange_counters):
        d_image = matmul(S, T)
        d_text = matmul(St, I)
    d_image *= t
    d_text *= t
    exchange_counters.alloc(2 * batch * dim)
    loss_counters.release(batch * batch)

    loss = LossBreakdown(
        total=(image_to_text + text_to_image) / 2.0,
        image_to_text=image_to_text,
        text_to_image=text_to_image,
        temperature=float(t))
    return GradPair(d_image=d_image, d_text=d_text, loss=loss)


def finite_diff_grad(loss_fn, point: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise DomainError(f"step must be positive, got {h}")
    point = np.asarray(point, dtype=np.float64)
    grad = np.empty_like(point)
    for idx in np.ndindex(point.shape):
        bumped = point.copy()
        bumped[idx] += h
        plus = loss_fn(bumped)
        bumped[idx] -= 2.0 * h
        minus = loss_fn(bumped)
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad
