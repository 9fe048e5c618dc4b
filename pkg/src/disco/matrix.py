"""Dense 2-D float math with closed-form backward rules.

Matrices are plain C-order numpy arrays, treated as immutable once
constructed.  Every public operation is a pure function; the private
``*_inplace`` kernels exist so the instrumented loss paths can transform a
logits buffer into its gradient without a second allocation.  Softmax-style
transforms iterate row by row on purpose: no temporary proportional to the
full matrix is ever materialized, which keeps the measured element counters
equal to the declared buffer sizes.

In verification mode (the default) inputs and results are checked to be
finite after every operation.
"""

from contextlib import contextmanager

import numpy as np

from .counters import active_counters
from .errors import DegenerateInputError, ShapeError

_VERIFY = True

NORM_EPSILON = 1e-12


@contextmanager
def verification_disabled():
    """Temporarily skip finiteness checks (used only by the f32 benchmark path)."""
    global _VERIFY
    previous = _VERIFY
    _VERIFY = False
    try:
        yield
    finally:
        _VERIFY = previous


def verification_enabled() -> bool:
    return _VERIFY


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _VERIFY and not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")


def as_dense(data, dtype=np.float64) -> np.ndarray:
    """Build a 2-D C-order float matrix, validating shape and finiteness."""
    arr = np.array(data, dtype=dtype, order="C")
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    _check_finite(arr, "matrix data")
    return arr


def matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Matrix product ``a @ b`` (or ``a @ b.T``), recording 2*m*k*n FLOPs.

    FLOPs are attributed to the counter installed by ``counters.tracking``
    on the current thread, if any.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    rhs = b.T if transpose_b else b
    if a.shape[1] != rhs.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: {a.shape} x {rhs.shape}"
            f"{' (transpose_b)' if transpose_b else ''}"
        )
    out = a @ rhs
    counters = active_counters()
    if counters is not None:
        m, k = a.shape
        n = rhs.shape[1]
        counters.add_flops(2 * m * k * n)
    _check_finite(out, "matmul result")
    return out


def _validate_labels(labels: np.ndarray, rows: int, cols: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (rows,):
        raise ShapeError(f"expected {rows} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError("labels must be integers")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= cols:
        bad = labels[(labels < 0) | (labels >= cols)][0]
        raise IndexError(f"label {bad} out of range [0, {cols})")
    return labels


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    _check_finite(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    _check_finite(shifted, "softmax result")
    return shifted


def cross_entropy_mean(logits: np.ndarray, labels) -> float:
    """Mean of -log softmax(logits[i])[labels[i]] over rows.

    Row-by-row evaluation: works on transposed views and never builds a
    full-size temporary.
    """
    _check_finite(logits, "cross-entropy logits")
    rows, cols = logits.shape
    labels = _validate_labels(labels, rows, cols)
    total = 0.0
    for i in range(rows):
        row = logits[i]
        m = row.max()
        lse = float(np.log(np.exp(row - m).sum())) + float(m)
        total += lse - float(row[labels[i]])
    return total / rows


def softmax_ce_grad(logits: np.ndarray, labels) -> np.ndarray:
    """Gradient of ``cross_entropy_mean`` w.r.t. the logits: (P - Y) / rows."""
    _check_finite(logits, "cross-entropy logits")
    rows, cols = logits.shape
    labels = _validate_labels(labels, rows, cols)
    out = np.array(logits, order="C")
    _softmax_ce_grad_inplace(out, labels, 1.0 / rows)
    return out


def _softmax_ce_grad_inplace(m: np.ndarray, labels: np.ndarray, scale: float) -> None:
    """Overwrite ``m`` with scale * (row_softmax(m) - one_hot(labels)).

    The one-hot matrix is never materialized; the label entry is adjusted
    in place.  Row-by-row so the only extra storage is one row.
    """
    for i in range(m.shape[0]):
        row = m[i]
        row -= row.max()
        np.exp(row, out=row)
        row /= row.sum()
        row[labels[i]] -= 1.0
        row *= scale
    _check_finite(m, "softmax cross-entropy gradient")


def max_rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest expected magnitude.

    A normwise metric: elementwise ratios blow up on entries that are
    incidentally near zero, which is noise, not error.  An exact match of an
    all-zero expectation is 0; any deviation from it is inf.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"shapes disagree: {actual.shape} vs {expected.shape}")
    diff = float(np.abs(actual - expected).max())
    scale = float(np.abs(expected).max())
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm."""
    _check_finite(m, "normalization input")
    with np.errstate(over="ignore"):  # overflow is detected on the norms below
        norms = np.linalg.norm(m, axis=1, keepdims=True)
    _check_finite(norms, "row norms")  # squared sums can overflow on finite input
    if norms.min() < NORM_EPSILON:
        raise DegenerateInputError(
            f"row norm {norms.min():.3e} below epsilon {NORM_EPSILON:.0e}"
        )
    return m / norms


def l2_normalize_rows_backward(m: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Backward of ``l2_normalize_rows``: per row, (g - (x_hat . g) x_hat) / ||x||."""
    if m.shape != upstream_grad.shape:
        raise ShapeError(f"gradient shape {upstream_grad.shape} != input shape {m.shape}")
    _check_finite(m, "normalization input")
    _check_finite(upstream_grad, "upstream gradient")
    with np.errstate(over="ignore"):
        norms = np.linalg.norm(m, axis=1, keepdims=True)
    _check_finite(norms, "row norms")
    if norms.min() < NORM_EPSILON:
        raise DegenerateInputError(
            f"row norm {norms.min():.3e} below epsilon {NORM_EPSILON:.0e}"
        )
    unit = m / norms
    inner = (unit * upstream_grad).sum(axis=1, keepdims=True)
    out = (upstream_grad - inner * unit) / norms
    _check_finite(out, "normalization gradient")
    return out
