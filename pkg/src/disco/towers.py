"""Two-tower linear encoders on synthetic paired data.

The trainer demonstrates end-to-end equivalence of the two gradient routes:
``naive`` computes the full-batch loss on one worker, ``disco`` runs one
simulated rank per shard and exchanges gradients through the collective
fabric.  Both modes see identical batches, drawn as deterministic
wrap-around slices of a shuffled-once index permutation, so their
trajectories are directly comparable step by step.

In disco mode every rank keeps a full parameter replica.  Feature gradients
arrive already averaged over ranks, and each rank's backbone backward covers
only its b rows, so the per-rank parameter gradients are disjoint additive
chunks of the full-batch gradient: they are combined with all_reduce(SUM),
which reproduces the naive update exactly (AVG would rescale the step by
1/N).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, LayoutError, ShapeError, TrainingDivergenceError
from .fabric import LOCKSTEP, ReduceOp, run_ranks
from .matrix import (
    _check_finite,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    matmul,
)
from .oracle import FeatureBatch, clip_grad_full
from .shard import ShardLayout, disco_step

MODES = ("naive", "disco")

DEFAULT_TEMPERATURE = 20.0


@dataclass
class TowerParams:
    """Weights of the two linear towers plus the fixed temperature."""

    W_image: np.ndarray
    W_text: np.ndarray
    t: float

    def __post_init__(self):
        if self.W_image.shape != self.W_text.shape:
            raise ShapeError(
                f"tower shapes disagree: {self.W_image.shape} vs {self.W_text.shape}")
        _check_finite(self.W_image, "image tower weights")
        _check_finite(self.W_text, "text tower weights")
        if self.t <= 0:
            raise DomainError(f"temperature must be positive, got {self.t}")

    def clone(self) -> "TowerParams":
        return TowerParams(self.W_image.copy(), self.W_text.copy(), self.t)


@dataclass(frozen=True)
class PairedDataset:
    """Row-aligned image/text inputs: row i of each side shares one latent."""

    image_inputs: np.ndarray
    text_inputs: np.ndarray
    seed: int

    def __post_init__(self):
        if self.image_inputs.ndim != 2 or self.image_inputs.shape != self.text_inputs.shape:
            raise ShapeError(
                f"paired inputs must be equal-shape 2-D, got "
                f"{self.image_inputs.shape} vs {self.text_inputs.shape}")
        _check_finite(self.image_inputs, "image inputs")
        _check_finite(self.text_inputs, "text inputs")

    @property
    def size(self) -> int:
        return self.image_inputs.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    global_batch: int
    world_size: int
    steps: int
    learning_rate: float
    seed: int
    mode: str

    def __post_init__(self):
        if self.global_batch < 1:
            raise DomainError(f"global batch must be >= 1, got {self.global_batch}")
        if self.global_batch % self.world_size != 0:
            raise LayoutError(
                f"global batch {self.global_batch} is not divisible by "
                f"world size {self.world_size}")
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate < 0:
            raise DomainError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")


def generate_dataset(M: int, D_in: int, latent_dim: int, noise_scale: float,
                     seed: int, *, tie_mixing: bool = False) -> PairedDataset:
    """Synthetic positive pairs: both sides are linear projections of one latent.

    image row = z_i @ A + noise, text row = z_i @ C + noise', with seeded
    mixing matrices A, C.  ``tie_mixing`` sets C = A, which with zero noise
    makes the two sides identical.
    """
    if M < 1 or D_in < 1 or latent_dim < 1:
        raise DomainError(
            f"dimensions must be >= 1, got M={M}, D_in={D_in}, latent={latent_dim}")
    if noise_scale < 0:
        raise DomainError(f"noise scale must be >= 0, got {noise_scale}")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((latent_dim, D_in))
    C = A if tie_mixing else rng.standard_normal((latent_dim, D_in))
    Z = rng.standard_normal((M, latent_dim))
    image = Z @ A + noise_scale * rng.standard_normal((M, D_in))
    text = Z @ C + noise_scale * rng.standard_normal((M, D_in))
    return PairedDataset(image_inputs=image, text_inputs=text, seed=seed)


def init_tower_params(input_dim: int, feature_dim: int,
                      temperature: float = DEFAULT_TEMPERATURE,
                      seed: int = 0) -> TowerParams:
    if input_dim < 1 or feature_dim < 1:
        raise DomainError(
            f"dimensions must be >= 1, got input={input_dim}, feature={feature_dim}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(input_dim)
    return TowerParams(
        W_image=scale * rng.standard_normal((input_dim, feature_dim)),
        W_text=scale * rng.standard_normal((input_dim, feature_dim)),
        t=temperature)


def _tower_weights(params: TowerParams, which: str) -> np.ndarray:
    if which == "image":
        return params.W_image
    if which == "text":
        return params.W_text
    raise DomainError(f"which must be 'image' or 'text', got {which!r}")


def _forward(W: np.ndarray, inputs: np.ndarray):
    raw = matmul(inputs, W)
    return raw, l2_normalize_rows(raw)


def encode(params: TowerParams, inputs: np.ndarray, which: str) -> FeatureBatch:
    """Linear map through the selected tower followed by row normalization."""
    _, features = _forward(_tower_weights(params, which), inputs)
    return FeatureBatch(features=features, role=which)


def encode_backward(params: TowerParams, inputs: np.ndarray, which: str,
                    upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient of the selected tower's weights given d(loss)/d(features)."""
    W = _tower_weights(params, which)
    raw = matmul(inputs, W)
    d_raw = l2_normalize_rows_backward(raw, upstream_grad)
    return matmul(inputs.T, d_raw)


def naive_param_grads(params: TowerParams, image_inputs: np.ndarray,
                      text_inputs: np.ndarray):
    """Full-batch loss and parameter gradients on a single worker.

    Returns (loss, dW_image, dW_text).
    """
    raw_i, I = _forward(params.W_image, image_inputs)
    raw_t, T = _forward(params.W_text, text_inputs)
    pair = clip_grad_full(I, T, params.t)
    dW_image = matmul(image_inputs.T, l2_normalize_rows_backward(raw_i, pair.d_image))
    dW_text = matmul(text_inputs.T, l2_normalize_rows_backward(raw_t, pair.d_text))
    return pair.loss.total, dW_image, dW_text


def _batch_indices(perm: np.ndarray, step: int, batch: int) -> np.ndarray:
    positions = np.arange(step * batch, (step + 1) * batch) % perm.size
    return perm[positions]


def _guard_divergence(step: int):
    """Convert non-finite-value failures inside a step into a divergence error."""
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, ValueError) \
                    and "non-finite" in str(exc):
                raise TrainingDivergenceError(
                    f"non-finite values at step {step}", step=step) from exc
            return False

    return _Guard()


def _check_loss(loss: float, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergenceError(
            f"loss is {loss} at step {step}", step=step)


def train_run(config: TrainConfig, dataset: PairedDataset, params: TowerParams,
              *, scheduler: str = LOCKSTEP) -> list:
    """Plain gradient descent for ``config.steps`` steps; returns [(step, loss)].

    ``params`` is updated in place, so the caller can inspect the final
    weights.  The loss recorded at each step is evaluated before that
    step's update; in disco mode it is the rank-averaged global loss, which
    is identical on every rank, recorded by rank 0.
    """
    if config.global_batch > dataset.size:
        raise DomainError(
            f"global batch {config.global_batch} exceeds dataset size {dataset.size}")
    perm = np.random.default_rng(config.seed).permutation(dataset.size)
    if config.mode == "naive":
        trajectory = _train_naive(config, dataset, params, perm)
    else:
        trajectory = _train_disco(config, dataset, params, perm, scheduler)
    return trajectory


def _train_naive(config, dataset, params, perm):
    trajectory = []
    for step in range(config.steps):
        idx = _batch_indices(perm, step, config.global_batch)
        with _guard_divergence(step):
            loss, dW_image, dW_text = naive_param_grads(
                params, dataset.image_inputs[idx], dataset.text_inputs[idx])
        _check_loss(loss, step)
        trajectory.append((step, float(loss)))
        params.W_image -= config.learning_rate * dW_image
        params.W_text -= config.learning_rate * dW_text
    return trajectory


def _train_disco(config, dataset, params, perm, scheduler):
    trajectory = []
    finals = [None]

    def rank_fn(endpoint):
        local = params.clone()  # per-rank replica; identical updates keep them in sync
        layout = ShardLayout(
            world_size=config.world_size,
            global_batch=config.global_batch,
            rank=endpoint.rank)
        for step in range(config.steps):
            idx = _batch_indices(perm, step, config.global_batch)
            local_idx = idx[layout.row_slice]
            image_in = dataset.image_inputs[local_idx]
            text_in = dataset.text_inputs[local_idx]
            with _guard_divergence(step):
                raw_i, I_local = _forward(local.W_image, image_in)
                raw_t, T_local = _forward(local.W_text, text_in)
                d_image, d_text, loss = disco_step(endpoint, I_local, T_local, local.t)
                dW_image = endpoint.all_reduce(
                    matmul(image_in.T, l2_normalize_rows_backward(raw_i, d_image)),
                    ReduceOp.SUM)
                dW_text = endpoint.all_reduce(
                    matmul(text_in.T, l2_normalize_rows_backward(raw_t, d_text)),
                    ReduceOp.SUM)
            _check_loss(loss, step)
            if endpoint.rank == 0:
                trajectory.append((step, float(loss)))
            local.W_image -= config.learning_rate * dW_image
            local.W_text -= config.learning_rate * dW_text
        if endpoint.rank == 0:
            finals[0] = local

    run_ranks(config.world_size, rank_fn, mode=scheduler)
    np.copyto(params.W_image, finals[0].W_image)
    np.copyto(params.W_text, finals[0].W_text)
    return trajectory
