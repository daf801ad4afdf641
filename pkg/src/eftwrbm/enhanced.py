"""Enhanced input units: alpha weighting, column shrinkage and context recursion.

The conditioning input for frame ``t`` is the pooled matrix
``[x_hat | last_frame]`` of shape ``n_bins x (n_t + 1)``.  It is flattened
column by column (Fortran order) into the model's input vector, so column
``c`` occupies entries ``c * n_bins`` to ``(c + 1) * n_bins - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ShapeError, input_mean


def flatten_pooled(pooled):
    return np.asarray(pooled, dtype=np.float64).reshape(-1, order="F")


def unflatten_pooled(vec, n_bins):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size % n_bins:
        raise ShapeError(f"vector of length {vec.size} does not split into {n_bins}-bin columns")
    return vec.reshape(n_bins, -1, order="F")


@dataclass
class EnhancedInputState:
    """Retained context frames for one utterance."""

    n_bins: int
    n_t: int
    x_hat: np.ndarray | None = None
    last_frame: np.ndarray | None = None

    @property
    def initialized(self):
        return self.last_frame is not None

    def reset(self, first_frame):
        """Seed the context with ``n_t`` copies of the utterance's first frame."""
        first_frame = np.asarray(first_frame, dtype=np.float64)
        if first_frame.shape != (self.n_bins,):
            raise ShapeError(f"frame has shape {first_frame.shape}, expected ({self.n_bins},)")
        self.x_hat = np.repeat(first_frame[:, None], self.n_t, axis=1)
        self.last_frame = first_frame.copy()


def build_pooled(state: EnhancedInputState):
    """Pooled input ``[x_hat | last_frame]`` as an ``n_bins x (n_t + 1)`` matrix."""
    if not state.initialized:
        raise RuntimeError("enhanced input state used before reset()")
    return np.column_stack([state.x_hat, state.last_frame])


def advance(state: EnhancedInputState, selected, current_frame):
    selected = np.asarray(selected, dtype=np.float64)
    if selected.shape != (state.n_bins, state.n_t):
        raise ShapeError(f"selected context has shape {selected.shape}, "
                         f"expected ({state.n_bins}, {state.n_t})")
    state.x_hat = selected.copy()
    state.last_frame = np.asarray(current_frame, dtype=np.float64).copy()


def slide(state: EnhancedInputState, current_frame):
    """Plain sliding window: drop the oldest pooled column (no shrinkage)."""
    pooled = build_pooled(state)
    advance(state, pooled[:, 1:], current_frame)


def compute_alpha(model, pooled_x, y, h):
    """Per-element Gaussian kernel of the input reconstruction residual.

    ``alpha = exp(-(x - mu)^2 / (2 sigma^2))`` where ``mu`` is the mean of
    p(x | y, h).  Values lie in (0, 1] and equal 1 exactly where the
    reconstruction is perfect.
    """
    pooled_x = np.asarray(pooled_x, dtype=np.float64)
    n_bins = pooled_x.shape[0]
    x = flatten_pooled(pooled_x)
    if x.size != model.n_input:
        raise ShapeError(f"pooled input has {x.size} entries, model expects {model.n_input}")
    residual = x - input_mean(model, y, h)
    alpha = np.exp(-residual ** 2 / (2.0 * model.sigma_x ** 2))
    # exp underflows to 0 for huge residuals; keep the weights strictly positive
    alpha = np.maximum(alpha, np.finfo(np.float64).tiny)
    return unflatten_pooled(alpha, n_bins)


def column_distances(reconstructed_x, y):
    """Euclidean distance from each column to the current frame ``y``."""
    reconstructed_x = np.asarray(reconstructed_x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if reconstructed_x.shape[0] != y.shape[0]:
        raise ShapeError("column length differs from frame length")
    return np.linalg.norm(reconstructed_x - y[:, None], axis=0)


def shrink_select(pooled_x, lambdas, n_t):
    """Keep the ``n_t`` columns with the smallest distances, in original order.

    Ties are broken towards the lowest column index.
    """
    pooled_x = np.asarray(pooled_x)
    lambdas = np.asarray(lambdas)
    if lambdas.shape != (pooled_x.shape[1],):
        raise ShapeError("one distance per pooled column is required")
    if n_t > pooled_x.shape[1]:
        raise ValueError(f"cannot retain {n_t} of {pooled_x.shape[1]} columns")
    keep = np.sort(np.argsort(lambdas, kind="stable")[:n_t])
    return pooled_x[:, keep]
