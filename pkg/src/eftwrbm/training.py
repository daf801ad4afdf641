"""Contrastive-divergence training with a non-negativity barrier on the factors."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import enhanced as ei
from .model import (
    PARAM_NAMES,
    FactorModel,
    LayerState,
    ShapeError,
    energy,
    hidden_conditional,
    hidden_factors,
    input_factors,
    input_mean,
    sample_hidden,
    sample_visible,
    visible_factors,
    visible_mean,
)

log = logging.getLogger(__name__)

FACTOR_NAMES = ("wx_factor", "wy_factor", "wh_factor")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, epoch, block, magnitude):
        self.epoch, self.block, self.magnitude = epoch, block, magnitude
        super().__init__(f"training diverged at epoch {epoch}: parameter block {block!r} "
                         f"reached max |value| {magnitude:g}")


@dataclass
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.001
    cd_steps: int = 1
    barrier_beta: float = 0.5
    momentum: float = 0.1
    momentum_cutoff_epoch: int = 20
    minibatch_frames: int = 32
    seed: int = 0
    enhanced: bool = True
    init_biases: bool = True

    def __post_init__(self):
        for name in ("epochs", "cd_steps", "minibatch_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.barrier_beta < 0:
            raise ValueError("barrier_beta must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.momentum_cutoff_epoch <= self.epochs:
            raise ValueError("momentum_cutoff_epoch must lie in [0, epochs]")

    @classmethod
    def with_epochs(cls, epochs, **kwargs):
        """Config for a shorter/longer run keeping the momentum switch at half-way."""
        kwargs.setdefault("momentum_cutoff_epoch", epochs // 2)
        return cls(epochs=epochs, **kwargs)

    def momentum_at(self, epoch):
        return self.momentum if epoch < self.momentum_cutoff_epoch else 0.0


@dataclass
class GradientSet:
    """One array per learnable parameter block, same shapes as the model."""

    wx_factor: np.ndarray
    wy_factor: np.ndarray
    wh_factor: np.ndarray
    bias_x: np.ndarray
    bias_y: np.ndarray
    bias_h: np.ndarray

    @classmethod
    def zeros_like(cls, model):
        return cls(**{name: np.zeros_like(arr) for name, arr in model.params().items()})

    def items(self):
        return ((name, getattr(self, name)) for name in PARAM_NAMES)

    def _combine(self, other, op):
        return GradientSet(**{name: op(arr, getattr(other, name)) for name, arr in self.items()})

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar):
        return GradientSet(**{name: arr * scalar for name, arr in self.items()})

    __rmul__ = __mul__

    def is_finite(self):
        return all(np.all(np.isfinite(arr)) for _, arr in self.items())


def energy_gradients(model: FactorModel, state: LayerState) -> GradientSet:
    """-dE/dtheta for every learnable block, summed over rows for batched states."""
    x = np.atleast_2d(state.x)
    y = np.atleast_2d(state.y)
    h = np.atleast_2d(state.h)
    if not x.shape[0] == y.shape[0] == h.shape[0]:
        raise ShapeError("batched state has inconsistent row counts")
    fx, fy, fh = input_factors(model, x), visible_factors(model, y), hidden_factors(model, h)
    xs, ys = x / model.sigma_x, y / model.sigma_y
    return GradientSet(
        wx_factor=xs.T @ (fy * fh),
        wy_factor=ys.T @ (fx * fh),
        wh_factor=h.T @ (fx * fy),
        bias_x=np.sum((x - model.bias_x) / model.sigma_x ** 2, axis=0),
        bias_y=np.sum((y - model.bias_y) / model.sigma_y ** 2, axis=0),
        bias_h=np.sum(h, axis=0),
    )


def cd_statistics(model, x, y, n_step, rng):
    """Positive and negative phase statistics for CD-``n_step`` with ``x`` clamped.

    Rows of ``x``/``y`` are independent training cases; statistics are summed
    over rows.  The chain runs on binary hidden samples, while the
    statistics use hidden probabilities.

    Returns ``(positive, negative, reconstruction)`` where ``reconstruction``
    is the visible mean given the final hidden sample of the chain.
    """
    if n_step < 1:
        raise ValueError("n_step must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))

    h_prob = hidden_conditional(model, x, y)
    positive = energy_gradients(model, LayerState(x, y, h_prob))

    y_chain = y
    for _ in range(n_step):
        h_chain = sample_hidden(model, x, y_chain, rng)
        y_chain = sample_visible(model, x, h_chain, rng)
    negative = energy_gradients(model, LayerState(x, y_chain, hidden_conditional(model, x, y_chain)))
    return positive, negative, visible_mean(model, x, h_chain)


def barrier_gradient(model, beta) -> GradientSet:
    """Derivative of the penalty (beta/2) * sum(min(w, 0)^2) over the factor matrices.

    Biases are not penalized.  The update subtracts this, so a negative
    weight ``w`` is pushed up by ``beta * |w|``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    grads = GradientSet.zeros_like(model)
    for name in FACTOR_NAMES:
        setattr(grads, name, beta * np.minimum(getattr(model, name), 0.0))
    return grads


@dataclass
class TrainState:
    velocity: GradientSet
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model):
        return cls(velocity=GradientSet.zeros_like(model))

    def write_log(self, path):
        columns = ("epoch", "mean_recon_err", "mean_energy", "neg_weight_fraction", "wall_ms")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row[k] for k in columns})


def apply_update(model, train_state, positive, negative, beta, lr, momentum):
    """velocity <- momentum * velocity + lr * (positive - negative - barrier); w += velocity."""
    step = (positive - negative) - barrier_gradient(model, beta)
    new_values = {}
    for name, grad in step.items():
        v = momentum * getattr(train_state.velocity, name) + lr * grad
        w = getattr(model, name) + v
        magnitude = float(np.max(np.abs(w))) if w.size else 0.0
        if not np.all(np.isfinite(w)) or magnitude > DIVERGENCE_LIMIT:
            raise DivergenceError(train_state.epoch, name, magnitude)
        new_values[name] = (v, w)
    for name, (v, w) in new_values.items():
        setattr(train_state.velocity, name, v)
        setattr(model, name, w)


def negative_fraction(model):
    total = sum(getattr(model, n).size for n in FACTOR_NAMES)
    neg = sum(int(np.sum(getattr(model, n) < 0)) for n in FACTOR_NAMES)
    return neg / total


def _as_matrix(utt):
    data = getattr(utt, "values", utt)
    return np.asarray(data, dtype=np.float64)


def as_pairs(corpus, n_bins):
    """Normalize a corpus to ``(conditioning, target)`` matrix pairs.

    Items are either a single spectrogram (used as both streams) or a
    ``(conditioning, target)`` tuple of equal-shaped spectrograms, e.g. a
    noisy mixture and its clean source.
    """
    pairs = []
    for item in corpus:
        if isinstance(item, tuple):
            cond, target = (_as_matrix(v) for v in item)
        else:
            cond = target = _as_matrix(item)
        for u in (cond, target):
            if u.ndim != 2 or u.shape[0] != n_bins:
                raise ShapeError(f"utterance has shape {u.shape}, expected ({n_bins}, T)")
        if cond.shape != target.shape:
            raise ShapeError("conditioning and target streams differ in shape")
        if cond.shape[1] < 2:
            raise ValueError("every utterance needs at least 2 frames")
        pairs.append((cond, target))
    if not pairs:
        raise ValueError("empty training corpus")
    return pairs


def initialize_biases(model, pairs):
    """Set the Gaussian biases to the per-bin means of the two streams."""
    cond_mean = np.concatenate([c for c, _ in pairs], axis=1).mean(axis=1)
    target_mean = np.concatenate([t for _, t in pairs], axis=1).mean(axis=1)
    model.bias_x = np.tile(cond_mean, model.n_t + 1)
    model.bias_y = target_mean.copy()


def context_step(model, state, y, enhanced=True):
    """Pool, weight and select the context for the current frame ``y``.

    Returns the flattened conditioning input used for training/inference
    (alpha-weighted when ``enhanced``) and advances ``state``.
    """
    pooled = ei.build_pooled(state)
    x = ei.flatten_pooled(pooled)
    if not enhanced:
        ei.slide(state, y)
        return x
    h = hidden_conditional(model, x, y)
    alpha = ei.compute_alpha(model, pooled, y, h)
    x_weighted = ei.flatten_pooled(alpha * pooled)
    h_weighted = hidden_conditional(model, x_weighted, y)
    reconstructed = ei.unflatten_pooled(input_mean(model, y, h_weighted), state.n_bins)
    lambdas = ei.column_distances(reconstructed, y)
    ei.advance(state, ei.shrink_select(pooled, lambdas, state.n_t), y)
    return x_weighted


def train(model: FactorModel, corpus, config: TrainConfig, train_state=None) -> TrainState:
    """Train on standardized ``n_bins x T`` spectrograms.

    Each frame ``t >= 1`` of an utterance is a training case: ``x`` is the
    pooled context built from earlier frames of the conditioning stream and
    ``y`` is frame ``t`` of the target stream (see :func:`as_pairs`).  The
    hidden inference that drives the context recursion sees the conditioning
    frame.  Context is reset at utterance boundaries.

    With ``config.init_biases`` a fresh run (no ``train_state``) first sets
    the visible and input biases to the data means.
    """
    n_bins = model.n_visible
    pairs = as_pairs(corpus, n_bins)
    if model.n_input != n_bins * (model.n_t + 1):
        raise ShapeError("model input size does not match n_bins * (n_t + 1)")
    if config.init_biases and train_state is None:
        initialize_biases(model, pairs)

    rng = np.random.default_rng(config.seed)
    ts = train_state or TrainState.for_model(model)
    B = config.minibatch_frames

    for epoch in range(config.epochs):
        ts.epoch = epoch
        momentum = config.momentum_at(epoch)
        started = time.perf_counter()
        sq_err, energies, n_frames = 0.0, 0.0, 0
        xs, ys = [], []

        def flush():
            nonlocal sq_err, energies, n_frames
            xb, yb = np.array(xs), np.array(ys)
            pos, neg, recon = cd_statistics(model, xb, yb, config.cd_steps, rng)
            sq_err += float(np.sum((yb - recon) ** 2))
            energies += float(np.sum(energy(model, LayerState(xb, yb, hidden_conditional(model, xb, yb)))))
            n_frames += len(xb)
            # batch-mean statistics keep the step size independent of B
            scale = 1.0 / len(xb)
            apply_update(model, ts, pos * scale, neg * scale, config.barrier_beta,
                         config.learning_rate, momentum)
            xs.clear()
            ys.clear()

        for cond, target in pairs:
            state = ei.EnhancedInputState(n_bins, model.n_t)
            state.reset(cond[:, 0])
            for t in range(1, cond.shape[1]):
                xs.append(context_step(model, state, cond[:, t], config.enhanced))
                ys.append(target[:, t])
                if len(xs) == B:
                    flush()
        if xs:
            flush()

        row = {
            "epoch": epoch,
            "mean_recon_err": sq_err / (n_frames * n_bins),
            "mean_energy": energies / n_frames,
            "neg_weight_fraction": negative_fraction(model),
            "wall_ms": (time.perf_counter() - started) * 1e3,
        }
        ts.history.append(row)
        log.info("epoch %d recon %.5f neg %.4f", epoch, row["mean_recon_err"],
                 row["neg_weight_fraction"])
    ts.epoch = config.epochs
    return ts


def finite_difference_gradients(model, state, step=1e-5):
    """Central differences of -E(state) with respect to every learnable entry."""
    out = {}
    for name in PARAM_NAMES:
        param = getattr(model, name)
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + step
            e_plus = np.sum(energy(model, state))
            param[idx] = orig - step
            e_minus = np.sum(energy(model, state))
            param[idx] = orig
            grad[idx] = -(e_plus - e_minus) / (2 * step)
        out[name] = grad
    return out


def gradient_check(model, state, step=1e-5, gradient_fn=energy_gradients):
    """Relative error per parameter block between analytic and numeric gradients.

    The error of a block is ``max|a - n| / max(max|a|, max|n|)``.
    """
    analytic = dict(gradient_fn(model, state).items())
    numeric = finite_difference_gradients(model, state, step)
    errors = {}
    for name in PARAM_NAMES:
        a, n = analytic[name], numeric[name]
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)), np.finfo(float).tiny)
        errors[name] = float(np.max(np.abs(a - n)) / scale)
    return errors


def random_problem(rng, max_units=20, max_hidden=8, max_factors=8):
    """Random small model and joint state for gradient verification."""
    I = int(rng.integers(1, max_units + 1))
    J = int(rng.integers(1, max_units + 1))
    K = int(rng.integers(1, max_hidden + 1))
    F = int(rng.integers(1, max_factors + 1))
    model = FactorModel(
        wx_factor=rng.standard_normal((I, F)),
        wy_factor=rng.standard_normal((J, F)),
        wh_factor=rng.standard_normal((K, F)),
        bias_x=rng.standard_normal(I),
        bias_y=rng.standard_normal(J),
        bias_h=rng.standard_normal(K),
        sigma_x=rng.uniform(0.5, 2.0, I),
        sigma_y=rng.uniform(0.5, 2.0, J),
    )
    state = LayerState(rng.standard_normal(I), rng.standard_normal(J),
                       (rng.random(K) < 0.5).astype(float), sampled=True)
    return model, state


def run_gradcheck(n_trials=200, seed=0, tol=1e-6, step=1e-5, gradient_fn=energy_gradients):
    """Gradient check over random problems; returns (passed, worst error per block)."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in PARAM_NAMES}
    for _ in range(n_trials):
        model, state = random_problem(rng)
        for name, err in gradient_check(model, state, step, gradient_fn).items():
            worst[name] = max(worst[name], err)
    return all(err < tol for err in worst.values()), worst


def config_dict(config):
    return asdict(config)
