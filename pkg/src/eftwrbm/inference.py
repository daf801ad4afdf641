"""Speech presence probability in the time-frequency plane and 1D detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import enhanced as ei
from .frontend import Spectrogram, destandardize_values
from .model import hidden_conditional, sample_hidden, sample_visible, visible_mean
from .training import context_step

EPS = 1e-8


@dataclass
class SppMatrix:
    values: np.ndarray  # n_bins x T, in [0, 1]
    frame_times: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("SPP values must lie in [0, 1]")


@dataclass
class DetectionCurve:
    scores: np.ndarray
    threshold: float
    decisions: np.ndarray


def ratio_mask(estimate_mag, noisy_mag):
    """Clamped magnitude ratio; bins carrying no noisy energy get zero."""
    ratio = np.clip(estimate_mag / np.maximum(noisy_mag, EPS), 0.0, 1.0)
    return np.where(noisy_mag > EPS, ratio, 0.0)


def reconstruct(model, noisy: Spectrogram, enhanced=True, sample=False, rng=None):
    """Frame-by-frame visible reconstruction (standardized domain), n_bins x T.

    Mean-field by default; ``sample=True`` draws hidden and visible states
    instead, as a stochastic variant of the estimation loop.
    """
    if not noisy.standardized:
        raise ValueError("inference expects a standardized spectrogram")
    if not model.is_finite():
        raise ValueError("model has non-finite parameters")
    Y = noisy.values
    if Y.shape[1] == 0:
        raise ValueError("empty spectrogram")
    if sample and rng is None:
        raise ValueError("sampling mode needs a random generator")
    state = ei.EnhancedInputState(model.n_visible, model.n_t)
    state.reset(Y[:, 0])
    out = np.empty_like(Y)
    for t in range(Y.shape[1]):
        y = Y[:, t]
        if t == 0:
            # first frame conditions on the seeded context without advancing it
            x = ei.flatten_pooled(ei.build_pooled(state))
        else:
            x = context_step(model, state, y, enhanced)
        if sample:
            h = sample_hidden(model, x, y, rng)
            out[:, t] = sample_visible(model, x, h, rng)
        else:
            out[:, t] = visible_mean(model, x, hidden_conditional(model, x, y))
    return out


def estimate_spp(model, noisy: Spectrogram, enhanced=True, sample=False, rng=None) -> SppMatrix:
    """Reconstruct each frame and normalize it against the noisy magnitude."""
    recon = reconstruct(model, noisy, enhanced, sample, rng)
    est_mag = destandardize_values(recon, noisy.stats)
    noisy_mag = destandardize_values(noisy.values, noisy.stats)
    return SppMatrix(ratio_mask(est_mag, noisy_mag), noisy.frame_times())


def integrate_1d(spp) -> np.ndarray:
    """Sum over frequency, then min-max normalize to [0, 1] within the utterance."""
    values = getattr(spp, "values", spp)
    s = np.sum(values, axis=0)
    lo, hi = s.min(), s.max()
    if hi - lo <= 0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def decide(scores, threshold):
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("no scores to decide on")
    return (scores >= threshold).astype(np.int8)


def youden_threshold(scores, labels):
    """Threshold maximizing hit rate minus false-alarm rate on labeled data."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise ValueError("no scores to decide on")
    if labels.all() or not labels.any():
        raise ValueError("labels must contain both classes")
    best, best_j = None, -np.inf
    for thr in np.unique(scores):
        d = scores >= thr
        j = d[labels].mean() - d[~labels].mean()
        if j > best_j:
            best, best_j = thr, j
    return float(best)


def detection_curve(spp, threshold=None, labels=None) -> DetectionCurve:
    scores = integrate_1d(spp)
    if threshold is None:
        threshold = youden_threshold(scores, labels) if labels is not None else 0.5
    return DetectionCurve(scores, float(threshold), decide(scores, threshold))
