"""Factored three-way RBM: parameters, energy and conditional distributions.

Three layers interact multiplicatively through ``F`` shared factors:

* ``x`` -- Gaussian input (conditioning) units, length ``I``
* ``y`` -- Gaussian visible units, length ``J``
* ``h`` -- binary hidden units, length ``K``

Every function accepts either single vectors or batches whose last axis is
the unit axis (rows are independent cases).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"EFTWRBM1"

PARAM_NAMES = ("wx_factor", "wy_factor", "wh_factor", "bias_x", "bias_y", "bias_h")
FIELD_ORDER = PARAM_NAMES + ("sigma_x", "sigma_y")


class ShapeError(ValueError):
    """Raised when arrays do not match the model shape."""


@dataclass
class FactorModel:
    wx_factor: np.ndarray  # I x F
    wy_factor: np.ndarray  # J x F
    wh_factor: np.ndarray  # K x F
    bias_x: np.ndarray
    bias_y: np.ndarray
    bias_h: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    n_t: int = field(default=0)

    def __post_init__(self):
        for name in FIELD_ORDER:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        F = self.wx_factor.shape[1]
        if self.wy_factor.shape[1] != F or self.wh_factor.shape[1] != F:
            raise ShapeError("factor matrices must share the factor count F")
        I, J, K = self.n_input, self.n_visible, self.n_hidden
        expected = {
            "bias_x": I, "sigma_x": I,
            "bias_y": J, "sigma_y": J,
            "bias_h": K,
        }
        for name, n in expected.items():
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if np.any(self.sigma_x <= 0) or np.any(self.sigma_y <= 0):
            raise ValueError("standard deviations must be strictly positive")

    @classmethod
    def initialize(cls, n_input, n_visible, n_hidden, n_factors, rng=None,
                   init_std=0.01, n_t=0):
        """Small Gaussian factor weights, zero biases, unit deviations."""
        rng = np.random.default_rng(rng)
        return cls(
            wx_factor=init_std * rng.standard_normal((n_input, n_factors)),
            wy_factor=init_std * rng.standard_normal((n_visible, n_factors)),
            wh_factor=init_std * rng.standard_normal((n_hidden, n_factors)),
            bias_x=np.zeros(n_input),
            bias_y=np.zeros(n_visible),
            bias_h=np.zeros(n_hidden),
            sigma_x=np.ones(n_input),
            sigma_y=np.ones(n_visible),
            n_t=n_t,
        )

    @classmethod
    def for_spectrogram(cls, n_bins=257, n_t=6, n_hidden=30, n_factors=60, rng=None,
                        init_std=0.01):
        """Model whose input is ``n_t`` retained frames plus one conditioning frame."""
        return cls.initialize(n_bins * (n_t + 1), n_bins, n_hidden, n_factors,
                              rng=rng, init_std=init_std, n_t=n_t)

    @property
    def n_input(self):
        return self.wx_factor.shape[0]

    @property
    def n_visible(self):
        return self.wy_factor.shape[0]

    @property
    def n_hidden(self):
        return self.wh_factor.shape[0]

    @property
    def n_factors(self):
        return self.wx_factor.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return FactorModel(**{f.name: np.copy(getattr(self, f.name)) if f.name != "n_t"
                              else self.n_t for f in fields(self)})

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, name))) for name in FIELD_ORDER)

    def full_tensor(self):
        """Unfactored interaction tensor w_ijk = sum_f wx_if wy_jf wh_kf."""
        return np.einsum("if,jf,kf->ijk", self.wx_factor, self.wy_factor, self.wh_factor)


@dataclass
class LayerState:
    """Joint configuration of the three layers.

    ``sampled`` records whether ``h`` holds binary draws or mean-field
    probabilities.
    """

    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    sampled: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if np.any(self.h < 0) or np.any(self.h > 1):
            raise ValueError("hidden values must lie in [0, 1]")
        if self.sampled and not np.all((self.h == 0) | (self.h == 1)):
            raise ValueError("sampled hidden state must be binary")


def _check(vec, n, name):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != n:
        raise ShapeError(f"{name} has {vec.shape[-1]} units, model expects {n}")
    return vec


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


# Factor responses of each layer; shape (..., F).

def input_factors(model, x):
    x = _check(x, model.n_input, "x")
    return (x / model.sigma_x) @ model.wx_factor


def visible_factors(model, y):
    y = _check(y, model.n_visible, "y")
    return (y / model.sigma_y) @ model.wy_factor


def hidden_factors(model, h):
    h = _check(h, model.n_hidden, "h")
    return h @ model.wh_factor


def energy(model: FactorModel, state: LayerState):
    """E(y, h; x) of the factored model with symmetric Gaussian input branch."""
    x, y, h = state.x, state.y, state.h
    fx, fy, fh = input_factors(model, x), visible_factors(model, y), hidden_factors(model, h)
    quad_x = np.sum((x - model.bias_x) ** 2 / (2 * model.sigma_x ** 2), axis=-1)
    quad_y = np.sum((y - model.bias_y) ** 2 / (2 * model.sigma_y ** 2), axis=-1)
    return quad_x + quad_y - h @ model.bias_h - np.sum(fx * fy * fh, axis=-1)


def hidden_preactivation(model, x, y):
    return (input_factors(model, x) * visible_factors(model, y)) @ model.wh_factor.T + model.bias_h


def visible_preactivation(model, x, h):
    return (input_factors(model, x) * hidden_factors(model, h)) @ model.wy_factor.T + model.bias_y


def input_preactivation(model, y, h):
    return (visible_factors(model, y) * hidden_factors(model, h)) @ model.wx_factor.T + model.bias_x


def hidden_conditional(model, x, y):
    """p(h_k = 1 | x, y) for every hidden unit."""
    return sigmoid(hidden_preactivation(model, x, y))


def sample_hidden(model, x, y, rng):
    p = hidden_conditional(model, x, y)
    return (rng.random(p.shape) < p).astype(np.float64)


def visible_mean(model, x, h):
    # The interaction enters the energy as y/sigma, so the Gaussian mean is
    # shifted by sigma times the factor drive; identical to the
    # preactivation when sigma = 1.
    drive = visible_preactivation(model, x, h) - model.bias_y
    return model.bias_y + model.sigma_y * drive


def sample_visible(model, x, h, rng):
    mean = visible_mean(model, x, h)
    return mean + model.sigma_y * rng.standard_normal(mean.shape)


def input_mean(model, y, h):
    drive = input_preactivation(model, y, h) - model.bias_x
    return model.bias_x + model.sigma_x * drive


def sample_input(model, y, h, rng):
    mean = input_mean(model, y, h)
    return mean + model.sigma_x * rng.standard_normal(mean.shape)


# Serialization: magic, six u32 header fields, then f64 arrays (row-major,
# little-endian) in FIELD_ORDER.

_HEADER = struct.Struct("<6I")


def to_bytes(model: FactorModel) -> bytes:
    n_bins = model.n_visible
    if model.n_input != n_bins * (model.n_t + 1):
        raise ShapeError(
            f"input size {model.n_input} is not n_bins * (n_t + 1) = {n_bins * (model.n_t + 1)}")
    parts = [MAGIC, _HEADER.pack(model.n_input, model.n_visible, model.n_hidden,
                                 model.n_factors, model.n_t, n_bins)]
    for name in FIELD_ORDER:
        parts.append(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> FactorModel:
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError("not an EFTW-RBM model file (bad magic)")
    offset = len(MAGIC)
    if len(blob) < offset + _HEADER.size:
        raise ValueError("truncated model header")
    I, J, K, F, n_t, n_bins = _HEADER.unpack_from(blob, offset)
    offset += _HEADER.size
    if n_bins != J or I != n_bins * (n_t + 1):
        raise ShapeError(f"inconsistent header: I={I} J={J} n_t={n_t} n_bins={n_bins}")
    shapes = {
        "wx_factor": (I, F), "wy_factor": (J, F), "wh_factor": (K, F),
        "bias_x": (I,), "bias_y": (J,), "bias_h": (K,),
        "sigma_x": (I,), "sigma_y": (J,),
    }
    total = sum(int(np.prod(s)) for s in shapes.values()) * 8
    if len(blob) - offset != total:
        raise ShapeError(f"payload has {len(blob) - offset} bytes, header implies {total}")
    arrays = {}
    for name in FIELD_ORDER:
        n = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shapes[name]).copy()
        offset += 8 * n
    return FactorModel(n_t=n_t, **arrays)


def save_model(model, path):
    Path(path).write_bytes(to_bytes(model))


def load_model(path):
    return from_bytes(Path(path).read_bytes())
