"""Rectified-flow noising, timestep sampling, loss, Euler sampling and CFG.

Convention: ``x_t = (1 - t) * x0 + t * eps`` so ``t = 1`` is pure noise,
and the regression target is the constant velocity ``eps - x0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError, SamplingError
from .tensor import Tensor, as_tensor, mean, square, sub, take_rows


def shift_timestep(u, shift: float):
    """Monotone map of [0, 1] onto itself pushing mass toward t = 1."""
    if shift < 1.0:
        raise ConfigurationError(f"timestep shift must be >= 1, got {shift}")
    u = np.asarray(u, dtype=np.float64)
    return shift * u / (1.0 + (shift - 1.0) * u)


def shifted_cdf(t, shift: float):
    """CDF of ``shift_timestep(U, shift)`` for uniform U."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return t / (shift - (shift - 1.0) * t)


def sample_timestep(shift: float, rng: np.random.Generator, size=None):
    if shift < 1.0:
        raise ConfigurationError(f"timestep shift must be >= 1, got {shift}")
    return shift_timestep(rng.random(size), shift)


def noise_latents(x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"latent {x0.shape} and noise {eps.shape} differ")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x0 + t * eps


def velocity_target(x0, eps):
    return np.asarray(eps, dtype=np.float64) - np.asarray(x0, dtype=np.float64)


@dataclass
class FlowBatch:
    x0: list[np.ndarray]
    eps: list[np.ndarray]
    t: list[float]
    x_t: list[np.ndarray]
    v_target: list[np.ndarray]

    @classmethod
    def make(cls, x0s: Sequence[np.ndarray], ts: Sequence[float], rng: np.random.Generator) -> "FlowBatch":
        eps = [rng.standard_normal(np.shape(x)) for x in x0s]
        return cls(list(x0s), eps, [float(t) for t in ts],
                   [noise_latents(x, e, t) for x, e, t in zip(x0s, eps, ts)],
                   [velocity_target(x, e) for x, e in zip(x0s, eps)])


def flow_loss(v_pred: Tensor, x0, eps, mask=None) -> Tensor:
    """Mean squared velocity error over the rows selected by ``mask``.

    ``v_pred``, ``x0`` and ``eps`` share their shape; ``mask`` is a boolean
    vector over the leading axis marking noised-VAE entries. Unmasked rows
    do not contribute, whatever their values.
    """
    v_pred = as_tensor(v_pred)
    target = velocity_target(x0, eps)
    if target.shape != v_pred.shape:
        raise DimensionError(f"prediction {v_pred.shape} vs target {target.shape}")
    if mask is not None:
        rows = np.flatnonzero(np.asarray(mask, dtype=bool))
        if rows.size == 0:
            raise InputError("flow loss over an empty set of noised positions")
        v_pred = take_rows(v_pred, rows)
        target = target[rows]
    elif target.size == 0:
        raise InputError("flow loss over an empty set of noised positions")
    return mean(square(sub(v_pred, target)))


def make_schedule(steps: int, shift: float = 1.0) -> np.ndarray:
    """``steps + 1`` decreasing times from 1 to 0, optionally shifted."""
    if steps < 1:
        raise ConfigurationError("at least one sampling step is required")
    return shift_timestep(np.linspace(1.0, 0.0, steps + 1), shift)


def euler_sample(model_fn: Callable[[np.ndarray, float], np.ndarray], x_init: np.ndarray,
                 t_schedule: Sequence[float], callback=None) -> np.ndarray:
    """Integrate ``dx/dt = v(x, t)`` along ``t_schedule`` (strictly decreasing, 1 -> 0)."""
    ts = np.asarray(t_schedule, dtype=np.float64)
    if ts.ndim != 1 or ts.size < 2:
        raise ConfigurationError("schedule needs at least two times")
    if np.any(np.diff(ts) >= 0):
        raise ConfigurationError("schedule must be strictly decreasing")
    if ts[0] > 1.0 or ts[-1] < 0.0:
        raise ConfigurationError("schedule must stay within [0, 1]")
    x = np.array(x_init, dtype=np.float64)
    for k in range(ts.size - 1):
        v = np.asarray(model_fn(x, float(ts[k])), dtype=np.float64)
        x = x + (ts[k + 1] - ts[k]) * v
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite latent at sampling step {k}", step=k)
        if callback is not None:
            callback(k, x)
    return x


def cfg_combine(v_cond, v_uncond, w: float):
    if w < 0:
        raise ConfigurationError("guidance weight must be non-negative")
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise DimensionError("conditional and unconditional velocities differ in shape")
    return v_uncond + w * (v_cond - v_uncond)
