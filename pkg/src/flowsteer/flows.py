"""Interpolants, noise schedules, ODE/SDE steppers, and the Gaussian
transition density used by the policy-gradient stage.

Convention: time t runs from 0 (pure noise) to 1 (data), states interpolate
as x_t = t*x_data + (1-t)*x_noise, and the target velocity is
v = x_data - x_noise. Under this convention the marginal score is
recoverable from the velocity as -(x - t*v)/(1-t), and adding diffusion
sigma*dw with drift correction (sigma^2/2)*score preserves the marginals of
the deterministic flow (verified statistically in the test suite).

All steppers accept either plain arrays or tracked Tensors and perform the
identical arithmetic in the identical order, so recorded rollout quantities
and their re-evaluation under a new policy are bit-comparable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, gauss_logpdf_value, gaussian_logpdf, mul, scale as ad_scale, sub

# The score denominator (1 - t) vanishes at the clean endpoint; reject
# stochastic stepping this close to t = 1. The final denoising step of a
# schedule is always deterministic, so the clamp never distorts a
# stochastic transition.
T_CLAMP = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """Ordered denoising times, normalized from raw descending timesteps."""
    raw: tuple[float, ...]
    times: tuple[float, ...]        # ascending, times[0] = 0, times[-1] = 1
    dts: tuple[float, ...]          # dts[n] = times[n+1] - times[n]

    @property
    def n_steps(self) -> int:
        return len(self.dts)

    def denormalize(self) -> tuple[float, ...]:
        """Raw timesteps are carried verbatim, so the round trip is exact."""
        return self.raw


def normalize_schedule(raw_timesteps) -> NoiseSchedule:
    """Map raw descending timesteps (first 1000, last 0) onto ascending
    normalized times t_n = (s_0 - s_n)/s_0."""
    raw = tuple(float(s) for s in raw_timesteps)
    if len(raw) < 2:
        raise ValueError("schedule needs at least two timesteps")
    if raw[0] != 1000.0 or raw[-1] != 0.0:
        raise ValueError(f"schedule must start at 1000 and end at 0, got {raw}")
    if any(a <= b for a, b in zip(raw, raw[1:])):
        raise ValueError(f"schedule must be strictly descending, got {raw}")
    s0 = raw[0]
    times = tuple((s0 - s) / s0 for s in raw)
    dts = tuple(t1 - t0 for t0, t1 in zip(times, times[1:]))
    return NoiseSchedule(raw=raw, times=times, dts=dts)


@dataclass(frozen=True)
class FlowSample:
    """One interpolated training point: x_t between a noise and a data draw."""
    x_noise: np.ndarray
    x_data: np.ndarray
    t: float
    x_t: np.ndarray
    v_target: np.ndarray


def interpolate(x_data: np.ndarray, x_noise: np.ndarray, t: float) -> FlowSample:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation time must be in [0, 1], got {t}")
    if x_data.shape != x_noise.shape:
        raise ValueError(f"interpolate: shape mismatch {x_data.shape} vs {x_noise.shape}")
    x_t = t * x_data + (1.0 - t) * x_noise
    return FlowSample(x_noise=x_noise, x_data=x_data, t=float(t), x_t=x_t,
                      v_target=x_data - x_noise)


def ode_step(x, v, dt: float):
    """Explicit Euler: x + v*dt. Works on arrays or tracked Tensors."""
    if dt <= 0.0:
        raise ValueError(f"ode_step: dt must be positive, got {dt}")
    if isinstance(x, Tensor) or isinstance(v, Tensor):
        return add(x, ad_scale(v, dt))
    return x + v * dt


def score_from_velocity(x, v, t: float):
    """Marginal score recovered from the velocity field: -(x - t*v)/(1-t).

    Implemented as multiplication by a precomputed reciprocal in both the
    array and Tensor paths so the two stay bit-identical.
    """
    if t > 1.0 - T_CLAMP:
        raise ValueError(f"score_from_velocity: t={t} within {T_CLAMP} of the t=1 singularity")
    neg_inv = -1.0 / (1.0 - t)
    if isinstance(x, Tensor) or isinstance(v, Tensor):
        return ad_scale(sub(x, ad_scale(v, t)), neg_inv)
    return (x - t * v) * neg_inv


@dataclass
class SdeStepRecord:
    """Everything the policy-gradient stage needs about one transition."""
    step_index: int
    sigma: float
    mean: np.ndarray
    scale: float                      # sigma * sqrt(dt)
    sample: np.ndarray
    log_density: float | None         # None for deterministic (sigma == 0)
    deterministic: bool = field(default=False)


def sde_transition_mean(x, v, t: float, dt: float, sigma: float):
    """Mean of the marginal-preserving stochastic Euler step:
    x + [v + (sigma^2/2)*score(x, v, t)]*dt."""
    half_sig2 = 0.5 * sigma * sigma
    score = score_from_velocity(x, v, t)
    if isinstance(x, Tensor) or isinstance(v, Tensor):
        drift = add(v, ad_scale(score, half_sig2))
        return add(x, ad_scale(drift, dt))
    return x + (v + score * half_sig2) * dt


def sde_step(x: np.ndarray, v: np.ndarray, t: float, dt: float, sigma: float,
             eps: np.ndarray, step_index: int = 0) -> tuple[np.ndarray, SdeStepRecord]:
    """One stochastic Euler step. With sigma == 0 this is bit-identical to
    ode_step and the record is marked deterministic (no density defined)."""
    if sigma < 0.0:
        raise ValueError(f"sde_step: sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        nxt = ode_step(x, v, dt)
        return nxt, SdeStepRecord(step_index=step_index, sigma=0.0, mean=nxt,
                                  scale=0.0, sample=nxt, log_density=None,
                                  deterministic=True)
    mean = sde_transition_mean(x, v, t, dt, sigma)
    scl = sigma * np.sqrt(dt)
    sample = mean + scl * eps
    logp = gauss_logpdf_value(sample, mean, scl)
    return sample, SdeStepRecord(step_index=step_index, sigma=float(sigma), mean=mean,
                                 scale=float(scl), sample=sample, log_density=logp)


def transition_log_density(sample, mean, scl: float):
    """Diagonal-Gaussian log density of `sample` under N(mean, scl^2 I).

    Returns a float for plain arrays, or a tracked scalar Tensor when either
    argument is a Tensor (differentiable w.r.t. the mean). Both paths share
    the same closed form and are bit-identical.
    """
    if scl <= 0.0:
        raise ValueError(f"transition_log_density: scale must be positive, got {scl}")
    if isinstance(sample, Tensor) or isinstance(mean, Tensor):
        return gaussian_logpdf(sample, mean, scl)
    return gauss_logpdf_value(np.asarray(sample), np.asarray(mean), scl)
