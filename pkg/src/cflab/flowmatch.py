"""Linear-path flow matching: interpolation, target velocities, loss, sampler.

Convention used throughout: data lives at t=1, noise at t=0, the path is
z_t = t*z1 + (1-t)*z0, the conditional target velocity is (z1 - z)/(1 - t)
which on-path reduces to z1 - z0, and a one-step estimate of the endpoint
from (z_t, u, t) is z_t + (1-t)*u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplingError, ShapeError, SingularityError
from .numerics import Grid, as_grid

TIME_EPS = 1e-3


def _pair(a, b, op):
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")
    return a, b


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ShapeError(f"flow time must lie in [0, 1], got {t}")
    return t


def interpolate_path(z0, z1, t) -> Grid:
    """Point on the linear path: t*z1 + (1-t)*z0. t scalar or broadcastable."""
    z0, z1 = _pair(z0, z1, "interpolate_path")
    t = _check_time(t)
    return t * z1 + (1.0 - t) * z0


def conditional_velocity(z, z1, t) -> Grid:
    """Target velocity (z1 - z)/(1 - t); singular at t=1."""
    z, z1 = _pair(z, z1, "conditional_velocity")
    t = _check_time(t)
    if np.any(t >= 1.0):
        raise SingularityError("conditional velocity is singular at t=1")
    return (z1 - z) / (1.0 - t)

def linear_velocity(z0, z1) -> Grid:
    """Constant path velocity z1 - z0 (the on-path value of the conditional one)."""
    z0, z1 = _pair(z0, z1, "linear_velocity")
    return z1 - z0


def cfm_loss(predicted, target) -> float:
    """Mean squared error between a predicted and a target velocity."""
    predicted, target = _pair(predicted, target, "cfm_loss")
    d = predicted - target
    return float(np.mean(d * d))


def estimate_target(z_t, u, t) -> Grid:
    """One-step extrapolation to the t=1 endpoint: z_t + (1-t)*u."""
    z_t, u = _pair(z_t, u, "estimate_target")
    t = _check_time(t)
    return z_t + (1.0 - t) * u


def sample_train_time(rng, size=None, eps=TIME_EPS):
    """Training times uniform on [0, 1-eps], keeping targets bounded."""
    return rng.uniform(0.0, 1.0 - eps, size=size)


@dataclass(frozen=True)
class SamplerConfig:
    """Euler integration settings: nfe steps over a uniform grid on [0, 1]."""

    nfe: int = 28

    def __post_init__(self):
        if self.nfe < 1:
            raise ShapeError(f"nfe must be >= 1, got {self.nfe}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nfe + 1)


def euler_sample(velocity_fn, z0, cfg: SamplerConfig) -> Grid:
    """Integrate dz/dt = velocity_fn(z, t) from t=0 to t=1 with fixed steps.

    velocity_fn is evaluated at the left endpoint of each step. Raises
    SamplingError (with the step index) if any intermediate state goes
    non-finite.
    """
    z = as_grid(z0).copy()
    times = cfg.times
    for k in range(cfg.nfe):
        t_k = times[k]
        dt = times[k + 1] - times[k]
        u = np.asarray(velocity_fn(z, t_k), dtype=np.float64)
        if u.shape != z.shape:
            raise ShapeError(f"velocity shape {u.shape} vs state {z.shape}")
        z = z + dt * u
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite state after Euler step {k}", step=k)
    return z
