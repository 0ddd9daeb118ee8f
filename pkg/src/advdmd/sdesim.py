"""Marginal-preserving SDE sampling of a velocity field.

Each Euler-Maruyama step from ``t_from`` to ``t_to`` (``dt = t_from - t_to``)
draws

    x_to = x - dt * [v + sigma^2 / (2 t) * (x + (1 - t) v)] + sigma * sqrt(dt) * eps

with ``sigma = min(eta * sqrt(t / (1 - t)), sigma_cap)`` evaluated at ``t_from``.
The transition is Gaussian, so every step carries a log-density that the
policy-gradient code can recompute under other parameters.

Arrays are batched: a :class:`Trajectory` holds ``B`` samples advanced in lockstep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flowmatch import T_MAX, T_MIN, time_grid

LOG_2PI = float(np.log(2.0 * np.pi))


def sigma_t(t: float, eta: float, sigma_cap: float = 3.0, t_min: float = T_MIN, t_max: float = T_MAX) -> float:
    if not t_min - 1e-12 <= t <= t_max + 1e-12:
        raise ValueError(f"t={t} outside the clamped range [{t_min}, {t_max}]")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return float(min(eta * np.sqrt(t / (1.0 - t)), sigma_cap))


@dataclass(frozen=True)
class SdeSchedule:
    t_grid: tuple[float, ...]
    eta: float = 0.7
    sigma_cap: float = 3.0

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.t_grid)
        object.__setattr__(self, "t_grid", grid)
        if len(grid) < 2:
            raise ValueError("schedule needs at least one step")
        if any(a <= b for a, b in zip(grid[:-1], grid[1:])):
            raise ValueError("t_grid must be strictly decreasing")
        if grid[0] > T_MAX + 1e-12 or grid[-1] < T_MIN - 1e-12:
            raise ValueError(f"t_grid must lie within [{T_MIN}, {T_MAX}]")
        if self.eta < 0 or self.sigma_cap <= 0:
            raise ValueError("need eta >= 0 and sigma_cap > 0")

    @classmethod
    def uniform(cls, n_steps: int, eta: float = 0.7, sigma_cap: float = 3.0) -> "SdeSchedule":
        return cls(tuple(time_grid(n_steps, T_MAX, T_MIN)), eta, sigma_cap)

    @property
    def n_steps(self) -> int:
        return len(self.t_grid) - 1

    def with_eta(self, eta: float) -> "SdeSchedule":
        return SdeSchedule(self.t_grid, eta, self.sigma_cap)


@dataclass
class TrajStep:
    t_from: float
    t_to: float
    x_from: np.ndarray
    drift_mean: np.ndarray
    noise_std: float
    x_to: np.ndarray
    logp: np.ndarray | None
    sigma: float = 0.0

    @property
    def dt(self) -> float:
        return self.t_from - self.t_to

    @property
    def deterministic(self) -> bool:
        return self.logp is None


@dataclass
class Trajectory:
    """``B`` sample paths advanced together; ``c`` holds each path's condition."""

    c: np.ndarray
    z: np.ndarray
    steps: list[TrajStep] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.steps[-1].x_to if self.steps else self.z

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def batch(self) -> int:
        return self.z.shape[0]

    @property
    def t_grid(self) -> tuple[float, ...]:
        return tuple([s.t_from for s in self.steps] + [self.steps[-1].t_to])

    def states_entering(self) -> np.ndarray:
        """``(B, n_steps, D)`` states at each step's ``t_from``."""
        return np.stack([s.x_from for s in self.steps], axis=1)

    def states_leaving(self) -> np.ndarray:
        """``(B, n_steps, D)`` states at each step's ``t_to``."""
        return np.stack([s.x_to for s in self.steps], axis=1)


def drift_coefficients(t_from: float, t_to: float, sigma: float) -> tuple[float, float]:
    """``(a, b)`` with transition mean ``a * x + b * v``."""
    dt = t_from - t_to
    k = sigma * sigma / (2.0 * t_from)
    return 1.0 - dt * k, -dt * (1.0 + k * (1.0 - t_from))


def transition_mean(x: np.ndarray, v: np.ndarray, t_from: float, t_to: float, sigma: float) -> np.ndarray:
    a, b = drift_coefficients(t_from, t_to, sigma)
    return a * x + b * v


def gaussian_logprob(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    """Log-density of each row of ``x`` under ``N(mean, std^2 I)``."""
    d = x.shape[-1]
    sq = np.sum((x - mean) ** 2, axis=-1)
    return -sq / (2.0 * std * std) - 0.5 * d * (LOG_2PI + 2.0 * np.log(std))


def sde_step(
    model,
    x_t: np.ndarray,
    t_from: float,
    t_to: float,
    c,
    eta: float,
    rng: np.random.Generator,
    sigma_cap: float = 3.0,
) -> TrajStep:
    if not t_from > t_to:
        raise ValueError(f"need t_from > t_to, got {t_from} -> {t_to}")
    sigma = sigma_t(t_from, eta, sigma_cap)
    v = model.velocity(x_t, t_from, c)
    mean = transition_mean(x_t, v, t_from, t_to, sigma)
    if not np.all(np.isfinite(mean)):
        raise FloatingPointError(f"non-finite drift at t={t_from}")
    if sigma == 0.0:
        return TrajStep(t_from, t_to, x_t, mean, 0.0, mean, None, 0.0)
    std = sigma * np.sqrt(t_from - t_to)
    x_to = mean + std * rng.standard_normal(mean.shape)
    return TrajStep(t_from, t_to, x_t, mean, float(std), x_to, gaussian_logprob(x_to, mean, std), sigma)


def sample_trajectory(
    model,
    z: np.ndarray,
    c,
    schedule: SdeSchedule,
    rng: np.random.Generator,
) -> Trajectory:
    z = np.asarray(z, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (z.shape[0],)).copy()
    traj = Trajectory(c, z)
    x = z
    grid = schedule.t_grid
    for t_from, t_to in zip(grid[:-1], grid[1:]):
        step = sde_step(model, x, t_from, t_to, c, schedule.eta, rng, schedule.sigma_cap)
        traj.steps.append(step)
        x = step.x_to
    return traj


def transition_logprob(step: TrajStep, model, c) -> np.ndarray:
    """Log-density of the recorded ``x_to`` under ``model``'s drift."""
    if step.deterministic:
        raise ValueError("transition log-probability is undefined for a deterministic (eta=0) step")
    v = model.velocity(step.x_from, step.t_from, c)
    mean = transition_mean(step.x_from, v, step.t_from, step.t_to, step.sigma)
    return gaussian_logprob(step.x_to, mean, step.noise_std)
