"""Group-relative policy optimisation over Gaussian SDE transitions.

Rewards come as a ``(B, T)`` table for ``B = n_groups * G`` paths. Advantages
are normalised per group and per timestep column. The loss returned here is
the quantity to *minimise*: the negated clipped surrogate plus the KL penalty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowmatch import VelocityModel
from .netcore import ParamSet, scaled_sum
from .sdesim import Trajectory, drift_coefficients, gaussian_logprob

EPS_STD = 1e-8


def advantages(rewards: np.ndarray, group_size: int | None = None) -> np.ndarray:
    """Column-wise ``(R - mean) / std`` within each group (population std).

    ``rewards`` is ``(G, T)`` for one group or ``(n_groups * G, T)`` with
    ``group_size`` set. Columns whose std is at most ``EPS_STD`` become zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    b, t = r.shape
    g = b if group_size is None else group_size
    if g < 2:
        raise ValueError(f"group size must be at least 2, got {g}")
    if b % g:
        raise ValueError(f"{b} rows do not split into groups of {g}")
    grouped = r.reshape(b // g, g, t)
    mean = grouped.mean(axis=1, keepdims=True)
    std = grouped.std(axis=1, keepdims=True)
    safe = np.where(std > EPS_STD, std, 1.0)
    adv = np.where(std > EPS_STD, (grouped - mean) / safe, 0.0)
    return adv.reshape(b, t)


def ratio(logp_new: np.ndarray, logp_old: np.ndarray) -> np.ndarray:
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    if not (np.all(np.isfinite(logp_new)) and np.all(np.isfinite(logp_old))):
        raise FloatingPointError("non-finite log-probabilities in importance ratio")
    return np.exp(logp_new - logp_old)


def clipped_term(r, adv, eps_clip: float):
    if not 0.0 < eps_clip < 1.0:
        raise ValueError(f"eps_clip must lie in (0, 1), got {eps_clip}")
    return np.minimum(r * adv, np.clip(r, 1.0 - eps_clip, 1.0 + eps_clip) * adv)


def clipped_term_grad(r, adv, eps_clip: float):
    """Derivative of :func:`clipped_term` w.r.t. ``r``."""
    unclipped = r * adv <= np.clip(r, 1.0 - eps_clip, 1.0 + eps_clip) * adv
    return np.where(unclipped, adv, 0.0)


def kl_step(mean: np.ndarray, ref_mean: np.ndarray, noise_std: float) -> np.ndarray:
    """KL between two Gaussians sharing covariance ``noise_std^2 I``, per row."""
    return np.sum((mean - ref_mean) ** 2, axis=-1) / (2.0 * noise_std * noise_std)


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copies of the sampling policy and the KL reference."""

    old: ParamSet
    ref: ParamSet

    @classmethod
    def capture(cls, old: ParamSet, ref: ParamSet) -> "PolicySnapshot":
        return cls(old.copy(), ref.copy())


@dataclass
class GroupBatch:
    traj: Trajectory
    rewards: np.ndarray
    advantages: np.ndarray
    group_size: int

    @classmethod
    def build(cls, traj: Trajectory, rewards: np.ndarray, group_size: int) -> "GroupBatch":
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != (traj.batch, traj.n_steps):
            raise ValueError(f"reward table {rewards.shape} does not match trajectories {(traj.batch, traj.n_steps)}")
        return cls(traj, rewards, advantages(rewards, group_size), group_size)


@dataclass
class GrpoInfo:
    loss: float
    surrogate: float
    kl: float
    mean_ratio: float
    clip_frac: float


def grpo_loss(
    group: GroupBatch,
    model: VelocityModel,
    snapshot: PolicySnapshot,
    eps_clip: float = 0.2,
    beta: float = 0.004,
) -> tuple[GrpoInfo, ParamSet]:
    """Minimised GRPO objective and its gradient w.r.t. ``model.params``.

    The old-policy log-probabilities are the ones recorded while sampling.
    """
    traj = group.traj
    n_terms = traj.batch * traj.n_steps
    ref_model = model.with_params(snapshot.ref)
    parts: list[tuple[float, ParamSet]] = []
    surrogate = kl_total = ratio_total = clipped = 0.0
    for k, step in enumerate(traj.steps):
        if step.deterministic:
            raise ValueError("GRPO needs a stochastic policy (eta > 0)")
        a, b = drift_coefficients(step.t_from, step.t_to, step.sigma)
        v, trace = model.forward(step.x_from, step.t_from, traj.c)
        mean = a * step.x_from + b * v
        logp = gaussian_logprob(step.x_to, mean, step.noise_std)
        r = ratio(logp, step.logp)
        adv = group.advantages[:, k]
        surrogate += float(np.sum(clipped_term(r, adv, eps_clip)))
        ratio_total += float(np.sum(r))
        clipped += float(np.sum(np.abs(r - 1.0) > eps_clip))
        s2 = step.noise_std**2
        # d(-surrogate)/d mean via d logp / d mean = (x_to - mean) / s^2
        g_logp = -clipped_term_grad(r, adv, eps_clip) * r / n_terms
        g_mean = g_logp[:, None] * (step.x_to - mean) / s2
        if beta > 0.0:
            ref_mean = a * step.x_from + b * ref_model.velocity(step.x_from, step.t_from, traj.c)
            kl_total += float(np.sum(kl_step(mean, ref_mean, step.noise_std)))
            g_mean = g_mean + beta * (mean - ref_mean) / s2 / n_terms
        _, grads = model.backward(trace, b * g_mean)
        parts.append((1.0, grads))
    kl = kl_total / n_terms
    surr = surrogate / n_terms
    info = GrpoInfo(-surr + beta * kl, surr, kl, ratio_total / n_terms, clipped / n_terms)
    return info, scaled_sum(parts)
