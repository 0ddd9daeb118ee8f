"""Discriminator built on the fake model's hidden features, used as a reward.

``D(x_t, c) = mean_k sigmoid(h_k([tap_k(x_t, t, c), onehot(c), t]))`` where
``tap_k`` is a hidden activation of the (frozen) fake model. All log terms are
evaluated from logits so saturated heads never produce ``log(0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore
from .flowmatch import T_MAX, T_MIN, VelocityModel, interpolate
from .netcore import NetSpec, ParamSet


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(z))


def _logmeanexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class Discriminator:
    tap_layers: tuple[int, ...]
    head_spec: NetSpec
    heads: list[ParamSet]
    n_conditions: int

    def __post_init__(self) -> None:
        if len(self.heads) < 1 or len(self.heads) != len(self.tap_layers):
            raise ValueError("need one head per tap layer and at least one head")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @classmethod
    def create(
        cls,
        fake: VelocityModel,
        rng: np.random.Generator,
        tap_layers: tuple[int, ...] | None = None,
        head_hidden: int = 32,
    ) -> "Discriminator":
        n_hidden = fake.spec.n_hidden
        if tap_layers is None:
            # shallow / middle / deep
            tap_layers = tuple(sorted({0, n_hidden // 2, n_hidden - 1}))
        widths = {fake.spec.layer_dims[i + 1] for i in tap_layers if 0 <= i < n_hidden}
        _validate_taps(tap_layers, n_hidden)
        if len(widths) != 1:
            raise ValueError("tapped layers must share one width")
        in_dim = widths.pop() + fake.n_conditions + 1
        spec = NetSpec((in_dim, head_hidden, 1), "tanh")
        heads = [netcore.init_params(spec, rng, zero_last=True) for _ in tap_layers]
        return cls(tuple(tap_layers), spec, heads, fake.n_conditions)

    def copy(self) -> "Discriminator":
        return Discriminator(self.tap_layers, self.head_spec, [h.copy() for h in self.heads], self.n_conditions)


def _validate_taps(tap_layers, n_hidden: int) -> None:
    for i in tap_layers:
        if not 0 <= i < n_hidden:
            raise IndexError(f"tap layer {i} out of range for a backbone with {n_hidden} hidden layers")


@dataclass
class _DiscPass:
    logits: np.ndarray
    backbone_trace: netcore.ForwardTrace
    head_traces: list[netcore.ForwardTrace]


def _forward(disc: Discriminator, fake: VelocityModel, x_t: np.ndarray, t, c) -> _DiscPass:
    _validate_taps(disc.tap_layers, fake.spec.n_hidden)
    b = x_t.shape[0]
    _, trace = fake.forward(x_t, t, c)
    cond = fake.encode(np.zeros((b, fake.data_dim)), t, c)[:, fake.data_dim :]
    t_col, onehot = cond[:, :1], cond[:, 1 : 1 + disc.n_conditions]
    logits = np.empty((b, disc.n_heads))
    head_traces = []
    for k, (layer, head) in enumerate(zip(disc.tap_layers, disc.heads)):
        h_in = np.concatenate([trace.hidden(layer), onehot, t_col], axis=1)
        out, htrace = netcore.forward(disc.head_spec, head, h_in)
        logits[:, k] = out[:, 0]
        head_traces.append(htrace)
    return _DiscPass(logits, trace, head_traces)


def head_logits(disc: Discriminator, fake: VelocityModel, x_t: np.ndarray, t, c) -> np.ndarray:
    return _forward(disc, fake, x_t, t, c).logits


def d_score(disc: Discriminator, fake: VelocityModel, x_t: np.ndarray, t, c) -> np.ndarray:
    """Average head probability of "real"; strictly inside (0, 1) for finite logits."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("d_score got non-finite states")
    return np.mean(_sigmoid(head_logits(disc, fake, x_t, t, c)), axis=1)


def neg_log_d(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-log D`` per row and its gradient w.r.t. the logits."""
    ls = _log_sigmoid(logits)
    val = -_logmeanexp(ls, axis=1)
    w = np.exp(ls - np.max(ls, axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return val, -w * _sigmoid(-logits)


def neg_log_one_minus_d(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-log(1 - D)`` per row and its gradient w.r.t. the logits."""
    val, g = neg_log_d(-logits)
    return val, -g


def _head_backward(disc: Discriminator, dp: _DiscPass, g_logits: np.ndarray) -> list[ParamSet]:
    return [
        netcore.backward(disc.head_spec, head, ht, g_logits[:, k : k + 1])[1]
        for k, (head, ht) in enumerate(zip(disc.heads, dp.head_traces))
    ]


def disc_loss(
    disc: Discriminator,
    fake: VelocityModel,
    x_real: np.ndarray,
    x_fake: np.ndarray,
    c_real,
    c_fake,
    rng: np.random.Generator,
) -> tuple[float, list[ParamSet]]:
    """Adversarial loss ``E[-log D(x_t)] + E[-log(1 - D(y_t))]`` and head gradients.

    Real and generated batches are noised independently at fresh times drawn
    uniformly from the clamped range. The backbone receives no gradient.
    """
    nr, nf = x_real.shape[0], x_fake.shape[0]
    t_r = rng.uniform(T_MIN, T_MAX, size=nr)
    t_f = rng.uniform(T_MIN, T_MAX, size=nf)
    xr_t = interpolate(x_real, rng.standard_normal(x_real.shape), t_r)
    xf_t = interpolate(x_fake, rng.standard_normal(x_fake.shape), t_f)
    return disc_loss_at(disc, fake, xr_t, t_r, c_real, xf_t, t_f, c_fake)


def disc_loss_at(disc, fake, xr_t, t_r, c_real, xf_t, t_f, c_fake) -> tuple[float, list[ParamSet]]:
    """``disc_loss`` on states that are already noised."""
    pr = _forward(disc, fake, xr_t, t_r, c_real)
    pf = _forward(disc, fake, xf_t, t_f, c_fake)
    lr_val, gr = neg_log_d(pr.logits)
    lf_val, gf = neg_log_one_minus_d(pf.logits)
    loss = float(np.mean(lr_val) + np.mean(lf_val))
    grads_r = _head_backward(disc, pr, gr / len(lr_val))
    grads_f = _head_backward(disc, pf, gf / len(lf_val))
    grads = [netcore.scaled_sum([(1.0, a), (1.0, b)]) for a, b in zip(grads_r, grads_f)]
    return loss, grads


def gan_generator_loss(
    disc: Discriminator,
    fake: VelocityModel,
    x_t: np.ndarray,
    t,
    c,
) -> tuple[float, np.ndarray]:
    """Mean ``-log D(x_t, c)`` and its cotangent on ``x_t`` (heads and backbone frozen)."""
    dp = _forward(disc, fake, x_t, t, c)
    val, g_logits = neg_log_d(dp.logits)
    b = x_t.shape[0]
    g_logits = g_logits / b
    tap_cot: dict[int, np.ndarray] = {}
    for k, (layer, head, ht) in enumerate(zip(disc.tap_layers, disc.heads, dp.head_traces)):
        g_in, _ = netcore.backward(disc.head_spec, head, ht, g_logits[:, k : k + 1])
        width = fake.spec.layer_dims[layer + 1]
        tap_cot[layer] = tap_cot.get(layer, 0.0) + g_in[:, :width]
    g_x, _ = fake.backward(dp.backbone_trace, None, tap_cot)
    return float(np.mean(val)), g_x


def stepwise_rewards(disc: Discriminator, fake: VelocityModel, traj) -> np.ndarray:
    """``(B, n_steps)`` table: reward of the state each step lands on, at its ``t_to``."""
    if traj.n_steps == 0:
        raise ValueError("trajectory has no steps")
    cols = [d_score(disc, fake, s.x_to, s.t_to, traj.c) for s in traj.steps]
    return np.stack(cols, axis=1)


def check_group_schedule(trajectories) -> None:
    grids = {tuple(t.t_grid) for t in trajectories}
    if len(grids) != 1:
        raise ValueError("trajectories in a group must share one schedule")


def combine_rewards(tables: list[np.ndarray], weights) -> np.ndarray:
    """Convex combination of equally shaped reward tables."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(tables) != len(weights) or len(tables) == 0:
        raise ValueError("need one weight per reward table")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    shape = np.shape(tables[0])
    for tab in tables:
        if np.shape(tab) != shape:
            raise ValueError(f"reward table shapes differ: {np.shape(tab)} vs {shape}")
    weights = weights / weights.sum()
    out = np.zeros(shape)
    for w, tab in zip(weights, tables):
        out = out + w * np.asarray(tab, dtype=np.float64)
    return out
