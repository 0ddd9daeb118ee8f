"""Rectified-flow parameterisation, teacher training and deterministic sampling.

Convention: ``x_t = (1 - t) * x0 + t * eps`` with target velocity ``eps - x0``;
``t = 1`` is pure noise and sampling integrates from ``t = 1`` down to ``t = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore
from .netcore import NetSpec, OptState, ParamSet

T_MIN = 1e-3
T_MAX = 1.0 - 1e-3


def _as_time(t, batch: int) -> np.ndarray:
    """Broadcast a scalar or per-sample time to shape ``(batch, 1)``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((batch, 1), float(t))
    return t.reshape(batch, 1)


@dataclass
class MixtureTarget:
    """Isotropic Gaussian mixture; component ``k`` is condition class ``k``."""

    means: np.ndarray
    std: float
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.ndim != 2 or len(self.weights) != len(self.means):
            raise ValueError("means must be (K, D) with one weight per component")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.std <= 0:
            raise ValueError("component std must be positive")

    @classmethod
    def ring(cls, n_modes: int = 8, radius: float = 2.0, std: float = 0.15) -> "MixtureTarget":
        angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(means, std, np.full(n_modes, 1.0 / n_modes))

    @property
    def n_conditions(self) -> int:
        return len(self.means)

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "std": self.std, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureTarget":
        return cls(np.array(d["means"]), float(d["std"]), np.array(d["weights"]))


def sample_conditions(target: MixtureTarget, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(target.n_conditions, size=n, p=target.weights)


def sample_target(target: MixtureTarget, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points and their component labels."""
    c = sample_conditions(target, n, rng)
    x = target.means[c] + target.std * rng.standard_normal((n, target.data_dim))
    return x, c


def interpolate(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError(f"t must lie in [0, 1], got range [{tt.min()}, {tt.max()}]")
    if x0.ndim == 2:
        tt = _as_time(tt, x0.shape[0])
    return (1.0 - tt) * x0 + tt * np.asarray(eps, dtype=np.float64)


def velocity_to_x0(x_t: np.ndarray, t, v: np.ndarray) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    tt = _as_time(t, x_t.shape[0]) if x_t.ndim == 2 else np.asarray(t, dtype=np.float64)
    return x_t - tt * v


def velocity_to_score(x_t: np.ndarray, t, v: np.ndarray, t_min: float = T_MIN) -> np.ndarray:
    """Score of the marginal at ``t`` implied by a velocity prediction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < t_min):
        raise ValueError(f"score is singular near t=0; got t={tt.min()} < t_min={t_min}")
    if x_t.ndim == 2:
        tt = _as_time(tt, x_t.shape[0])
    return -(x_t + (1.0 - tt) * v) / tt


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    if w < 0:
        raise ValueError(f"guidance scale must be non-negative, got {w}")
    return v_uncond + w * (v_cond - v_uncond)


class VelocityModel:
    """MLP velocity field ``v(x, t, c)``.

    The network input is ``[x, t, onehot(c)]`` where the one-hot has an extra
    slot (index ``n_conditions``) for the null condition used by guidance.
    """

    def __init__(self, spec: NetSpec, params: ParamSet, data_dim: int, n_conditions: int):
        if spec.in_dim != data_dim + 1 + n_conditions + 1:
            raise ValueError(
                f"input width {spec.in_dim} does not match data_dim={data_dim}, n_conditions={n_conditions}"
            )
        if spec.out_dim != data_dim:
            raise ValueError(f"output width {spec.out_dim} must equal data_dim={data_dim}")
        self.spec = spec
        self.params = params
        self.data_dim = data_dim
        self.n_conditions = n_conditions

    @classmethod
    def create(
        cls,
        data_dim: int,
        n_conditions: int,
        hidden: tuple[int, ...] = (128, 128, 128),
        activation: str = "silu",
        rng: np.random.Generator | None = None,
    ) -> "VelocityModel":
        rng = rng or np.random.default_rng(0)
        spec = NetSpec((data_dim + 1 + n_conditions + 1, *hidden, data_dim), activation)
        return cls(spec, netcore.init_params(spec, rng), data_dim, n_conditions)

    @property
    def null_condition(self) -> int:
        return self.n_conditions

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.spec, self.params.copy(), self.data_dim, self.n_conditions)

    def with_params(self, params: ParamSet) -> "VelocityModel":
        return VelocityModel(self.spec, params, self.data_dim, self.n_conditions)

    def encode(self, x: np.ndarray, t, c) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ValueError(f"state has shape {x.shape}, expected (batch, {self.data_dim})")
        b = x.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        onehot = np.zeros((b, self.n_conditions + 1))
        onehot[np.arange(b), c] = 1.0
        return np.concatenate([x, _as_time(t, b), onehot], axis=1)

    def forward(self, x: np.ndarray, t, c) -> tuple[np.ndarray, netcore.ForwardTrace]:
        return netcore.forward(self.spec, self.params, self.encode(x, t, c))

    def velocity(self, x: np.ndarray, t, c) -> np.ndarray:
        return self.forward(x, t, c)[0]

    def guided_velocity(self, x: np.ndarray, t, c, w: float = 1.0) -> np.ndarray:
        if w == 1.0:
            return self.velocity(x, t, c)
        v_cond = self.velocity(x, t, c)
        v_uncond = self.velocity(x, t, self.null_condition)
        return cfg_velocity(v_cond, v_uncond, w)

    def backward(
        self,
        trace: netcore.ForwardTrace,
        v_cotangent: np.ndarray | None,
        hidden_cotangents=None,
    ) -> tuple[np.ndarray, ParamSet]:
        """Return ``(cotangent on x, parameter gradients)``."""
        g_in, grads = netcore.backward(self.spec, self.params, trace, v_cotangent, hidden_cotangents)
        return g_in[:, : self.data_dim], grads


class AnalyticGaussianVelocity:
    """Exact velocity field for data ``N(mean, cov)`` under the rectified-flow path.

    The marginal at ``t`` is ``N((1-t) mean, (1-t)^2 cov + t^2 I)``; conditions
    are ignored, so guidance is a no-op.
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.data_dim = self.mean.shape[0]

    def score(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tt = _as_time(t, x.shape[0])[:, 0]
        eye = np.eye(self.data_dim)
        out = np.empty_like(x)
        for tv in np.unique(tt):
            idx = tt == tv
            cov_t = (1.0 - tv) ** 2 * self.cov + tv**2 * eye
            out[idx] = -np.linalg.solve(cov_t, (x[idx] - (1.0 - tv) * self.mean).T).T
        return out

    def velocity(self, x: np.ndarray, t, c=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tt = _as_time(t, x.shape[0])
        # score = -(x + (1-t) v) / t  =>  v = (-t * score - x) / (1 - t)
        return (-tt * self.score(x, t) - x) / (1.0 - tt)

    def guided_velocity(self, x: np.ndarray, t, c=None, w: float = 1.0) -> np.ndarray:
        return self.velocity(x, t, c)


def cfm_loss_and_grads(
    model: VelocityModel,
    x0: np.ndarray,
    c: np.ndarray,
    rng: np.random.Generator,
    cond_dropout: float = 0.1,
) -> tuple[float, ParamSet]:
    """Conditional flow-matching MSE and its gradient for one batch."""
    b = x0.shape[0]
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(T_MIN, T_MAX, size=b)
    c = np.where(rng.random(b) < cond_dropout, model.null_condition, c)
    x_t = interpolate(x0, eps, t)
    v, trace = model.forward(x_t, t, c)
    resid = v - (eps - x0)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    _, grads = model.backward(trace, 2.0 * resid / b)
    return loss, grads


def cfm_train_step(
    model: VelocityModel,
    target: MixtureTarget,
    batch: int,
    rng: np.random.Generator,
    cond_dropout: float,
    opt_state: OptState,
    lr: float,
) -> float:
    """Sample a data batch, take one Adam step on the flow-matching loss."""
    if batch < 1:
        raise ValueError("batch size must be at least 1")
    x0, c = sample_target(target, batch, rng)
    loss, grads = cfm_loss_and_grads(model, x0, c, rng, cond_dropout)
    netcore.optimizer_step(model.params, grads, opt_state, lr)
    return loss


def cfm_eval_loss(model: VelocityModel, x0: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> float:
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(T_MIN, T_MAX, size=x0.shape[0])
    v = model.velocity(interpolate(x0, eps, t), t, c)
    return float(np.mean(np.sum((v - (eps - x0)) ** 2, axis=1)))


def time_grid(n_steps: int, t_start: float = 1.0, t_end: float = 0.0) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    return np.linspace(t_start, t_end, n_steps + 1)


def ode_sample(
    model,
    z: np.ndarray,
    c,
    n_steps: int,
    w_cfg: float = 1.0,
    t_grid: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Euler integration of ``dx = v dt`` from the first to the last grid time.

    Returns the final state and the list of states visited (starting with ``z``).
    """
    grid = time_grid(n_steps) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if len(grid) != n_steps + 1:
        raise ValueError(f"grid has {len(grid)} points, expected {n_steps + 1}")
    x = np.asarray(z, dtype=np.float64)
    states = [x]
    for t_from, t_to in zip(grid[:-1], grid[1:]):
        v = model.guided_velocity(x, t_from, c, w_cfg)
        x = x - (t_from - t_to) * v
        states.append(x)
    return x, states


def train_teacher(
    target: MixtureTarget,
    steps: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (128, 128, 128),
    batch: int = 512,
    lr: float = 1e-3,
    cond_dropout: float = 0.1,
    log_every: int = 0,
) -> tuple[VelocityModel, list[tuple[int, float]]]:
    """Fit a conditional velocity field to ``target`` with cosine-decayed Adam."""
    model = VelocityModel.create(target.data_dim, target.n_conditions, hidden, "silu", rng)
    opt = OptState.for_params(model.params)
    history = []
    for step in range(steps):
        step_lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        loss = cfm_train_step(model, target, batch, rng, cond_dropout, opt, step_lr)
        if log_every and (step % log_every == 0 or step == steps - 1):
            history.append((step, loss))
    return model, history
