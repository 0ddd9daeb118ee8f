"""Distribution matching distillation: generator direction and fake-model loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowmatch import interpolate, velocity_to_score, velocity_to_x0
from .netcore import ParamSet

DMD_T_RANGE = (0.02, 0.98)


@dataclass
class DmdBatch:
    x_gen: np.ndarray
    t_new: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray
    c: np.ndarray


def renoise(
    x0: np.ndarray,
    c,
    rng: np.random.Generator,
    t_range: tuple[float, float] = DMD_T_RANGE,
) -> DmdBatch:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("renoise needs a non-empty (batch, dim) array")
    lo, hi = t_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid t_range {t_range}")
    b = x0.shape[0]
    t_new = rng.uniform(lo, hi, size=b) if hi > lo else np.full(b, lo)
    eps = rng.standard_normal(x0.shape)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,)).copy()
    return DmdBatch(x0, t_new, eps, interpolate(x0, eps, t_new), c)


def score_difference(batch: DmdBatch, real, fake, w_cfg: float = 1.0) -> np.ndarray:
    """``s_fake - s_real`` at the renoised states; guidance applies to the real side only."""
    v_real = real.guided_velocity(batch.x_t, batch.t_new, batch.c, w_cfg)
    v_fake = fake.velocity(batch.x_t, batch.t_new, batch.c)
    s_real = velocity_to_score(batch.x_t, batch.t_new, v_real)
    s_fake = velocity_to_score(batch.x_t, batch.t_new, v_fake)
    d = s_fake - s_real
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("non-finite score difference in DMD direction")
    return d


def dmd_generator_cotangent(
    batch: DmdBatch,
    real,
    fake,
    w_cfg: float = 1.0,
    normalize: bool = True,
) -> np.ndarray:
    """Per-sample gradient of the DMD objective w.r.t. ``x_gen``.

    Descending along it moves generator outputs toward the real distribution.
    With ``normalize`` each sample's direction is divided by its mean absolute
    value, which makes the result invariant to a positive rescaling of the
    score gap. The chain factor ``dx_t / dx_gen = 1 - t`` is applied last.
    """
    d = score_difference(batch, real, fake, w_cfg)
    if normalize:
        d = d / (np.mean(np.abs(d), axis=1, keepdims=True) + 1e-8)
    return d * (1.0 - batch.t_new)[:, None]


def dmd_surrogate_loss(cotangent: np.ndarray) -> float:
    """Logged value of ``0.5 * ||x - sg(x - g)||^2`` averaged over the batch."""
    return float(0.5 * np.mean(np.sum(cotangent**2, axis=1)))


def fake_model_loss(fake, batch: DmdBatch) -> tuple[float, ParamSet]:
    """Mean ``||x0_pred(x_t) - x_gen||^2`` and its gradient w.r.t. the fake model.

    ``x_gen`` is treated as data: no gradient reaches the generator.
    """
    v, trace = fake.forward(batch.x_t, batch.t_new, batch.c)
    x0_pred = velocity_to_x0(batch.x_t, batch.t_new, v)
    resid = x0_pred - batch.x_gen
    b = resid.shape[0]
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    # d x0_pred / d v = -t
    _, grads = fake.backward(trace, -2.0 * resid * batch.t_new[:, None] / b)
    return loss, grads
