"""Training loop: scheduled fake/discriminator and generator updates.

One *unit* of the schedule is either a joint fake-model + discriminator update
or a generator update. With ``fake_updates_per_gen = 5`` the roles cycle
``F F F F F G``. GRPO joins the generator objective after
``grpo_warmup_steps`` generator updates.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import advreward, dmdcore, grpocore, netcore
from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .config import TrainConfig, config_from_dict
from .evalbench import EvalSet, MetricReport, ProxyReward, evaluate_samples, proxy_reward_table
from .flowmatch import MixtureTarget, VelocityModel, ode_sample, sample_conditions, sample_target, train_teacher
from .netcore import NetSpec, OptState, ParamSet
from .sdesim import SdeSchedule, Trajectory, sample_trajectory
from .seeding import derive_rng

log = logging.getLogger(__name__)

GENERATOR = "generator"
FAKE_AND_DISC = "fake_and_disc"
METRIC_FIELDS = ("step", "role", "L_dmd", "L_gan", "L_grpo", "L_diff", "L_dis", "mean_reward", "grad_norm")


def make_target(cfg: TrainConfig) -> MixtureTarget:
    return MixtureTarget.ring(cfg.n_modes, cfg.ring_radius, cfg.mode_std)


def student_schedule(cfg: TrainConfig) -> SdeSchedule:
    return SdeSchedule.uniform(cfg.n_student_steps, cfg.eta, cfg.sigma_cap)


def fit_teacher(cfg: TrainConfig, seed: int | None = None) -> VelocityModel:
    seed = cfg.seed if seed is None else seed
    model, _ = train_teacher(
        make_target(cfg),
        cfg.teacher_steps,
        derive_rng(seed, "teacher"),
        hidden=tuple(cfg.teacher_hidden),
        batch=cfg.teacher_batch,
        lr=cfg.teacher_lr,
        cond_dropout=cfg.cond_dropout,
    )
    return model


@dataclass
class TrainState:
    teacher: VelocityModel
    gen: VelocityModel
    fake: VelocityModel
    disc: advreward.Discriminator
    opt_gen: OptState
    opt_fake: OptState
    opt_heads: list[OptState]
    ref_params: ParamSet
    rng: np.random.Generator
    step: int = 0
    gen_updates: int = 0
    history: list[dict] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)


def init_state(cfg: TrainConfig, teacher: VelocityModel) -> TrainState:
    """Student and fake model start from the teacher; heads start at D = 0.5.

    The KL reference for GRPO is the initial student and never moves.
    """
    gen = teacher.copy()
    fake = teacher.copy()
    disc = advreward.Discriminator.create(fake, derive_rng(cfg.seed, "heads"), head_hidden=cfg.head_hidden)
    return TrainState(
        teacher=teacher.copy(),
        gen=gen,
        fake=fake,
        disc=disc,
        opt_gen=OptState.for_params(gen.params),
        opt_fake=OptState.for_params(fake.params),
        opt_heads=[OptState.for_params(h) for h in disc.heads],
        ref_params=gen.params.copy(),
        rng=derive_rng(cfg.seed, "train"),
    )


def update_schedule(step: int, cfg: TrainConfig) -> tuple[str, bool]:
    """Role of schedule unit ``step`` and whether GRPO is active for it."""
    if cfg.variant == "grpo_fixed":
        return GENERATOR, True
    cycle = cfg.fake_updates_per_gen + 1
    role = GENERATOR if step % cycle == cfg.fake_updates_per_gen else FAKE_AND_DISC
    grpo_on = cfg.variant == "advdmd" and role == GENERATOR and step // cycle >= cfg.grpo_warmup_steps
    return role, grpo_on


def compose_generator_gradient(
    dmd_grads: ParamSet | None,
    gan_grads: ParamSet | None,
    grpo_grads: ParamSet | None,
    alpha: float,
    gamma: float,
) -> ParamSet:
    """``alpha * dmd + gamma * gan + grpo``; absent parts are skipped."""
    parts = [(w, g) for w, g in ((alpha, dmd_grads), (gamma, gan_grads), (1.0, grpo_grads)) if g is not None]
    if not parts:
        raise ValueError("generator objective has no active terms")
    total = netcore.scaled_sum(parts)
    for name, g in total.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite total generator gradient for {name!r}")
    return total


def generator_loss(l_dmd: float | None, l_gan: float | None, l_grpo: float | None, alpha: float, gamma: float) -> float:
    total = 0.0
    for w, v in ((alpha, l_dmd), (gamma, l_gan), (1.0, l_grpo)):
        if v is not None:
            total += w * v
    return total


@dataclass
class Rollout:
    """Backward simulation for one update plus the states picked for distillation."""

    traj: Trajectory | None
    states: np.ndarray
    t_grid: np.ndarray
    picks: np.ndarray
    c: np.ndarray

    @property
    def picked_states(self) -> np.ndarray:
        return self.states[np.arange(len(self.picks)), self.picks]

    @property
    def picked_t(self) -> np.ndarray:
        return self.t_grid[self.picks]


def rollout(
    state: TrainState,
    cfg: TrainConfig,
    c: np.ndarray,
    need_sde: bool,
    pick: bool = True,
) -> Rollout:
    """Simulate the student from noise and choose one entering state per path.

    In ``sde`` mode the distillation states are taken from the stochastic
    trajectory itself; in ``ode`` mode a separate deterministic pass from the
    same noise supplies them.
    """
    rng = state.rng
    schedule = student_schedule(cfg)
    z = rng.standard_normal((len(c), state.gen.data_dim))
    traj = None
    if need_sde or cfg.sim == "sde":
        traj = sample_trajectory(state.gen, z, c, schedule, rng)
    if cfg.sim == "sde":
        states = traj.states_entering()
    else:
        states = sample_trajectory(state.gen, z, c, schedule.with_eta(0.0), rng).states_entering()
    grid = np.asarray(schedule.t_grid[:-1])
    picks = rng.integers(0, len(grid), size=len(c)) if pick else np.zeros(len(c), dtype=np.int64)
    return Rollout(traj, states, grid, picks, c)


def _rewards(state: TrainState, cfg: TrainConfig, traj: Trajectory) -> np.ndarray:
    if cfg.variant == "grpo_fixed":
        target = make_target(cfg)
        proxy = ProxyReward(cfg.proxy_kind, tuple(target.means[cfg.proxy_mode]), cfg.proxy_tau)
        return proxy_reward_table(proxy, traj)
    table = advreward.stepwise_rewards(state.disc, state.fake, traj)
    if cfg.reward_mode == "logit":
        table = np.log(table) - np.log1p(-table)
    return table


@dataclass
class GeneratorUpdate:
    grads: ParamSet
    losses: dict
    rollout: Rollout
    x_gen: np.ndarray | None = None


def compute_generator_update(state: TrainState, cfg: TrainConfig, grpo_on: bool) -> GeneratorUpdate:
    """All generator-gradient terms for one update, without mutating parameters."""
    target = make_target(cfg)
    rng = state.rng
    g = cfg.group_size
    c = np.repeat(sample_conditions(target, cfg.n_groups, rng), g)
    use_dmd = cfg.variant != "grpo_fixed"
    ro = rollout(state, cfg, c, need_sde=grpo_on, pick=use_dmd)
    losses: dict = {}
    dmd_grads = gan_grads = grpo_grads = None
    x_gen = None
    if use_dmd:
        y, t_k = ro.picked_states, ro.picked_t
        v, trace = state.gen.forward(y, t_k, c)
        x_gen = y - t_k[:, None] * v
        batch = dmdcore.renoise(x_gen, c, rng, (cfg.dmd_t_min, cfg.dmd_t_max))
        cot = dmdcore.dmd_generator_cotangent(batch, state.teacher, state.fake, cfg.w_cfg, cfg.dmd_normalize)
        losses["L_dmd"] = dmdcore.dmd_surrogate_loss(cot)
        l_gan, g_xt = advreward.gan_generator_loss(state.disc, state.fake, batch.x_t, batch.t_new, c)
        losses["L_gan"] = l_gan
        n = len(c)
        # x_gen = y - t * v, so d x_gen / d v = -t
        _, dmd_grads = state.gen.backward(trace, -t_k[:, None] * cot / n)
        _, gan_grads = state.gen.backward(trace, -t_k[:, None] * g_xt * (1.0 - batch.t_new)[:, None])
    if grpo_on:
        rewards = _rewards(state, cfg, ro.traj)
        group = grpocore.GroupBatch.build(ro.traj, rewards, g)
        snap = grpocore.PolicySnapshot(state.gen.params, state.ref_params)
        kl_weight = cfg.beta if use_dmd else cfg.baseline_beta
        info, grpo_grads = grpocore.grpo_loss(group, state.gen, snap, cfg.eps_clip, kl_weight)
        losses["L_grpo"] = info.loss
        losses["mean_reward"] = float(np.mean(rewards))
    alpha = cfg.alpha if use_dmd else 0.0
    gamma = cfg.gamma if use_dmd else 0.0
    grads = compose_generator_gradient(dmd_grads, gan_grads, grpo_grads, alpha, gamma)
    return GeneratorUpdate(grads, losses, ro, x_gen)


def compute_fake_disc_update(state: TrainState, cfg: TrainConfig):
    target = make_target(cfg)
    rng = state.rng
    c = sample_conditions(target, cfg.fake_batch, rng)
    ro = rollout(state, cfg, c, need_sde=False)
    y, t_k = ro.picked_states, ro.picked_t
    x_gen = y - t_k[:, None] * state.gen.velocity(y, t_k, c)
    batch = dmdcore.renoise(x_gen, c, rng, (cfg.dmd_t_min, cfg.dmd_t_max))
    l_diff, fake_grads = dmdcore.fake_model_loss(state.fake, batch)
    x_real, c_real = sample_target(target, cfg.fake_batch, rng)
    l_dis, head_grads = advreward.disc_loss(state.disc, state.fake, x_real, x_gen, c_real, c, rng)
    return {"L_diff": l_diff, "L_dis": l_dis}, fake_grads, head_grads


def _all_finite(values) -> bool:
    return all(np.isfinite(v) for v in values if v is not None)


def _step(state: TrainState, cfg: TrainConfig) -> dict:
    role, grpo_on = update_schedule(state.step, cfg)
    row: dict = {"step": state.step, "role": role}
    rng_snapshot = state.rng.bit_generator.state
    try:
        if role == GENERATOR:
            upd = compute_generator_update(state, cfg, grpo_on)
            losses, norm = upd.losses, netcore.global_norm(upd.grads)
            if not _all_finite(list(losses.values()) + [norm]):
                raise FloatingPointError(f"non-finite generator losses {losses}")
            netcore.optimizer_step(state.gen.params, upd.grads, state.opt_gen, cfg.lr_gen)
            state.gen_updates += 1
        else:
            losses, fake_grads, head_grads = compute_fake_disc_update(state, cfg)
            norm = netcore.global_norm(fake_grads)
            if not _all_finite(list(losses.values()) + [norm] + [netcore.global_norm(h) for h in head_grads]):
                raise FloatingPointError(f"non-finite fake/discriminator losses {losses}")
            netcore.optimizer_step(state.fake.params, fake_grads, state.opt_fake, cfg.lr_fake)
            for head, grads, opt in zip(state.disc.heads, head_grads, state.opt_heads):
                netcore.optimizer_step(head, grads, opt, cfg.lr_heads)
    except FloatingPointError as exc:
        # parameters are untouched until every term is finite; rewind the RNG too
        state.rng.bit_generator.state = rng_snapshot
        msg = f"step {state.step}: {exc}; update skipped"
        log.warning(msg)
        state.incidents.append(msg)
        state.step += 1
        row["role"] = role
        return row
    row.update(losses)
    row["grad_norm"] = norm
    state.step += 1
    return row


def advdmd_step(state: TrainState, cfg: TrainConfig) -> tuple[TrainState, dict]:
    """Execute one scheduled unit of the full method."""
    if cfg.variant != "advdmd":
        cfg = cfg.replace(variant="advdmd")
    row = _step(state, cfg)
    state.history.append(row)
    return state, row


def baseline_step(state: TrainState, cfg: TrainConfig, variant: str) -> tuple[TrainState, dict]:
    """One unit of a baseline: ``dmd2`` (no GRPO term) or ``grpo_fixed`` (proxy reward only)."""
    if variant not in ("dmd2", "grpo_fixed"):
        raise ValueError(f"unknown baseline {variant!r}")
    if cfg.variant != variant:
        cfg = cfg.replace(variant=variant)
    row = _step(state, cfg)
    state.history.append(row)
    return state, row


def run_step(state: TrainState, cfg: TrainConfig) -> tuple[TrainState, dict]:
    if cfg.variant == "advdmd":
        return advdmd_step(state, cfg)
    return baseline_step(state, cfg, cfg.variant)


def train(
    cfg: TrainConfig,
    teacher: VelocityModel,
    state: TrainState | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    state = state or init_state(cfg, teacher)
    while state.step < cfg.total_steps:
        run_step(state, cfg)
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics_csv(state.history), encoding="utf-8")
    return state, state.history


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def sample_student(state: TrainState, cfg: TrainConfig, z: np.ndarray, c: np.ndarray, sim: str = "ode",
                   rng: np.random.Generator | None = None) -> np.ndarray:
    schedule = student_schedule(cfg)
    if sim == "ode":
        x, _ = ode_sample(state.gen, z, c, cfg.n_student_steps, 1.0, np.asarray(schedule.t_grid))
        return x
    return sample_trajectory(state.gen, z, c, schedule, rng or derive_rng(cfg.seed, "sample")).x0


def sample_teacher(teacher: VelocityModel, cfg: TrainConfig, z: np.ndarray, c: np.ndarray,
                   w_cfg: float | None = None) -> np.ndarray:
    grid = SdeSchedule.uniform(cfg.teacher_eval_steps).t_grid
    w = cfg.w_cfg if w_cfg is None else w_cfg
    x, _ = ode_sample(teacher, z, c, cfg.teacher_eval_steps, w, np.asarray(grid))
    return x


def evaluate_state(state: TrainState, cfg: TrainConfig, eval_seed: int | None = None) -> MetricReport:
    """Metrics for the student's deterministic few-step samples."""
    target = make_target(cfg)
    es = EvalSet.draw(target, cfg.eval_samples, cfg.seed if eval_seed is None else eval_seed)
    x = sample_student(state, cfg, es.gen_z, es.gen_c)
    reward = float(np.mean(advreward.d_score(state.disc, state.fake, x, SdeSchedule.uniform(1).t_grid[-1], es.gen_c)))
    return evaluate_samples(x, target, es, f"{cfg.variant}-{cfg.sim}", reward)


def evaluate_teacher(teacher: VelocityModel, cfg: TrainConfig, eval_seed: int, w_cfg: float | None = None) -> MetricReport:
    target = make_target(cfg)
    es = EvalSet.draw(target, cfg.eval_samples, eval_seed)
    x = sample_teacher(teacher, cfg, es.gen_z, es.gen_c, w_cfg)
    return evaluate_samples(x, target, es, "teacher")


# ---------------------------------------------------------------- checkpoints


def _model_echo(model: VelocityModel) -> dict:
    return {"spec": model.spec.to_dict(), "data_dim": model.data_dim, "n_conditions": model.n_conditions}


def _model_from_echo(d: dict, params: ParamSet) -> VelocityModel:
    return VelocityModel(NetSpec.from_dict(d["spec"]), params, d["data_dim"], d["n_conditions"])


def _prefixed(prefix: str, params: ParamSet) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": params[k] for k in params}


def _section(tensors: dict[str, np.ndarray], prefix: str) -> ParamSet:
    head = prefix + "/"
    return ParamSet({k[len(head):]: v for k, v in tensors.items() if k.startswith(head)})


def _opt_tensors(prefix: str, opt: OptState) -> dict[str, np.ndarray]:
    return {**_prefixed(f"{prefix}/m", opt.m), **_prefixed(f"{prefix}/v", opt.v)}


def _opt_from(tensors: dict[str, np.ndarray], prefix: str, step: int) -> OptState:
    return OptState(_section(tensors, f"{prefix}/m"), _section(tensors, f"{prefix}/v"), step)


def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str | Path) -> None:
    """Write the complete training state (all networks, optimisers, RNG) to ``path``."""
    echo = {
        "kind": "student",
        "config": cfg.to_dict(),
        "model": _model_echo(state.gen),
        "disc": {"tap_layers": list(state.disc.tap_layers), "head_spec": state.disc.head_spec.to_dict(),
                 "n_conditions": state.disc.n_conditions},
        "opt_steps": {"gen": state.opt_gen.step, "fake": state.opt_fake.step,
                      "heads": [o.step for o in state.opt_heads]},
        "gen_updates": state.gen_updates,
    }
    params = {
        **_prefixed("teacher", state.teacher.params),
        **_prefixed("gen", state.gen.params),
        **_prefixed("fake", state.fake.params),
        **_prefixed("ref", state.ref_params),
    }
    opt = {**_opt_tensors("gen", state.opt_gen), **_opt_tensors("fake", state.opt_fake)}
    for k, (head, hopt) in enumerate(zip(state.disc.heads, state.opt_heads)):
        params.update(_prefixed(f"head{k}", head))
        opt.update(_opt_tensors(f"head{k}", hopt))
    write_checkpoint(Checkpoint(echo, params, opt, state.step, state.rng.bit_generator.state), path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    """Inverse of :func:`save_checkpoint`; the metric history starts empty."""
    ck = read_checkpoint(path)
    echo = ck.echo
    if echo.get("kind") != "student":
        raise CheckpointError("wrong_kind", f"expected a student checkpoint, found {echo.get('kind')!r}")
    cfg = config_from_dict(echo["config"])
    m = echo["model"]
    d = echo["disc"]
    n_heads = len(d["tap_layers"])
    disc = advreward.Discriminator(
        tuple(d["tap_layers"]), NetSpec.from_dict(d["head_spec"]),
        [_section(ck.params, f"head{k}") for k in range(n_heads)], d["n_conditions"],
    )
    steps = echo["opt_steps"]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = ck.rng_state
    state = TrainState(
        teacher=_model_from_echo(m, _section(ck.params, "teacher")),
        gen=_model_from_echo(m, _section(ck.params, "gen")),
        fake=_model_from_echo(m, _section(ck.params, "fake")),
        disc=disc,
        opt_gen=_opt_from(ck.opt, "gen", steps["gen"]),
        opt_fake=_opt_from(ck.opt, "fake", steps["fake"]),
        opt_heads=[_opt_from(ck.opt, f"head{k}", s) for k, s in enumerate(steps["heads"])],
        ref_params=_section(ck.params, "ref"),
        rng=rng,
        step=ck.step,
        gen_updates=echo["gen_updates"],
    )
    return state, cfg


def save_teacher(teacher: VelocityModel, cfg: TrainConfig, path: str | Path) -> None:
    echo = {"kind": "teacher", "config": cfg.to_dict(), "model": _model_echo(teacher)}
    write_checkpoint(Checkpoint(echo, _prefixed("teacher", teacher.params), {}, 0, {}), path)


def load_teacher(path: str | Path) -> tuple[VelocityModel, TrainConfig]:
    ck = read_checkpoint(path)
    if ck.echo.get("kind") != "teacher":
        raise CheckpointError("wrong_kind", f"expected a teacher checkpoint, found {ck.echo.get('kind')!r}")
    return _model_from_echo(ck.echo["model"], _section(ck.params, "teacher")), config_from_dict(ck.echo["config"])
