import numpy as np
import pytest

from advdmd import grpocore, trainer
from advdmd.checkpoint import CheckpointError
from advdmd.netcore import ParamSet, scaled_sum
from advdmd.trainer import (
    FAKE_AND_DISC,
    GENERATOR,
    compose_generator_gradient,
    init_state,
    load_checkpoint,
    metrics_csv,
    run_step,
    save_checkpoint,
    train,
    update_schedule,
)


def test_schedule_cycles_five_to_one(default_config):
    roles = [update_schedule(k, default_config)[0] for k in range(12)]
    assert roles == [FAKE_AND_DISC] * 5 + [GENERATOR] + [FAKE_AND_DISC] * 5 + [GENERATOR]


def test_ratio_one_alternates(default_config):
    cfg = default_config.replace(fake_updates_per_gen=1)
    assert [update_schedule(k, cfg)[0] for k in range(4)] == [FAKE_AND_DISC, GENERATOR] * 2


def test_warmup_counts_generator_updates(default_config):
    cfg = default_config.replace(grpo_warmup_steps=100)
    gen_steps = [k for k in range(6 * 102) if update_schedule(k, cfg)[0] == GENERATOR]
    flags = [update_schedule(k, cfg)[1] for k in gen_steps]
    assert flags[:100] == [False] * 100 and flags[100:] == [True, True]


@pytest.mark.parametrize("k", [1, 7, 40])
def test_schedule_accounting(default_config, k):
    start = 13
    n_gen = sum(update_schedule(s, default_config)[0] == GENERATOR for s in range(start, start + 6 * k))
    assert n_gen == k


def test_variant_schedules(default_config):
    dmd2 = default_config.replace(variant="dmd2", grpo_warmup_steps=0)
    assert not any(update_schedule(k, dmd2)[1] for k in range(60))
    fixed = default_config.replace(variant="grpo_fixed")
    assert all(update_schedule(k, fixed) == (GENERATOR, True) for k in range(10))


def _ps(seed):
    rng = np.random.default_rng(seed)
    return ParamSet({"a": rng.standard_normal(3), "b": rng.standard_normal((2, 2))})


def test_composition_is_hand_weighted_sum():
    d, g, r = _ps(0), _ps(1), _ps(2)
    total = compose_generator_gradient(d, g, r, 0.1, 0.01)
    for k in d:
        np.testing.assert_allclose(total[k], 0.1 * d[k] + 0.01 * g[k] + r[k], rtol=1e-15)
    only_grpo = compose_generator_gradient(d, g, r, 0.0, 0.0)
    assert only_grpo.equal(scaled_sum([(0.0, d), (0.0, g), (1.0, r)]))
    dmd_only = compose_generator_gradient(d, g, None, 0.1, 0.0)
    for k in d:
        np.testing.assert_allclose(dmd_only[k], 0.1 * d[k])
    bad = _ps(3)
    bad["a"][0] = np.inf
    with pytest.raises(FloatingPointError):
        compose_generator_gradient(bad, None, None, 1.0, 0.0)


def test_log_shows_grpo_only_after_warmup(tiny_config, small_teacher):
    cfg = tiny_config.replace(grpo_warmup_steps=2, total_steps=24)
    state, rows = train(cfg, small_teacher)
    gen_rows = [r for r in rows if r["role"] == GENERATOR]
    assert len(gen_rows) == 4
    for r in gen_rows[:2]:
        assert "L_grpo" not in r and "L_dmd" in r and "L_gan" in r
    for r in gen_rows[2:]:
        assert np.isfinite(r["L_grpo"]) and "L_dmd" in r
    fake_rows = [r for r in rows if r["role"] == FAKE_AND_DISC]
    assert all(np.isfinite(r["L_diff"]) and np.isfinite(r["L_dis"]) for r in fake_rows)


def test_dmd2_never_calls_grpo(monkeypatch, tiny_config, small_teacher):
    def boom(*a, **kw):
        raise AssertionError("grpo_loss called")

    monkeypatch.setattr(grpocore, "grpo_loss", boom)
    train(tiny_config.replace(variant="dmd2"), small_teacher)


def test_grpo_fixed_leaves_fake_and_heads_alone(tiny_config, small_teacher):
    cfg = tiny_config.replace(variant="grpo_fixed", total_steps=4)
    state = init_state(cfg, small_teacher)
    fake, heads, gen = state.fake.params.copy(), [h.copy() for h in state.disc.heads], state.gen.params.copy()
    train(cfg, small_teacher, state)
    assert state.fake.params.equal(fake)
    assert all(h.equal(h0) for h, h0 in zip(state.disc.heads, heads))
    assert not state.gen.params.equal(gen)
    assert all(r["role"] == GENERATOR and "L_dmd" not in r for r in state.history)


def test_teacher_is_never_modified(tiny_config, small_teacher):
    before = small_teacher.params.copy()
    state, _ = train(tiny_config, small_teacher)
    assert small_teacher.params.equal(before) and state.teacher.params.equal(before)


def test_dmd_states_are_the_group_states(monkeypatch, tiny_config, small_teacher):
    cfg = tiny_config.replace(grpo_warmup_steps=0, total_steps=6)
    seen = {}
    real = trainer.compute_generator_update

    def spy(state, cfg, grpo_on):
        upd = real(state, cfg, grpo_on)
        seen["upd"] = upd
        return upd

    monkeypatch.setattr(trainer, "compute_generator_update", spy)
    train(cfg, small_teacher)
    ro = seen["upd"].rollout
    stored = ro.traj.states_entering()[np.arange(len(ro.picks)), ro.picks]
    assert np.array_equal(ro.picked_states, stored)


def test_all_three_variants_run_from_one_config(tiny_config, small_teacher):
    for variant in ("advdmd", "dmd2", "grpo_fixed"):
        state, rows = train(tiny_config.replace(variant=variant), small_teacher)
        assert state.step == tiny_config.total_steps and not state.incidents


def test_metrics_csv_is_deterministic(tiny_config, small_teacher):
    a = metrics_csv(train(tiny_config, small_teacher)[1])
    b = metrics_csv(train(tiny_config, small_teacher)[1])
    assert a == b
    header = a.splitlines()[0]
    assert header == "step,role,L_dmd,L_gan,L_grpo,L_diff,L_dis,mean_reward,grad_norm"
    first_fake = a.splitlines()[1].split(",")
    assert first_fake[1] == FAKE_AND_DISC and first_fake[2] == ""


def test_non_finite_update_is_skipped(monkeypatch, tiny_config, small_teacher):
    cfg = tiny_config.replace(total_steps=6)
    state = init_state(cfg, small_teacher)
    real = trainer.compute_fake_disc_update

    def poisoned(state, cfg):
        losses, fg, hg = real(state, cfg)
        return {**losses, "L_diff": float("nan")}, fg, hg

    monkeypatch.setattr(trainer, "compute_fake_disc_update", poisoned)
    fake = state.fake.params.copy()
    rng_state = state.rng.bit_generator.state
    run_step(state, cfg)
    assert state.fake.params.equal(fake) and len(state.incidents) == 1
    assert state.rng.bit_generator.state == rng_state and state.step == 1


def test_checkpoint_roundtrip_reproduces_outputs(tmp_path, tiny_config, small_teacher):
    state, _ = train(tiny_config, small_teacher)
    path = tmp_path / "s.ckpt"
    save_checkpoint(state, tiny_config, path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == tiny_config and loaded.step == state.step
    probe = np.random.default_rng(0).standard_normal((32, 2))
    c = np.arange(32) % 8
    for a, b in ((state.gen, loaded.gen), (state.fake, loaded.fake), (state.teacher, loaded.teacher)):
        assert np.array_equal(a.velocity(probe, 0.37, c), b.velocity(probe, 0.37, c))
    # resuming continues the identical run
    for _ in range(6):
        run_step(state, tiny_config)
        run_step(loaded, cfg)
    assert metrics_csv(state.history[-6:]) == metrics_csv(loaded.history)


def test_checkpoint_errors(tmp_path, tiny_config, small_teacher):
    state = init_state(tiny_config, small_teacher)
    path = tmp_path / "s.ckpt"
    save_checkpoint(state, tiny_config, path)
    raw = path.read_bytes()
    cases = {"bad_magic": b"XDMD" + raw[4:], "unsupported_version": raw[:4] + bytes([2]) + raw[5:],
             "truncated": raw[:-7]}
    for code, data in cases.items():
        bad = tmp_path / f"{code}.ckpt"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(bad)
        assert info.value.code == code
    trainer.save_teacher(small_teacher, tiny_config, tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    teacher, _ = trainer.load_teacher(tmp_path / "t.ckpt")
    assert teacher.params.equal(small_teacher.params)


def test_full_run_has_finite_losses(default_config, teacher):
    cfg = default_config.replace(total_steps=3000)
    state, rows = train(cfg, teacher)
    assert len(rows) == 3000 and not state.incidents
    for r in rows:
        for k in ("L_dmd", "L_gan", "L_grpo", "L_diff", "L_dis", "grad_norm"):
            if k in r:
                assert np.isfinite(r[k]), (r["step"], k)
