import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advdmd import evalbench
from advdmd.evalbench import (
    ABLATION_FIELDS,
    EvalSet,
    ProxyReward,
    calibration_band,
    median_bandwidths,
    median_summary,
    mmd2,
    mode_coverage,
    run_ablation,
    sliced_wasserstein2,
    wasserstein2,
)
from advdmd.trainer import evaluate_teacher

points = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-5, 5))


def test_mmd_identical_sets_is_zero():
    x = np.random.default_rng(0).standard_normal((50, 2))
    assert mmd2(x, x.copy()) == 0.0


def test_mmd_singletons_closed_form():
    d, s = 1.3, 0.7
    val = mmd2(np.array([[0.0, 0.0]]), np.array([[d, 0.0]]), bandwidths=(s,))
    assert val == pytest.approx(2 * (1 - np.exp(-d * d / (2 * s * s))), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(points, points)
def test_mmd_symmetric_and_nonnegative(x, y):
    a, b = mmd2(x, y, (0.5, 1.0)), mmd2(y, x, (0.5, 1.0))
    assert a >= 0 and a == pytest.approx(b, abs=1e-12)


def test_mmd_separated_clouds_score_higher():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((200, 2))
    near = rng.standard_normal((200, 2)) + 0.1
    far = rng.standard_normal((200, 2)) + 3.0
    bw = median_bandwidths(x)
    assert mmd2(x, far, bw) > mmd2(x, near, bw)


def test_mmd_rejects_empty():
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 2)), np.zeros((3, 2)))


def test_w2_basic_cases():
    x = np.random.default_rng(0).standard_normal((30, 2))
    assert wasserstein2(x, x[::-1]) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein2(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        wasserstein2(x, x[:10])


def test_w2_exact_against_brute_force():
    from itertools import permutations

    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    best = min(np.mean(np.sum((x - y[list(p)]) ** 2, axis=1)) for p in permutations(range(6)))
    assert wasserstein2(x, y) == pytest.approx(np.sqrt(best), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_w2_symmetry_and_triangle(seed):
    rng = np.random.default_rng(seed)
    x, y, z = (rng.standard_normal((20, 2)) + rng.uniform(-2, 2, 2) for _ in range(3))
    assert wasserstein2(x, y) == pytest.approx(wasserstein2(y, x), rel=1e-10)
    assert wasserstein2(x, z) <= wasserstein2(x, y) + wasserstein2(y, z) + 1e-10


def test_sliced_agrees_with_exact_on_256_points():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((256, 2))
    # translated and dilated copies: the identity coupling is optimal, so the
    # exact value is |shift| and 0.5 * rms(x) respectively
    shift = np.array([0.6, -0.8])
    assert wasserstein2(x, x + shift) == pytest.approx(1.0, rel=1e-9)
    assert wasserstein2(x, 1.5 * x) == pytest.approx(0.5 * np.sqrt(np.mean(np.sum(x * x, axis=1))), rel=1e-9)
    fixtures = [(x, x + shift), (x, 1.5 * x)]
    for s in (1.0, 2.0):
        fixtures.append((rng.standard_normal((256, 2)), rng.standard_normal((256, 2)) + s / np.sqrt(2)))
    for a, b in fixtures:
        exact = wasserstein2(a, b)
        sliced = sliced_wasserstein2(a, b, 128, seed=0)
        assert abs(sliced - exact) / exact < 0.10


def test_large_sets_use_sliced_estimate():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((600, 2)), rng.standard_normal((600, 2)) + 1.0
    assert wasserstein2(x, y, seed=5) == sliced_wasserstein2(x, y, 128, seed=5)


def test_coverage_examples(ring):
    assert mode_coverage(ring.means, ring, 0.1, min_count=1) == 1.0
    assert mode_coverage(np.repeat(ring.means[:1], 10, axis=0), ring, 0.45) == 0.125
    assert mode_coverage(np.zeros((0, 2)), ring, 0.45) == 0.0
    with pytest.raises(ValueError):
        mode_coverage(ring.means, ring, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_coverage_monotone_in_radius(r, extra, seed):
    ring = evalbench.MixtureTarget.ring()
    x = np.random.default_rng(seed).uniform(-2.5, 2.5, (100, 2))
    assert mode_coverage(x, ring, r + extra, 3) >= mode_coverage(x, ring, r, 3)


def test_proxy_reward():
    p = ProxyReward("mode_pull", (2.0, 0.0), 2.0)
    assert p(np.array([[2.0, 0.0]]))[0] == 1.0
    d = np.linspace(0, 3, 10)
    vals = p(np.stack([2.0 + d, np.zeros_like(d)], axis=1))
    assert np.all(np.diff(vals) < 0) and np.all(vals > 0)
    q = ProxyReward("norm_penalty", tau=1.0)
    assert q(np.array([[0.0, 0.0]]))[0] == 1.0
    with pytest.raises(ValueError):
        ProxyReward("aesthetic")


def test_eval_set_is_shared_and_seeded(ring):
    a, b = EvalSet.draw(ring, 100, 3), EvalSet.draw(ring, 100, 3)
    assert np.array_equal(a.target_x, b.target_x) and np.array_equal(a.gen_z, b.gen_z)
    assert not np.array_equal(a.gen_z, EvalSet.draw(ring, 100, 4).gen_z)


def test_calibration_band_is_positive(ring):
    mean, std, band = calibration_band(ring, 256, n_resamples=5, seed=0)
    assert mean > 0 and std >= 0 and band == pytest.approx(mean + 3 * std)


def test_teacher_covers_the_ring(teacher, default_config):
    report = evaluate_teacher(teacher, default_config, eval_seed=0, w_cfg=1.0)
    assert report.mode_coverage >= 7 / 8


def test_ablation_counts_rows_and_is_repeatable(tmp_path, tiny_config, small_teacher):
    cfg = tiny_config.replace(total_steps=6)
    rows = run_ablation(cfg, small_teacher, range(5), out_path=tmp_path / "a.csv")
    assert len(rows) == 20
    with open(tmp_path / "a.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 20 and tuple(table[0]) == ABLATION_FIELDS
    again = run_ablation(cfg, small_teacher, [3], matrix=[("sde", "advdmd")])
    first = [r for r in rows if r["variant"] == "advdmd-sde" and r["seed"] == 3][0]
    assert {k: again[0][k] for k in ("mmd2", "w2", "coverage")} == {k: first[k] for k in ("mmd2", "w2", "coverage")}
    summary = median_summary(rows)
    assert set(summary) == {"dmd2-ode", "advdmd-ode", "dmd2-sde", "advdmd-sde"}


def test_ablation_records_failed_cells(monkeypatch, tiny_config, small_teacher):
    from advdmd import trainer

    real_train = trainer.train

    def flaky(cfg, teacher, *a, **kw):
        if cfg.variant == "dmd2" and cfg.seed == 1:
            raise FloatingPointError("diverged")
        return real_train(cfg, teacher, *a, **kw)

    monkeypatch.setattr(trainer, "train", flaky)
    rows = run_ablation(tiny_config.replace(total_steps=6), small_teacher, [0, 1], matrix=[("ode", "dmd2")])
    assert len(rows) == 2
    assert "error" in rows[1] and np.isnan(rows[1]["mmd2"])
    assert "error" not in rows[0] and np.isfinite(rows[0]["mmd2"])
