"""Sample-quality metrics, proxy rewards and the variant x seed ablation harness."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .flowmatch import MixtureTarget, sample_conditions, sample_target
from .seeding import derive_rng

BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0)
EXACT_W2_LIMIT = 512
SLICED_PROJECTIONS = 128
ABLATION_FIELDS = ("variant", "seed", "steps", "mmd2", "w2", "coverage", "mean_reward", "runtime_s")


def median_bandwidths(points: np.ndarray, scales=BANDWIDTH_SCALES) -> tuple[float, ...]:
    d = cdist(points, points)
    med = float(np.median(d[np.triu_indices(len(points), k=1)])) if len(points) > 1 else 1.0
    med = med if med > 0 else 1.0
    return tuple(s * med for s in scales)


def mmd2(X: np.ndarray, Y: np.ndarray, bandwidths=None) -> float:
    """Biased (V-statistic) squared MMD with a sum of RBF kernels.

    Without explicit ``bandwidths`` the median heuristic on the pooled sample
    is scaled by 0.25, 0.5, 1 and 2.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("mmd2 needs non-empty sample sets")
    if bandwidths is None:
        bandwidths = median_bandwidths(np.vstack([X, Y]))
    dxx = cdist(X, X, "sqeuclidean")
    dyy = cdist(Y, Y, "sqeuclidean")
    dxy = cdist(X, Y, "sqeuclidean")
    total = 0.0
    for bw in bandwidths:
        s = 2.0 * bw * bw
        total += np.exp(-dxx / s).mean() + np.exp(-dyy / s).mean() - 2.0 * np.exp(-dxy / s).mean()
    return max(float(total), 0.0)


def wasserstein2(X: np.ndarray, Y: np.ndarray, seed: int = 0, exact: bool | None = None) -> float:
    """2-Wasserstein distance between two equal-weight point clouds.

    Sets of at most 512 points are matched exactly (Hungarian assignment on
    squared distances); larger sets use a sliced estimate with 128 seeded
    random directions.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if exact is None:
        exact = len(X) <= EXACT_W2_LIMIT and len(Y) <= EXACT_W2_LIMIT
    if exact:
        if len(X) != len(Y):
            raise ValueError(f"exact W2 needs equal set sizes, got {len(X)} and {len(Y)}")
        cost = cdist(X, Y, "sqeuclidean")
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean()))
    return sliced_wasserstein2(X, Y, SLICED_PROJECTIONS, seed)


def sliced_wasserstein2(X: np.ndarray, Y: np.ndarray, n_proj: int = SLICED_PROJECTIONS, seed: int = 0) -> float:
    """Sliced W2, rescaled by the dimension so it estimates W2 for isotropic shifts."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, X.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    qs = np.linspace(0.0, 1.0, max(len(X), len(Y)))
    total = 0.0
    for u in dirs:
        px = np.quantile(X @ u, qs)
        py = np.quantile(Y @ u, qs)
        total += np.mean((px - py) ** 2)
    return float(np.sqrt(X.shape[1] * total / n_proj))


def mode_coverage(X: np.ndarray, target: MixtureTarget, radius: float, min_count: int = 5) -> float:
    if radius <= 0:
        raise ValueError("radius must be positive")
    X = np.asarray(X, dtype=np.float64).reshape(-1, target.data_dim)
    if len(X) == 0:
        return 0.0
    counts = (cdist(target.means, X) <= radius).sum(axis=1)
    return float(np.mean(counts >= min_count))


@dataclass(frozen=True)
class ProxyReward:
    """Fixed reward with values in (0, 1].

    ``mode_pull`` rewards closeness to ``center`` as ``exp(-|x - center|^2 / tau)``;
    ``norm_penalty`` rewards small norms as ``exp(-|x|^2 / tau)``.
    """

    kind: str
    center: tuple[float, ...] = (0.0, 0.0)
    tau: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("mode_pull", "norm_penalty"):
            raise ValueError(f"unknown proxy kind {self.kind!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ref = np.asarray(self.center) if self.kind == "mode_pull" else np.zeros(x.shape[-1])
        return np.exp(-np.sum((x - ref) ** 2, axis=-1) / self.tau)


def proxy_reward_table(proxy: ProxyReward, traj) -> np.ndarray:
    """Proxy reward of the state each step lands on; same layout as the discriminator table."""
    return np.stack([proxy(s.x_to) for s in traj.steps], axis=1)


@dataclass
class MetricReport:
    mmd2: float
    w2: float
    mode_coverage: float
    mean_reward: float
    n_samples: int
    seed: int
    variant: str


@dataclass
class EvalSet:
    """Reference draw shared by every model evaluated at one seed.

    Generated samples use the same condition labels and initial noise across
    models (common random numbers), so differences between models are not
    masked by independent sampling noise.
    """

    target_x: np.ndarray
    gen_c: np.ndarray
    gen_z: np.ndarray
    bandwidths: tuple[float, ...]
    seed: int

    @classmethod
    def draw(cls, target: MixtureTarget, n: int, seed: int) -> "EvalSet":
        rng = derive_rng(seed, "eval")
        x, _ = sample_target(target, n, rng)
        c = sample_conditions(target, n, rng)
        z = rng.standard_normal((n, target.data_dim))
        return cls(x, c, z, median_bandwidths(x), seed)


def coverage_radius(target: MixtureTarget) -> float:
    return 3.0 * target.std


def evaluate_samples(
    samples: np.ndarray,
    target: MixtureTarget,
    eval_set: EvalSet,
    variant: str,
    mean_reward: float = float("nan"),
) -> MetricReport:
    return MetricReport(
        mmd2=mmd2(samples, eval_set.target_x, eval_set.bandwidths),
        w2=wasserstein2(samples, eval_set.target_x, seed=eval_set.seed),
        mode_coverage=mode_coverage(samples, target, coverage_radius(target), 5),
        mean_reward=mean_reward,
        n_samples=len(samples),
        seed=eval_set.seed,
        variant=variant,
    )


def calibration_band(target: MixtureTarget, n: int, n_resamples: int = 20, seed: int = 0) -> tuple[float, float, float]:
    """Target-vs-target MMD^2 over fresh resamples: ``(mean, std, mean + 3 std)``."""
    vals = []
    for i in range(n_resamples):
        rng = derive_rng(seed, "calibration", i)
        a, _ = sample_target(target, n, rng)
        b, _ = sample_target(target, n, rng)
        vals.append(mmd2(a, b, median_bandwidths(b)))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std()), float(vals.mean() + 3.0 * vals.std())


def default_matrix() -> list[tuple[str, str]]:
    return [(sim, variant) for sim in ("ode", "sde") for variant in ("dmd2", "advdmd")]


def run_ablation(
    base_config,
    teacher,
    seeds,
    matrix: list[tuple[str, str]] | None = None,
    out_path: str | Path | None = None,
) -> list[dict]:
    """Train and evaluate every ``(sim, variant)`` cell for every seed.

    A failing cell is recorded with ``nan`` metrics and an ``error`` entry; the
    remaining cells still run. Rows are written to ``out_path`` as CSV.
    """
    from .trainer import evaluate_state, train

    matrix = matrix or default_matrix()
    rows = []
    for sim, variant in matrix:
        for seed in seeds:
            cfg = base_config.replace(sim=sim, variant=variant, seed=int(seed))
            t0 = time.perf_counter()
            row = {"variant": f"{variant}-{sim}", "seed": int(seed), "steps": cfg.total_steps}
            try:
                state, _ = train(cfg, teacher)
                report = evaluate_state(state, cfg)
                row.update(mmd2=report.mmd2, w2=report.w2, coverage=report.mode_coverage,
                           mean_reward=report.mean_reward)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                row.update(mmd2=float("nan"), w2=float("nan"), coverage=float("nan"),
                           mean_reward=float("nan"), error=repr(exc))
            row["runtime_s"] = time.perf_counter() - t0
            rows.append(row)
    if out_path is not None:
        write_ablation_csv(rows, out_path)
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ABLATION_FIELDS})


def median_summary(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Median of each metric over seeds, per variant."""
    out: dict[str, dict[str, float]] = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == variant]
        out[variant] = {k: float(np.median([r[k] for r in sel])) for k in ("mmd2", "w2", "coverage", "mean_reward")}
    return out


def report_dict(report: MetricReport) -> dict:
    return asdict(report)
