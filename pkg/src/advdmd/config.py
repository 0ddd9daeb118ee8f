"""Training configuration with strict JSON loading.

Each field carries an ``origin`` tag in its metadata: ``"reported"`` for values
taken from the published large-scale setup, ``"chosen"`` for desk-scale
choices. Published learning rates (generator 5e-6, fake model 1e-6, heads
1e-4) target billion-parameter backbones and are not used as defaults here.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

VARIANTS = ("advdmd", "dmd2", "grpo_fixed")
SIM_MODES = ("sde", "ode")
REWARD_MODES = ("prob", "logit")


class ConfigError(ValueError):
    pass


def _f(default, origin: str = "chosen", **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda d=default: type(d)(d), metadata={"origin": origin, **kw})
    return field(default=default, metadata={"origin": origin, **kw})


@dataclass
class TrainConfig:
    # generator objective weights
    alpha: float = _f(0.1, "reported")
    gamma: float = _f(0.01, "reported")
    # GRPO
    beta: float = _f(10.0)  # KL to the initial student
    baseline_beta: float = _f(0.0)  # KL weight for grpo_fixed
    eps_clip: float = _f(0.2)
    eta: float = _f(0.3)
    sigma_cap: float = _f(1.0)
    group_size: int = _f(8)  # 32 in the published setup
    n_groups: int = _f(8)
    grpo_warmup_steps: int = _f(20)
    reward_mode: str = _f("prob")
    # schedule
    n_student_steps: int = _f(4)
    fake_updates_per_gen: int = _f(5, "reported")
    total_steps: int = _f(1800)
    fake_batch: int = _f(64)
    # optimisation
    lr_gen: float = _f(1e-4)
    lr_fake: float = _f(1e-3)
    lr_heads: float = _f(1e-3)
    # distribution matching
    w_cfg: float = _f(1.0)  # 3.5 in the published setup
    dmd_normalize: bool = _f(True)
    dmd_t_min: float = _f(0.02)
    dmd_t_max: float = _f(0.98)
    # discriminator
    head_hidden: int = _f(32)
    # run
    seed: int = _f(0)
    variant: str = _f("advdmd")
    sim: str = _f("sde")
    # proxy reward for the fixed-reward baseline
    proxy_kind: str = _f("mode_pull")
    proxy_mode: int = _f(0)
    proxy_tau: float = _f(2.0)
    # target mixture
    n_modes: int = _f(8)
    ring_radius: float = _f(2.0)
    mode_std: float = _f(0.15)
    # teacher
    teacher_hidden: list = _f([128, 128, 128])
    teacher_steps: int = _f(3000)
    teacher_batch: int = _f(512)
    teacher_lr: float = _f(1e-3)
    cond_dropout: float = _f(0.1)
    teacher_eval_steps: int = _f(50)
    # evaluation
    eval_samples: int = _f(2048)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        nonneg = ("alpha", "gamma", "beta", "baseline_beta", "eta", "w_cfg", "lr_gen", "lr_fake", "lr_heads", "cond_dropout")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        positive_int = (
            "group_size", "n_groups", "n_student_steps", "fake_updates_per_gen", "total_steps",
            "fake_batch", "head_hidden", "n_modes", "teacher_steps", "teacher_batch",
            "teacher_eval_steps", "eval_samples",
        )
        for name in positive_int:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.grpo_warmup_steps < 0:
            raise ConfigError("grpo_warmup_steps must be >= 0")
        if self.group_size < 2:
            raise ConfigError("group_size must be at least 2")
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError("eps_clip must lie in (0, 1)")
        if self.sigma_cap <= 0 or self.mode_std <= 0 or self.ring_radius <= 0 or self.proxy_tau <= 0:
            raise ConfigError("sigma_cap, mode_std, ring_radius and proxy_tau must be positive")
        if not 0.0 <= self.dmd_t_min <= self.dmd_t_max <= 1.0:
            raise ConfigError("need 0 <= dmd_t_min <= dmd_t_max <= 1")
        if self.cond_dropout > 1.0:
            raise ConfigError("cond_dropout must be <= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sim not in SIM_MODES:
            raise ConfigError(f"sim must be one of {SIM_MODES}, got {self.sim!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if self.proxy_kind not in ("mode_pull", "norm_penalty"):
            raise ConfigError(f"unknown proxy_kind {self.proxy_kind!r}")
        if not 0 <= self.proxy_mode < self.n_modes:
            raise ConfigError("proxy_mode must index a mixture component")
        if not self.teacher_hidden or any(int(h) < 1 for h in self.teacher_hidden):
            raise ConfigError("teacher_hidden must be a non-empty list of positive widths")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return config_from_dict(d)

    @classmethod
    def origins(cls) -> dict[str, str]:
        return {f.name: f.metadata.get("origin", "chosen") for f in fields(cls)}


def config_from_dict(d: dict) -> TrainConfig:
    """Build a config from a partial mapping; missing keys take their defaults."""
    defaults = TrainConfig().to_dict()
    unknown = sorted(set(d) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        expected = type(defaults[name])
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if expected is float and not isinstance(value, float):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        if expected in (int, bool, str, list) and (
            not isinstance(value, expected) or (expected is int and isinstance(value, bool))
        ):
            raise ConfigError(f"{name} must be of type {expected.__name__}, got {value!r}")
        kwargs[name] = value
    return TrainConfig(**kwargs)


def load_config(path: str | Path) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(data)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
