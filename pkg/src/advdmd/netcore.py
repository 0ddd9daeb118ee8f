"""Small feed-forward networks with exact reverse-mode gradients and Adam.

Every model in the package (velocity fields, fake model, discriminator heads)
is a plain MLP stored as a :class:`ParamSet`. Weights are laid out ``(in, out)``
so a batch ``x`` of shape ``(B, in)`` maps through ``x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

ACTIVATIONS = ("tanh", "silu", "identity")


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return _silu(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return np.ones_like(z)


@dataclass(frozen=True)
class NetSpec:
    """Layer widths ``(in, hidden..., out)`` and the hidden-layer activation.

    The output layer is always affine.
    """

    layer_dims: tuple[int, ...]
    activation: str = "silu"

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ValueError(f"NetSpec needs at least one hidden layer, got dims {dims}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetSpec":
        return cls(tuple(d["layer_dims"]), d["activation"])


class ParamSet:
    """Ordered, named collection of float64 arrays.

    ``version`` is bumped by every in-place update so a :class:`ForwardTrace`
    can detect that it was recorded against stale parameters.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        self.version = 0
        for name, arr in (entries or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._data.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._data.items()})

    def assign(self, other: "ParamSet") -> None:
        """Copy values from ``other`` in place (same names and shapes)."""
        self._check_aligned(other)
        for k, v in other.items():
            self._data[k][...] = v
        self.version += 1

    def n_values(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._data.values()])

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def _check_aligned(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ValueError(f"parameter names differ: {self.names()} vs {other.names()}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {self[k].shape} vs {other[k].shape}")


def scaled_sum(parts: list[tuple[float, ParamSet]]) -> ParamSet:
    """Return ``sum(w * p)`` over aligned ParamSets in a fixed order."""
    if not parts:
        raise ValueError("scaled_sum needs at least one term")
    out = parts[0][1].zeros_like()
    for w, p in parts:
        out._check_aligned(p)
        for k in out:
            out[k][...] += w * p[k]
    return out


def global_norm(grads: ParamSet) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items())))


def init_params(spec: NetSpec, rng: np.random.Generator, zero_last: bool = False) -> ParamSet:
    """Uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    params = ParamSet()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        if zero_last and i == spec.n_layers - 1:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
        params.add(f"W{i}", w)
        params.add(f"b{i}", b)
    return params


@dataclass
class ForwardTrace:
    """Everything the backward pass needs.

    ``pre[i]`` and ``acts[i]`` hold the pre-activation and the activation of
    layer ``i``; for the final (affine) layer both are the network output.
    """

    spec: NetSpec
    inputs: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    params_id: int
    params_version: int

    def hidden(self, i: int) -> np.ndarray:
        if not 0 <= i < self.spec.n_hidden:
            raise IndexError(f"hidden layer {i} out of range for {self.spec.n_hidden} hidden layers")
        return self.acts[i]

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def _check_params(spec: NetSpec, params: ParamSet) -> None:
    for i in range(spec.n_layers):
        w, b = params[f"W{i}"], params[f"b{i}"]
        want = (spec.layer_dims[i], spec.layer_dims[i + 1])
        if w.shape != want or b.shape != (want[1],):
            raise ValueError(f"layer {i} parameters have shapes {w.shape}/{b.shape}, expected {want}/({want[1]},)")


def forward(spec: NetSpec, params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"input has shape {x.shape}, expected (batch, {spec.in_dim})")
    _check_params(spec, params)
    pre, acts = [], []
    h = x
    for i in range(spec.n_layers):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        h = z if i == spec.n_layers - 1 else _activate(spec.activation, z)
        pre.append(z)
        acts.append(h)
    trace = ForwardTrace(spec, x, pre, acts, id(params), params.version)
    return h, trace


def backward(
    spec: NetSpec,
    params: ParamSet,
    trace: ForwardTrace,
    out_cotangent: np.ndarray | None,
    hidden_cotangents: Mapping[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, ParamSet]:
    """Reverse-mode pass for ``<out_cotangent, out> + sum_i <hc[i], hidden(i)>``.

    ``hidden_cotangents`` injects cotangents on hidden activations, which is how
    discriminator heads fed from tapped features push gradients into the
    backbone. Pass ``out_cotangent=None`` when only taps contribute.
    """
    if trace.spec != spec or trace.params_id != id(params) or trace.params_version != params.version:
        raise ValueError("trace does not match these parameters (stale or foreign forward pass)")
    batch = trace.inputs.shape[0]
    if out_cotangent is None:
        g = np.zeros((batch, spec.out_dim))
    else:
        g = np.asarray(out_cotangent, dtype=np.float64)
        if g.shape != (batch, spec.out_dim):
            raise ValueError(f"output cotangent has shape {g.shape}, expected {(batch, spec.out_dim)}")
    hidden_cotangents = hidden_cotangents or {}
    for i in hidden_cotangents:
        if not 0 <= i < spec.n_hidden:
            raise IndexError(f"hidden cotangent index {i} out of range")
    grads = ParamSet()
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            if i in hidden_cotangents:
                g = g + hidden_cotangents[i]
            g = g * _activation_grad(spec.activation, trace.pre[i], trace.acts[i])
        h_in = trace.inputs if i == 0 else trace.acts[i - 1]
        layer_grads.append((h_in.T @ g, g.sum(axis=0)))
        g = g @ params[f"W{i}"].T
    for i in range(spec.n_layers):
        gw, gb = layer_grads[spec.n_layers - 1 - i]
        grads.add(f"W{i}", gw)
        grads.add(f"b{i}", gb)
    return g, grads


@dataclass
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptState:
    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "OptState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "OptState":
        return OptState(self.m.copy(), self.v.copy(), self.step)


def optimizer_step(
    params: ParamSet,
    grads: ParamSet,
    state: OptState,
    lr: float,
    hyper: AdamHyper | None = None,
) -> tuple[ParamSet, OptState]:
    """One Adam update, applied in place; returns ``(params, state)``."""
    hyper = hyper or AdamHyper()
    params._check_aligned(grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - hyper.beta1**state.step
    bc2 = 1.0 - hyper.beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        params[name][...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
    params.version += 1
    return params, state


def finite_difference_grads(f: Callable[[], float], params: ParamSet, h: float) -> ParamSet:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``params``."""
    out = params.zeros_like()
    for name, arr in params.items():
        flat = arr.reshape(-1)
        g = out[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f()
            flat[j] = orig - h
            fm = f()
            flat[j] = orig
            g[j] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(analytic: ParamSet, numeric: ParamSet) -> float:
    """Largest per-tensor ``max|a - n| / max(max|a|, max|n|)``.

    Normalising per tensor keeps near-zero entries from dominating; two
    all-zero tensors count as exact agreement.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
        diff = float(np.max(np.abs(a - n)))
        if scale == 0.0:
            continue
        worst = max(worst, diff / scale)
    return worst


def grad_check(
    spec: NetSpec,
    params: ParamSet,
    x: np.ndarray,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between ``backward`` and central differences.

    The scalar probed is ``<g, forward(x)>`` for a fixed random cotangent ``g``.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    g = np.random.default_rng(seed).standard_normal((np.asarray(x).shape[0], spec.out_dim))
    _, trace = forward(spec, params, x)
    _, analytic = backward(spec, params, trace, g)

    def f() -> float:
        return float(np.sum(g * forward(spec, params, x)[0]))

    numeric = finite_difference_grads(f, params, h)
    return max_relative_error(analytic, numeric)
