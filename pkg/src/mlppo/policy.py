"""Policy + value network: tanh MLP trunk, two linear heads, diagonal
Gaussian action distribution with a state-independent log standard
deviation.

The action mean is squashed into [0.001, 1] with a scaled sigmoid so
gradients stay alive at the bounds; sampled actions are clamped to the
same box on the environment side while log densities are evaluated at the
pre-clamp point. Gradients are exact reverse-mode through the autodiff
tape; updates use bias-corrected Adam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, NumericError, UsageError

__all__ = [
    "MlpParams",
    "GaussianPolicyOutput",
    "ActionSample",
    "AdamState",
    "forward",
    "forward_graph",
    "param_vars",
    "sample_action",
    "action_log_prob",
    "entropy",
    "adam_update",
    "save_checkpoint",
    "load_checkpoint",
]

ACTION_LOW = 0.001
ACTION_HIGH = 1.0
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG2PI = float(np.log(2.0 * np.pi))


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    # C-contiguous so serialization round trips preserve BLAS call paths
    # (and therefore forward outputs) bit for bit.
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


@dataclass
class MlpParams:
    """All learnable arrays, keyed for optimizer state and serialization."""

    obs_dim: int
    n_actions: int
    hidden: tuple[int, ...]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        obs_dim: int,
        n_actions: int,
        hidden: tuple[int, ...],
        rng: np.random.Generator,
        log_std_init: float = float(np.log(0.5)),
    ) -> "MlpParams":
        """Orthogonal-style init: gain sqrt(2) in the trunk, 0.01 at the heads."""
        if obs_dim < 1 or n_actions < 1 or any(h < 1 for h in hidden):
            raise ConfigError("network sizes must be positive")
        arrays: dict[str, np.ndarray] = {}
        widths = [obs_dim, *hidden]
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            arrays[f"w{i}"] = _orthogonal(rng, n_in, n_out, np.sqrt(2.0))
            arrays[f"b{i}"] = np.zeros(n_out)
        trunk_out = widths[-1]
        arrays["w_mean"] = _orthogonal(rng, trunk_out, n_actions, 0.01)
        arrays["b_mean"] = np.zeros(n_actions)
        arrays["w_value"] = _orthogonal(rng, trunk_out, 1, 0.01)
        arrays["b_value"] = np.zeros(1)
        arrays["log_std"] = np.full(n_actions, log_std_init)
        return cls(obs_dim, n_actions, tuple(hidden), arrays)

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.obs_dim, self.n_actions, self.hidden, {k: v.copy() for k, v in self.arrays.items()}
        )

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def set_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_parameters,):
            raise ConfigError("parameter vector has wrong length")
        at = 0
        for k in sorted(self.arrays):
            a = self.arrays[k]
            self.arrays[k] = vec[at : at + a.size].reshape(a.shape).copy()
            at += a.size


@dataclass(frozen=True)
class GaussianPolicyOutput:
    mean: np.ndarray
    std: np.ndarray
    value: float | np.ndarray


@dataclass(frozen=True)
class ActionSample:
    action: np.ndarray
    raw: np.ndarray
    log_prob: float


def param_vars(params: MlpParams) -> dict[str, Var]:
    """Fresh leaf Vars over the parameter arrays (one tape per update)."""
    return {k: Var(v) for k, v in params.arrays.items()}


def forward_graph(pvars: dict[str, Var], obs: np.ndarray) -> tuple[Var, Var, Var]:
    """Batched network graph: obs (B, d) -> mean (B, n_a), std (n_a,), value (B,)."""
    h: Var = Var(np.atleast_2d(np.asarray(obs, dtype=float)))
    i = 0
    while f"w{i}" in pvars:
        h = ad.tanh(h @ pvars[f"w{i}"] + pvars[f"b{i}"])
        i += 1
    mean_raw = h @ pvars["w_mean"] + pvars["b_mean"]
    mean = ad.sigmoid(mean_raw) * (ACTION_HIGH - ACTION_LOW) + ACTION_LOW
    value = ad.vsum(h @ pvars["w_value"] + pvars["b_value"], axis=1)
    std = ad.exp(ad.clip(pvars["log_std"], LOG_STD_MIN, LOG_STD_MAX))
    return mean, std, value


def forward(params: MlpParams, obs: np.ndarray) -> GaussianPolicyOutput:
    """Single-observation forward pass returning plain numpy values."""
    o = np.asarray(obs, dtype=float)
    if o.ndim != 1 or o.shape[0] != params.obs_dim:
        raise UsageError(f"observation must have shape ({params.obs_dim},), got {o.shape}")
    mean, std, value = forward_graph(param_vars(params), o[None, :])
    return GaussianPolicyOutput(mean.value[0], std.value, float(value.value[0]))


def sample_action(output: GaussianPolicyOutput, noise: np.ndarray) -> ActionSample:
    """a = clamp(mean + std * noise); log density taken at the pre-clamp point."""
    noise = np.asarray(noise, dtype=float)
    raw = output.mean + output.std * noise
    action = np.clip(raw, ACTION_LOW, ACTION_HIGH)
    log_prob = float(
        -0.5 * (noise**2).sum() - np.log(output.std).sum() - 0.5 * noise.size * LOG2PI
    )
    return ActionSample(action, raw, log_prob)


def action_log_prob(output: GaussianPolicyOutput, raw_action: np.ndarray) -> float:
    """Diagonal-Gaussian log density at an arbitrary (pre-clamp) point."""
    z = (np.asarray(raw_action) - output.mean) / output.std
    return float(-0.5 * (z**2).sum() - np.log(output.std).sum() - 0.5 * z.size * LOG2PI)


def entropy(output: GaussianPolicyOutput) -> float:
    """Analytic diagonal-Gaussian entropy."""
    return float((0.5 + 0.5 * LOG2PI + np.log(output.std)).sum())


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: MlpParams, learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def adam_update(params: MlpParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Standard bias-corrected Adam step, in place on ``params``.

    A non-finite gradient anywhere rejects the whole update and leaves
    parameters and optimizer state untouched.
    """
    if set(grads) != set(params.arrays):
        raise UsageError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if g.shape != params.arrays[k].shape:
            raise UsageError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}; update rejected")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g**2
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params.arrays[k] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ----------------------------------------------------------------------
# Checkpoints: self-describing JSON. Floats round-trip losslessly (python
# emits shortest-exact decimal, up to 17 significant digits).


def save_checkpoint(
    path,
    params: MlpParams,
    adam: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "format": "mlppo-checkpoint-v1",
        "network": {
            "obs_dim": params.obs_dim,
            "n_actions": params.n_actions,
            "hidden": list(params.hidden),
        },
        "parameters": {k: v.tolist() for k, v in params.arrays.items()},
    }
    if adam is not None:
        payload["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step_count": adam.step_count,
            "m": {k: v.tolist() for k, v in adam.m.items()},
            "v": {k: v.tolist() for k, v in adam.v.items()},
        }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> tuple[MlpParams, AdamState | None, dict]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != "mlppo-checkpoint-v1":
        raise ConfigError(f"not a recognized checkpoint: {path}")
    net = payload["network"]
    arrays = {k: np.asarray(v, dtype=float) for k, v in payload["parameters"].items()}
    params = MlpParams(net["obs_dim"], net["n_actions"], tuple(net["hidden"]), arrays)
    adam = None
    if "adam" in payload:
        a = payload["adam"]
        adam = AdamState(
            learning_rate=a["learning_rate"],
            beta1=a["beta1"],
            beta2=a["beta2"],
            eps=a["eps"],
            step_count=a["step_count"],
            m={k: np.asarray(v, dtype=float) for k, v in a["m"].items()},
            v={k: np.asarray(v, dtype=float) for k, v in a["v"].items()},
        )
    return params, adam, payload.get("extra", {})
