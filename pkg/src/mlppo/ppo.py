"""PPO with a Monte Carlo or a multilevel Monte Carlo loss estimate.

Rollout collection fills one buffer per level in the row format
[s, a, r, d, V, L_old, R, A]; at every level above the coarsest, each step
also drives a synchronized companion environment one level down (its state
overwritten with the restriction of the pre-step state, its action drawn
with the same Gaussian noise) whose rows land in a paired sync buffer. The
multilevel loss is the telescopic sum over levels of minibatch-mean
differences between paired losses; with a single level it reduces exactly
to the classical minibatch mean.

Sign convention: the optimizer minimizes mean[-L_a + L_v + L_e], where
L_a is the clipped surrogate (to be maximized), L_v the value error, and
L_e carries the entropy bonus with its sign folded in.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .env import ResSimEnv
from .errors import ConfigError, NumericError, UsageError
from .multilevel import LevelStack, sync_env_from
from .policy import (
    AdamState,
    MlpParams,
    adam_update,
    forward,
    forward_graph,
    param_vars,
    sample_action,
)

__all__ = [
    "RolloutBuffer",
    "Batch",
    "BatchLosses",
    "PpoConfig",
    "TrainRecord",
    "compute_gae",
    "ClassicCollector",
    "MultilevelCollector",
    "get_batches",
    "compute_batch_losses",
    "loss_mc",
    "loss_mlmc",
    "policy_loss_and_grads",
    "clip_gradients",
    "iteration_cost",
    "evaluate_policy",
    "equal_rates_rewards",
    "train",
]

LOG2PI = float(np.log(2.0 * np.pi))

# Sub-stream tags so collection, shuffling, and calibration never share
# random draws.
_STREAM_COLLECT = 1
_STREAM_BATCH = 2


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one actor segment.

    delta_t = r_t + gamma * V_{t+1} * (1 - d_t) - V_t
    A_t     = delta_t + gamma * lam * (1 - d_t) * A_{t+1}
    R_t     = A_t + V_t
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (len(rewards) == len(values) == len(dones)):
        raise UsageError("rewards, values, dones must have equal length")
    t_len = len(rewards)
    adv = np.zeros(t_len)
    last = 0.0
    for t in reversed(range(t_len)):
        v_next = bootstrap_value if t == t_len - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * v_next * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


@dataclass
class RolloutBuffer:
    """N*T rows of [s, a, r, d, V, L_old, R, A], actor-major."""

    level: int
    n_actors: int
    t_steps: int
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    empty: bool = False

    @classmethod
    def allocate(cls, level, n_actors, t_steps, obs_dim, n_actions) -> "RolloutBuffer":
        n = n_actors * t_steps
        return cls(
            level,
            n_actors,
            t_steps,
            np.zeros((n, obs_dim)),
            np.zeros((n, n_actions)),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
        )

    @classmethod
    def sentinel(cls, level, n_actors, t_steps) -> "RolloutBuffer":
        """Placeholder for the coarsest level's companion, which is
        defined to contribute zero to the telescopic loss."""
        buf = cls.allocate(level, n_actors, t_steps, 0, 0)
        buf.empty = True
        return buf

    @property
    def n_rows(self) -> int:
        return self.n_actors * self.t_steps

    def actor_rows(self, actor: int) -> slice:
        return slice(actor * self.t_steps, (actor + 1) * self.t_steps)


@dataclass(frozen=True)
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.returns)


def _actor_env(proto: ResSimEnv) -> ResSimEnv:
    """Independent env instance sharing the (read-only) pressure systems."""
    env = ResSimEnv(proto.config)
    env.set_obs_norm(*proto.obs_norm())
    env._systems = proto._systems
    return env


def _fill_rows(buf: RolloutBuffer, actor: int, rows: list[tuple], adv: np.ndarray, ret: np.ndarray):
    sl = buf.actor_rows(actor)
    buf.obs[sl] = [r[0] for r in rows]
    buf.actions[sl] = [r[1] for r in rows]
    buf.rewards[sl] = [r[2] for r in rows]
    buf.dones[sl] = [r[3] for r in rows]
    buf.values[sl] = [r[4] for r in rows]
    buf.log_probs[sl] = [r[5] for r in rows]
    buf.advantages[sl] = adv
    buf.returns[sl] = ret


class ClassicCollector:
    """N independent actors on one environment, SB3-style continuation:
    trajectories persist across iterations and auto-reset at terminals."""

    def __init__(self, env: ResSimEnv, n_actors: int, seed: int):
        if n_actors < 1:
            raise ConfigError("need at least one actor")
        self.envs = [_actor_env(env) for _ in range(n_actors)]
        self.n_actors = n_actors
        self.seed = seed

    def collect(
        self, params: MlpParams, t_steps: int, iteration: int, gamma: float, lam: float
    ) -> RolloutBuffer:
        env0 = self.envs[0]
        buf = RolloutBuffer.allocate(1, self.n_actors, t_steps, env0.obs_dim, env0.n_wells)
        for a, env in enumerate(self.envs):
            rng = np.random.default_rng([self.seed, _STREAM_COLLECT, iteration, a])
            rows = []
            for _ in range(t_steps):
                if env.done:
                    env.reset(rng)
                obs = env.observe()
                out = forward(params, obs)
                noise = rng.standard_normal(env.n_wells)
                s = sample_action(out, noise)
                res = env.step(s.action)
                rows.append((obs, s.raw, res.reward, float(res.done), out.value, s.log_prob))
            bootstrap = forward(params, env.observe()).value
            adv, ret = compute_gae(
                np.array([r[2] for r in rows]),
                np.array([r[4] for r in rows]),
                np.array([r[3] for r in rows]),
                bootstrap,
                gamma,
                lam,
            )
            _fill_rows(buf, a, rows, adv, ret)
        return buf


class MultilevelCollector:
    """Synchronized multilevel collection (one env per level per actor).

    Levels run coarsest to finest; entering level l the state is carried
    up from level l-1's end state (terminal states reset at the new level
    instead). Each step at level l > 1 first synchronizes the level-(l-1)
    env with the restriction of the pre-step state and steps it with the
    same policy noise (common random numbers), pairing row t of the sync
    buffer with row t of the main buffer.
    """

    def __init__(self, stack: LevelStack, n_actors: int, seed: int):
        if n_actors < 1:
            raise ConfigError("need at least one actor")
        self.stack = stack
        self.actor_envs = [[_actor_env(e) for e in stack.envs] for _ in range(n_actors)]
        self.n_actors = n_actors
        self.seed = seed

    def collect(
        self,
        params: MlpParams,
        t_steps: tuple[int, ...],
        iteration: int,
        gamma: float,
        lam: float,
        record_states: bool = False,
    ) -> tuple[list[RolloutBuffer], list[RolloutBuffer], list | None]:
        n_levels = self.stack.n_levels
        if len(t_steps) != n_levels:
            raise ConfigError("one T per level required")
        env0 = self.stack.envs[0]
        buffers = [
            RolloutBuffer.allocate(l + 1, self.n_actors, t_steps[l], env0.obs_dim, env0.n_wells)
            for l in range(n_levels)
        ]
        sync_buffers = [RolloutBuffer.sentinel(1, self.n_actors, t_steps[0])] + [
            RolloutBuffer.allocate(l + 1, self.n_actors, t_steps[l], env0.obs_dim, env0.n_wells)
            for l in range(1, n_levels)
        ]
        state_log = [] if record_states else None

        for a in range(self.n_actors):
            rng = np.random.default_rng([self.seed, _STREAM_COLLECT, iteration, a])
            envs = self.actor_envs[a]
            for li in range(n_levels):
                env = envs[li]
                if li > 0:
                    source = envs[li - 1]
                    if source.done:
                        env.needs_reset = True
                    else:
                        sync_env_from(env, source)
                rows: list[tuple] = []
                sync_rows: list[tuple] = []
                for t in range(t_steps[li]):
                    if env.done:
                        env.reset(rng)
                    obs = env.observe()
                    out = forward(params, obs)
                    noise = rng.standard_normal(env.n_wells)
                    s = sample_action(out, noise)
                    if li > 0:
                        companion = envs[li - 1]
                        sync_env_from(companion, env)
                        if record_states:
                            state_log.append(
                                (
                                    li + 1,
                                    a,
                                    t,
                                    env.state.concentration.copy(),
                                    companion.state.concentration.copy(),
                                )
                            )
                        obs_c = companion.observe()
                        out_c = forward(params, obs_c)
                        s_c = sample_action(out_c, noise)
                        res_c = companion.step(s_c.action)
                        sync_rows.append(
                            (obs_c, s_c.raw, res_c.reward, float(res_c.done), out_c.value, s_c.log_prob)
                        )
                    res = env.step(s.action)
                    rows.append((obs, s.raw, res.reward, float(res.done), out.value, s.log_prob))
                bootstrap = forward(params, env.observe()).value
                adv, ret = compute_gae(
                    np.array([r[2] for r in rows]),
                    np.array([r[4] for r in rows]),
                    np.array([r[3] for r in rows]),
                    bootstrap,
                    gamma,
                    lam,
                )
                _fill_rows(buffers[li], a, rows, adv, ret)
                if li > 0:
                    boot_c = forward(params, envs[li - 1].observe()).value
                    adv_c, ret_c = compute_gae(
                        np.array([r[2] for r in sync_rows]),
                        np.array([r[4] for r in sync_rows]),
                        np.array([r[3] for r in sync_rows]),
                        boot_c,
                        gamma,
                        lam,
                    )
                    _fill_rows(sync_buffers[li], a, sync_rows, adv_c, ret_c)
        return buffers, sync_buffers, state_log


def _slice_batch(buf: RolloutBuffer, idx: np.ndarray) -> Batch:
    return Batch(
        buf.obs[idx],
        buf.actions[idx],
        buf.log_probs[idx],
        buf.values[idx],
        buf.returns[idx],
        buf.advantages[idx],
    )


def get_batches(
    buffers: list[RolloutBuffer],
    sync_buffers: list[RolloutBuffer],
    m_batch: tuple[int, ...],
    rng: np.random.Generator,
) -> list[list[tuple[Batch, Batch | None]]]:
    """Shuffle each level with a common row permutation (pairing preserved)
    and slice into aligned minibatches: result[b][l] = (batch, sync batch).
    """
    if not (len(buffers) == len(sync_buffers) == len(m_batch)):
        raise ConfigError("buffers, sync buffers, and M must align per level")
    n_outer = None
    per_level: list[list[tuple[Batch, Batch | None]]] = []
    for buf, sync, m in zip(buffers, sync_buffers, m_batch):
        n = buf.n_rows
        if m < 1 or m > n:
            raise ConfigError(f"minibatch size {m} invalid for {n} rows")
        if n % m != 0:
            raise ConfigError(f"minibatch size {m} must divide N*T = {n}")
        if n_outer is None:
            n_outer = n // m
        elif n // m != n_outer:
            raise ConfigError(
                "levels must produce the same number of minibatches (T_l/M_l constant)"
            )
        perm = rng.permutation(n)
        chunks = []
        for b in range(n_outer):
            idx = perm[b * m : (b + 1) * m]
            main = _slice_batch(buf, idx)
            companion = None if sync.empty else _slice_batch(sync, idx)
            chunks.append((main, companion))
        per_level.append(chunks)
    return [[per_level[l][b] for l in range(len(buffers))] for b in range(n_outer)]


@dataclass(frozen=True)
class BatchLosses:
    """Per-row loss pieces; ``le`` may be a scalar (state-independent std)."""

    la: Var
    lv: Var
    le: Var


def compute_batch_losses(
    pvars: dict[str, Var],
    batch: Batch,
    clip_eps: float,
    c_v: float,
    c_e: float,
    entropy_mode: str = "analytic",
    advantage_norm: bool = False,
) -> BatchLosses:
    """Clipped surrogate, value error, and entropy term for one minibatch.

    ratio r = exp(L_now - L_old); L_a = min(A r, A clip(r, 1-eps, 1+eps));
    L_v = c_v (V_now - R)^2. In ``analytic`` mode L_e = -c_e * S(pi); in
    ``sample`` mode the entropy is estimated by -L_now, so L_e = c_e * L_now.
    """
    mean, std, value = forward_graph(pvars, batch.obs)
    z = (Var(batch.actions) - mean) / std
    n_actions = batch.actions.shape[1]
    log_now = (
        ad.vsum(z * z, axis=1) * (-0.5) - ad.vsum(ad.log(std)) - 0.5 * n_actions * LOG2PI
    )
    ratio = ad.exp(log_now - Var(batch.log_probs))
    adv = batch.advantages
    if advantage_norm:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv_c = Var(adv)
    la = ad.minimum(adv_c * ratio, adv_c * ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps))
    lv = (value - Var(batch.returns)) ** 2 * c_v
    if entropy_mode == "analytic":
        ent = ad.vsum(ad.log(std)) + 0.5 * n_actions * (1.0 + LOG2PI)
        le = ent * (-c_e)
    elif entropy_mode == "sample":
        le = log_now * c_e
    else:
        raise ConfigError(f"unknown entropy_mode {entropy_mode!r}")
    return BatchLosses(la, lv, le)


def _combined(losses: BatchLosses) -> Var:
    """Per-row minimized loss: -L_a + L_v + L_e."""
    return ad.mean(-losses.la + losses.lv + losses.le)


def loss_mc(losses: BatchLosses) -> Var:
    """Monte Carlo estimate: minibatch mean of the combined row loss."""
    if losses.la.value.size == 0:
        raise UsageError("empty minibatch")
    return _combined(losses)


def loss_mlmc(level_losses: list[tuple[BatchLosses, BatchLosses | None]]) -> Var:
    """Telescopic sum of per-level mean differences; the coarsest level's
    companion is defined as zero, so its term is the plain mean."""
    if not level_losses:
        raise UsageError("no level losses supplied")
    total: Var | None = None
    for main, companion in level_losses:
        term = _combined(main)
        if companion is not None:
            if companion.la.value.shape != main.la.value.shape:
                raise UsageError("paired minibatches must have equal size")
            term = term - _combined(companion)
        total = term if total is None else total + term
    return total


def policy_loss_and_grads(
    params: MlpParams,
    level_batches: list[tuple[Batch, Batch | None]],
    clip_eps: float,
    c_v: float,
    c_e: float,
    entropy_mode: str = "analytic",
    advantage_norm: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Build the (ML)MC loss over one outer batch and backpropagate."""
    pvars = param_vars(params)
    per_level = []
    for main, companion in level_batches:
        l_main = compute_batch_losses(
            pvars, main, clip_eps, c_v, c_e, entropy_mode, advantage_norm
        )
        l_comp = (
            compute_batch_losses(pvars, companion, clip_eps, c_v, c_e, entropy_mode, advantage_norm)
            if companion is not None
            else None
        )
        per_level.append((l_main, l_comp))
    loss = loss_mlmc(per_level)
    ad.backward(loss)
    grads = {
        k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pvars.items()
    }
    return float(loss.value), grads


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm cap; returns the raw norm."""
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if max_norm is not None and total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ----------------------------------------------------------------------
@dataclass
class PpoConfig:
    """Hyperparameters; T and M carry one entry per level."""

    n_actors: int
    t_steps: tuple[int, ...]
    m_batch: tuple[int, ...]
    n_iterations: int
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    c_v: float = 0.5
    c_e: float = 0.01
    epochs: int = 20
    grad_clip: float | None = 0.5
    advantage_norm: bool = False
    entropy_mode: str = "analytic"
    eval_interval: int = 10
    force_multilevel: bool = False

    def __post_init__(self):
        self.t_steps = tuple(int(t) for t in self.t_steps)
        self.m_batch = tuple(int(m) for m in self.m_batch)
        if len(self.t_steps) != len(self.m_batch):
            raise ConfigError("T and M must have one entry per level")
        if not (0.0 < self.clip_eps < 1.0):
            raise ConfigError("clip range must lie in (0, 1)")
        ratios = set()
        for t, m in zip(self.t_steps, self.m_batch):
            n = self.n_actors * t
            if m > n:
                raise ConfigError(f"minibatch size {m} exceeds N*T = {n}")
            if n % m != 0:
                raise ConfigError(f"minibatch size {m} must divide N*T = {n}")
            ratios.add(n // m)
        if len(ratios) != 1:
            raise ConfigError("T_l/M_l must be constant across levels")

    def validate_for(self, n_levels: int) -> None:
        if len(self.t_steps) != n_levels:
            raise ConfigError(
                f"config has {len(self.t_steps)} levels, stack has {n_levels}"
            )


@dataclass
class TrainRecord:
    iteration: int
    cost_units: float
    wall_seconds: float
    mean_loss: float
    eval_mean: float = float("nan")
    eval_min: float = float("nan")
    eval_max: float = float("nan")
    aborted: bool = False


def iteration_cost(stack: LevelStack, n_actors: int, t_steps: tuple[int, ...]) -> float:
    """Abstract cost of one collection pass: sum_l N T_l (c_l + c_{l-1})."""
    return sum(n_actors * t * c for t, c in zip(t_steps, stack.pair_costs()))


def evaluate_policy(env: ResSimEnv, params: MlpParams, perm_indices=None) -> np.ndarray:
    """Deterministic (zero-noise) episode reward per representative field."""
    if perm_indices is None:
        perm_indices = range(len(env.config.perm_set))
    rng = np.random.default_rng(0)  # unused: perm index is explicit
    totals = []
    for i in perm_indices:
        env.reset(rng, perm_index=i)
        total = 0.0
        while not env.done:
            out = forward(params, env.observe())
            total += env.step(np.clip(out.mean, 0.001, 1.0)).reward
        totals.append(total)
    return np.array(totals)


def equal_rates_rewards(env: ResSimEnv, perm_indices=None) -> np.ndarray:
    """No-policy baseline: equal weights on every well."""
    if perm_indices is None:
        perm_indices = range(len(env.config.perm_set))
    rng = np.random.default_rng(0)
    totals = []
    for i in perm_indices:
        env.reset(rng, perm_index=i)
        total = 0.0
        while not env.done:
            total += env.step(np.ones(env.n_wells)).reward
        totals.append(total)
    return np.array(totals)


def train(
    stack: LevelStack,
    params: MlpParams,
    cfg: PpoConfig,
    seed: int,
    adam: AdamState | None = None,
    start_iteration: int = 0,
    start_cost: float = 0.0,
    start_wall: float = 0.0,
    checkpoint_fn: Callable | None = None,
) -> tuple[MlpParams, AdamState, list[TrainRecord]]:
    """Run PPO for ``cfg.n_iterations`` policy iterations.

    Uses the classical single-level path when the stack has one level
    (unless ``force_multilevel``), the synchronized multilevel path
    otherwise. Deterministic given (seed, start_iteration).
    """
    cfg.validate_for(stack.n_levels)
    if adam is None:
        adam = AdamState.create(params, cfg.learning_rate)
    multilevel = stack.n_levels > 1 or cfg.force_multilevel
    if multilevel:
        collector = MultilevelCollector(stack, cfg.n_actors, seed)
    else:
        collector = ClassicCollector(stack.target_env, cfg.n_actors, seed)
    eval_env = _actor_env(stack.target_env)
    per_iter_cost = iteration_cost(stack, cfg.n_actors, cfg.t_steps)

    records: list[TrainRecord] = []
    cost = start_cost
    t0 = time.perf_counter()
    for k in range(start_iteration, start_iteration + cfg.n_iterations):
        if multilevel:
            buffers, sync_buffers, _ = collector.collect(
                params, cfg.t_steps, k, cfg.gamma, cfg.gae_lambda
            )
        else:
            buf = collector.collect(params, cfg.t_steps[0], k, cfg.gamma, cfg.gae_lambda)
            buffers = [buf]
            sync_buffers = [RolloutBuffer.sentinel(1, cfg.n_actors, cfg.t_steps[0])]
        cost += per_iter_cost

        batch_rng = np.random.default_rng([seed, _STREAM_BATCH, k])
        losses = []
        aborted = False
        for _ in range(cfg.epochs):
            for outer in get_batches(buffers, sync_buffers, cfg.m_batch, batch_rng):
                try:
                    loss, grads = policy_loss_and_grads(
                        params,
                        outer,
                        cfg.clip_eps,
                        cfg.c_v,
                        cfg.c_e,
                        cfg.entropy_mode,
                        cfg.advantage_norm,
                    )
                    if not math.isfinite(loss):
                        raise NumericError(f"non-finite loss {loss}")
                    if cfg.grad_clip is not None:
                        clip_gradients(grads, cfg.grad_clip)
                    adam_update(params, grads, adam)
                    losses.append(loss)
                except NumericError:
                    aborted = True
                    break
            if aborted:
                break

        record = TrainRecord(
            iteration=k,
            cost_units=cost,
            wall_seconds=start_wall + time.perf_counter() - t0,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            aborted=aborted,
        )
        is_eval = (k - start_iteration + 1) % cfg.eval_interval == 0
        if is_eval or k == start_iteration + cfg.n_iterations - 1:
            evals = evaluate_policy(eval_env, params)
            record.eval_mean = float(evals.mean())
            record.eval_min = float(evals.min())
            record.eval_max = float(evals.max())
            if checkpoint_fn is not None:
                checkpoint_fn(k, params, adam, records + [record])
        records.append(record)
    return params, adam, records


def write_learning_curve_csv(records: list[TrainRecord], path) -> None:
    with open(path, "a") as f:
        if f.tell() == 0:
            f.write(
                "iteration,cost_units,wall_seconds,mean_loss,"
                "eval_mean,eval_min,eval_max,aborted\n"
            )
        for r in records:
            f.write(
                f"{r.iteration},{r.cost_units:.17g},{r.wall_seconds:.6f},{r.mean_loss:.17g},"
                f"{r.eval_mean:.17g},{r.eval_min:.17g},{r.eval_max:.17g},{int(r.aborted)}\n"
            )
