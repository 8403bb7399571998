"""Variance/cost analysis of the multilevel estimator of the PPO objective.

Large-sample synchronized rollouts produce, per level l, a stream of
per-row objective values J_l: trajectories run at the target level, each
sublevel stepping its own environment from the restriction of the target
state with shared policy noise. Difference streams Y_l = J_l - J_{l-1}
(Y_1 = J_1) feed the moment estimates, the decay-rate fit, the optimal
sample allocation, the weak-convergence verdict, and the cost comparison
against the plain Monte Carlo estimate at the target level.

Formulas used (also echoed in the report header): with V_l = Var[Y_l] and
C_l the per-sample cost of Y_l,

    M_l    = ceil( 2 eps^-2 (sum_k sqrt(V_k C_k)) sqrt(V_l / C_l) )
    C_MLMC = 2 eps^-2 (sum_l sqrt(V_l C_l))^2
    M      = ceil( 2 eps^-2 V ),   C_MC = M * C

so that sum_l M_l C_l = C_MLMC holds before ceiling. The weak-convergence
bound extrapolates the last level's bias through the fitted decay rate:

    max_{l in last 3} |E[Y_l]| 2^(-alpha (L - l)) / (2^alpha - 1) <= eps / sqrt(2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .env import ResSimEnv
from .errors import ConfigError, UsageError
from .multilevel import LevelStack, sync_env_from
from .policy import MlpParams, forward, param_vars, sample_action
from .ppo import Batch, compute_batch_losses, compute_gae

__all__ = [
    "AnalysisSamples",
    "LevelStats",
    "WeakConvergence",
    "EpsilonReport",
    "AnalysisReport",
    "generate_analysis_samples",
    "row_objectives",
    "fit_alpha",
    "raw_allocation",
    "optimal_allocation",
    "mlmc_cost",
    "mc_cost",
    "weak_convergence_check",
    "run_analysis",
    "write_analysis_report",
]

FORMULA_NOTE = (
    "allocation M_l = ceil(2 eps^-2 (sum_k sqrt(V_k C_k)) sqrt(V_l/C_l)); "
    "C_MLMC = 2 eps^-2 (sum_l sqrt(V_l C_l))^2; M = ceil(2 eps^-2 V); C_MC = M*C; "
    "weak convergence: max over last 3 levels of |E[Y_l]| 2^(-alpha(L-l)) / (2^alpha - 1) "
    "<= eps/sqrt(2)"
)


@dataclass
class AnalysisSamples:
    """Per-level synchronized streams plus their per-row objectives."""

    n_samples: int
    streams: list[Batch]  # index l-1: level-l stream (level L = target)
    j_values: list[np.ndarray]
    y_values: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.y_values:
            self.y_values = [self.j_values[0]] + [
                self.j_values[l] - self.j_values[l - 1] for l in range(1, len(self.j_values))
            ]


def _stream_env(proto: ResSimEnv) -> ResSimEnv:
    env = ResSimEnv(proto.config)
    env.set_obs_norm(*proto.obs_norm())
    env._systems = proto._systems
    return env


def generate_analysis_samples(
    stack: LevelStack,
    params: MlpParams,
    n_samples: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
    gae_lambda: float = 0.95,
    clip_eps: float = 0.1,
    c_v: float = 0.5,
    c_e: float = 0.01,
    entropy_mode: str = "analytic",
) -> AnalysisSamples:
    """Roll ``n_samples`` synchronized steps: target-level trajectories with
    every sublevel stepped from the restriction of the pre-step target
    state, sharing the target's Gaussian noise (common random numbers)."""
    if n_samples < 10:
        raise ConfigError("analysis needs at least 10 samples")
    n_levels = stack.n_levels
    envs = [_stream_env(e) for e in stack.envs]
    fine = envs[-1]
    n_actions = fine.n_wells

    rows: list[list[tuple]] = [[] for _ in range(n_levels)]
    for _ in range(n_samples):
        if fine.done:
            fine.reset(rng)
        obs_f = fine.observe()
        out_f = forward(params, obs_f)
        noise = rng.standard_normal(n_actions)
        s_f = sample_action(out_f, noise)
        for li in range(n_levels - 1):
            sync_env_from(envs[li], fine)
            obs_l = envs[li].observe()
            out_l = forward(params, obs_l)
            s_l = sample_action(out_l, noise)
            res_l = envs[li].step(s_l.action)
            rows[li].append(
                (obs_l, s_l.raw, res_l.reward, float(res_l.done), out_l.value, s_l.log_prob)
            )
        res_f = fine.step(s_f.action)
        rows[-1].append((obs_f, s_f.raw, res_f.reward, float(res_f.done), out_f.value, s_f.log_prob))

    streams: list[Batch] = []
    for li in range(n_levels):
        r = rows[li]
        rewards = np.array([x[2] for x in r])
        dones = np.array([x[3] for x in r])
        values = np.array([x[4] for x in r])
        bootstrap = forward(params, envs[li].observe()).value
        adv, ret = compute_gae(rewards, values, dones, bootstrap, gamma, gae_lambda)
        streams.append(
            Batch(
                obs=np.array([x[0] for x in r]),
                actions=np.array([x[1] for x in r]),
                log_probs=np.array([x[5] for x in r]),
                values=values,
                returns=ret,
                advantages=adv,
            )
        )
    j_values = [
        row_objectives(params, s, clip_eps, c_v, c_e, entropy_mode) for s in streams
    ]
    return AnalysisSamples(n_samples, streams, j_values)


def row_objectives(
    params: MlpParams,
    stream: Batch,
    clip_eps: float,
    c_v: float,
    c_e: float,
    entropy_mode: str = "analytic",
) -> np.ndarray:
    """Per-row objective at collection time (minimized form, ratio = 1):
    J = -L_a + L_v + L_e evaluated with the current policy as both old
    and new."""
    losses = compute_batch_losses(
        param_vars(params), stream, clip_eps, c_v, c_e, entropy_mode
    )
    return np.broadcast_to(
        -losses.la.value + losses.lv.value + losses.le.value, (stream.n_rows,)
    ).copy()


def telescoping_pairs(samples: AnalysisSamples) -> list[tuple[Batch, Batch | None]]:
    """Full-batch (main, companion) pairs for the telescopic loss: level
    l's companion is the level-(l-1) stream itself, so with equal sample
    counts the telescope collapses onto the target-level mean."""
    pairs: list[tuple[Batch, Batch | None]] = [(samples.streams[0], None)]
    for l in range(1, len(samples.streams)):
        pairs.append((samples.streams[l], samples.streams[l - 1]))
    return pairs


@dataclass
class LevelStats:
    level: int
    mean_y: float
    var_y: float
    mean_j: float
    var_j: float
    cost: float  # per Y_l sample: c_l + c_{l-1}


def _two_pass_moments(x: np.ndarray) -> tuple[float, float]:
    m = float(x.mean())
    return m, float(((x - m) ** 2).mean())


def level_statistics(samples: AnalysisSamples, pair_costs: list[float]) -> list[LevelStats]:
    stats = []
    for li, (j, y) in enumerate(zip(samples.j_values, samples.y_values)):
        mj, vj = _two_pass_moments(j)
        my, vy = _two_pass_moments(y)
        stats.append(LevelStats(li + 1, my, vy, mj, vj, pair_costs[li]))
    return stats


def fit_alpha(mean_y: np.ndarray) -> float:
    """Decay rate of |E[Y_l]| ~ c 2^(-alpha l), by least squares on log2."""
    mean_y = np.asarray(mean_y, dtype=float)
    if len(mean_y) < 2:
        raise ConfigError("alpha fit needs at least two levels")
    levels = np.arange(1, len(mean_y) + 1, dtype=float)
    keep = mean_y != 0.0
    if not np.all(keep):
        warnings.warn("levels with exactly zero mean excluded from alpha fit")
    if keep.sum() < 2:
        warnings.warn("alpha fit impossible: fewer than two nonzero levels")
        return 0.0
    slope = np.polyfit(levels[keep], np.log2(np.abs(mean_y[keep])), 1)[0]
    alpha = -float(slope)
    if alpha <= 0:
        warnings.warn(f"fitted alpha = {alpha:.3g} <= 0: no decay in mean Y_l")
    return alpha


def raw_allocation(v: np.ndarray, c: np.ndarray, epsilon: float) -> np.ndarray:
    """Pre-ceiling optimal sample counts; satisfies sum(M_l C_l) = C_MLMC."""
    v = np.asarray(v, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(v < 0) or np.any(c <= 0) or epsilon <= 0:
        raise ConfigError("need V >= 0, C > 0, epsilon > 0")
    total = np.sqrt(v * c).sum()
    return 2.0 * epsilon**-2 * total * np.sqrt(v / c)


def optimal_allocation(v: np.ndarray, c: np.ndarray, epsilon: float) -> np.ndarray:
    raw = raw_allocation(v, c, epsilon)
    if np.all(np.asarray(v) == 0.0):
        warnings.warn("all level variances are zero: allocating one sample per level")
    return np.maximum(1, np.ceil(raw)).astype(int)


def mlmc_cost(v: np.ndarray, c: np.ndarray, epsilon: float) -> float:
    v = np.asarray(v, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(v < 0) or np.any(c <= 0) or epsilon <= 0:
        raise ConfigError("need V >= 0, C > 0, epsilon > 0")
    return float(2.0 * epsilon**-2 * np.sqrt(v * c).sum() ** 2)


def mc_cost(v: float, c: float, epsilon: float) -> tuple[int, float]:
    """Monte Carlo sample count and total cost at the target level.

    The estimator-variance constraint V/M = eps^2/2 fixes M independently
    of the per-sample cost, so M = ceil(2 eps^-2 V) and C_MC = M * C.
    """
    if v < 0 or c <= 0 or epsilon <= 0:
        raise ConfigError("need V >= 0, C > 0, epsilon > 0")
    m = max(1, math.ceil(2.0 * epsilon**-2 * v))
    return m, m * c


@dataclass
class WeakConvergence:
    passed: bool
    lhs: float
    threshold: float
    note: str = ""

    @property
    def margin(self) -> float:
        return self.threshold - self.lhs


def weak_convergence_check(
    mean_y: np.ndarray, alpha: float, epsilon: float
) -> WeakConvergence:
    """Bias test: residual level-L bias extrapolated through the decay rate
    must fit inside the eps/sqrt(2) budget."""
    mean_y = np.asarray(mean_y, dtype=float)
    threshold = epsilon / math.sqrt(2.0)
    if alpha <= 0:
        return WeakConvergence(False, float("inf"), threshold, "alpha <= 0: no decay fitted")
    n_levels = len(mean_y)
    tail = range(max(0, n_levels - 3), n_levels)
    lhs = max(
        abs(mean_y[l]) * 2.0 ** (-alpha * (n_levels - 1 - l)) for l in tail
    ) / (2.0**alpha - 1.0)
    return WeakConvergence(lhs <= threshold, float(lhs), threshold)


@dataclass
class EpsilonReport:
    epsilon: float
    m_levels: np.ndarray
    y_estimate: float
    cost_mlmc: float
    m_mc: int
    y_mc_estimate: float
    cost_mc: float
    weak: WeakConvergence | None


@dataclass
class AnalysisReport:
    n_samples: int
    stats: list[LevelStats]
    alpha: float | None
    per_epsilon: list[EpsilonReport]
    note: str = FORMULA_NOTE


def _subsample_mean(pool: np.ndarray, m: int, rng: np.random.Generator) -> float:
    """Mean over m draws from the pool; with replacement once m exceeds
    the pool (the pool is the best available surrogate of the law)."""
    if m >= len(pool):
        idx = rng.integers(0, len(pool), size=m)
    else:
        idx = rng.choice(len(pool), size=m, replace=False)
    return float(pool[idx].mean())


DEFAULT_EPSILONS = (math.sqrt(1e-2), math.sqrt(1e-3), math.sqrt(1e-4))


def run_analysis(
    stack: LevelStack,
    params: MlpParams,
    seed: int,
    epsilons=DEFAULT_EPSILONS,
    n_samples: int = 2000,
    costs: list[float] | None = None,
    gamma: float = 0.99,
    gae_lambda: float = 0.95,
    clip_eps: float = 0.1,
    c_v: float = 0.5,
    c_e: float = 0.01,
    entropy_mode: str = "analytic",
) -> AnalysisReport:
    """Full analysis pass: moments, decay fit, and per-accuracy comparison
    of the multilevel estimate against plain Monte Carlo."""
    if costs is not None:
        stack.set_costs(costs)
    samples = generate_analysis_samples(
        stack,
        params,
        n_samples,
        np.random.default_rng([seed, 0]),
        gamma,
        gae_lambda,
        clip_eps,
        c_v,
        c_e,
        entropy_mode,
    )
    pair_costs = stack.pair_costs()
    stats = level_statistics(samples, pair_costs)
    mean_y = np.array([s.mean_y for s in stats])
    var_y = np.array([s.var_y for s in stats])
    alpha = fit_alpha(mean_y) if stack.n_levels >= 2 else None

    v_mc = stats[-1].var_j
    c_mc_step = stack.step_costs[-1]
    sub_rng = np.random.default_rng([seed, 1])
    per_eps = []
    for eps in epsilons:
        m_levels = optimal_allocation(var_y, np.array(pair_costs), eps)
        y_est = sum(
            _subsample_mean(samples.y_values[li], int(m_levels[li]), sub_rng)
            for li in range(stack.n_levels)
        )
        c_ml = mlmc_cost(var_y, np.array(pair_costs), eps)
        m, c_plain = mc_cost(v_mc, c_mc_step, eps)
        y_mc = _subsample_mean(samples.j_values[-1], m, sub_rng)
        weak = weak_convergence_check(mean_y, alpha, eps) if alpha is not None else None
        per_eps.append(EpsilonReport(eps, m_levels, y_est, c_ml, m, y_mc, c_plain, weak))
    return AnalysisReport(n_samples, stats, alpha, per_eps)


def write_analysis_report(report: AnalysisReport, directory, tag: str = "") -> list[str]:
    """CSV blocks (per-level moments; per-epsilon allocations and costs)
    plus a plain-text verdict summary. Returns the written paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = f"_{tag}" if tag else ""
    paths = []

    p = directory / f"level_stats{suffix}.csv"
    with open(p, "w") as f:
        f.write(f"# {report.note}\n")
        f.write("level,mean_Y,var_Y,mean_J,var_J,cost\n")
        for s in report.stats:
            f.write(
                f"{s.level},{s.mean_y:.17g},{s.var_y:.17g},"
                f"{s.mean_j:.17g},{s.var_j:.17g},{s.cost:.17g}\n"
            )
    paths.append(str(p))

    p = directory / f"epsilon_report{suffix}.csv"
    with open(p, "w") as f:
        f.write(f"# {report.note}\n")
        f.write("epsilon,eps_sq,M_levels,Y,C_MLMC,M,Y_MC,C_MC,weak_passed,weak_lhs\n")
        for e in report.per_epsilon:
            m_str = ";".join(str(int(m)) for m in e.m_levels)
            weak_ok = "" if e.weak is None else int(e.weak.passed)
            weak_lhs = "" if e.weak is None else f"{e.weak.lhs:.17g}"
            f.write(
                f"{e.epsilon:.17g},{e.epsilon**2:.17g},{m_str},{e.y_estimate:.17g},"
                f"{e.cost_mlmc:.17g},{e.m_mc},{e.y_mc_estimate:.17g},{e.cost_mc:.17g},"
                f"{weak_ok},{weak_lhs}\n"
            )
    paths.append(str(p))

    p = directory / f"verdict{suffix}.txt"
    with open(p, "w") as f:
        f.write(f"samples: {report.n_samples}\n")
        f.write(f"alpha: {report.alpha}\n")
        for e in report.per_epsilon:
            ratio = e.cost_mlmc / e.cost_mc if e.cost_mc > 0 else float("nan")
            verdict = "n/a" if e.weak is None else ("pass" if e.weak.passed else "FAIL")
            f.write(
                f"eps^2={e.epsilon**2:.3g}: C_MLMC/C_MC={ratio:.3f}, "
                f"|Y-Y_MC|={abs(e.y_estimate - e.y_mc_estimate):.3g}, "
                f"weak convergence: {verdict}\n"
            )
    paths.append(str(p))
    return paths
