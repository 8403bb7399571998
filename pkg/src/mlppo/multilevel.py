"""Level hierarchy: field transfer operators, synchronized environments, costs.

A level stack is a list of environments on nested grids of the same
physical domain, coarsest first; the last level is the target task. Field
transfer superposes the coarse partition on the fine grid: coarsening
takes the arithmetic mean (concentration, pressure) or harmonic mean
(permeability) over each partition, refinement assigns the coarse value
to every fine cell it covers. Grids whose sizes are not integer multiples
are handled with area-weighted overlap partitions, which reduce to plain
partition means when the nesting is exact.

Well weights transfer unchanged between levels: wells live at fixed
physical coordinates, each level maps them into its containing cell, and
the induced cell rates therefore sum per partition to the coarse rate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .env import EnvConfig, ResSimEnv, WellPattern
from .errors import ConfigError
from .fvsim import FlowState, Grid2D, ScalarField

__all__ = [
    "GridMap",
    "grid_map",
    "restrict_field",
    "prolong_field",
    "map_field",
    "restrict_state",
    "prolong_state",
    "map_state",
    "map_action",
    "LevelSpec",
    "LevelStack",
    "sync_env_from",
    "measure_level_costs",
    "analytic_level_costs",
    "write_cost_csv",
]


def _overlap_1d(n_coarse: int, n_fine: int, length: float) -> np.ndarray:
    """(n_coarse, n_fine) matrix of interval-overlap lengths."""
    dc = length / n_coarse
    df = length / n_fine
    lo_c = np.arange(n_coarse)[:, None] * dc
    hi_c = lo_c + dc
    lo_f = np.arange(n_fine)[None, :] * df
    hi_f = lo_f + df
    return np.clip(np.minimum(hi_c, hi_f) - np.maximum(lo_c, lo_f), 0.0, None)


class GridMap:
    """Transfer operators between a fine and a coarse grid of one domain."""

    def __init__(self, fine: Grid2D, coarse: Grid2D):
        if (
            abs(fine.width - coarse.width) > 1e-9 * fine.width
            or abs(fine.height - coarse.height) > 1e-9 * fine.height
        ):
            raise ConfigError("grids must cover the same physical domain")
        if fine.nx < coarse.nx or fine.ny < coarse.ny:
            raise ConfigError("fine grid must be at least as resolved as coarse")
        self.fine = fine
        self.coarse = coarse
        self.exact = fine.nx % coarse.nx == 0 and fine.ny % coarse.ny == 0
        if self.exact:
            self._kx = fine.nx // coarse.nx
            self._ky = fine.ny // coarse.ny
        else:
            ox = _overlap_1d(coarse.nx, fine.nx, fine.width)
            oy = _overlap_1d(coarse.ny, fine.ny, fine.height)
            self._wx = ox / ox.sum(axis=1, keepdims=True)
            self._wy = oy / oy.sum(axis=1, keepdims=True)
            # Refinement weights: fractions of each fine cell covered by
            # the coarse cells (columns sum to one).
            self._px = ox / ox.sum(axis=0, keepdims=True)
            self._py = oy / oy.sum(axis=0, keepdims=True)

    def restrict_mean(self, values: np.ndarray) -> np.ndarray:
        v = values.reshape(self.fine.ny, self.fine.nx)
        if self.exact:
            m = v.reshape(self.coarse.ny, self._ky, self.coarse.nx, self._kx).mean(axis=(1, 3))
        else:
            m = self._wy @ v @ self._wx.T
        return m.ravel()

    def restrict_harmonic(self, values: np.ndarray) -> np.ndarray:
        if np.any(values <= 0):
            raise ConfigError("harmonic restriction requires strictly positive values")
        return 1.0 / self.restrict_mean(1.0 / values)

    def prolong(self, values: np.ndarray) -> np.ndarray:
        v = values.reshape(self.coarse.ny, self.coarse.nx)
        if self.exact:
            f = np.repeat(np.repeat(v, self._ky, axis=0), self._kx, axis=1)
        else:
            f = self._py.T @ v @ self._px
        return f.ravel()


@lru_cache(maxsize=256)
def grid_map(fine: Grid2D, coarse: Grid2D) -> GridMap:
    return GridMap(fine, coarse)


def restrict_field(field: ScalarField, coarse: Grid2D, kind: str = "mean") -> ScalarField:
    m = grid_map(field.grid, coarse)
    if kind == "mean":
        return ScalarField(coarse, m.restrict_mean(field.values))
    if kind == "harmonic":
        return ScalarField(coarse, m.restrict_harmonic(field.values))
    raise ConfigError(f"unknown restriction kind {kind!r}")


def prolong_field(field: ScalarField, fine: Grid2D) -> ScalarField:
    return ScalarField(fine, grid_map(fine, field.grid).prolong(field.values))


def map_field(field: ScalarField, grid: Grid2D, kind: str = "mean") -> ScalarField:
    """Restrict, prolong, or copy, depending on the relative resolution."""
    if field.grid == grid:
        return field.copy()
    if field.grid.n_cells >= grid.n_cells:
        return restrict_field(field, grid, kind)
    return prolong_field(field, grid)


def restrict_state(state: FlowState, coarse: Grid2D) -> FlowState:
    """Partition means of concentration and pressure; fluxes are dropped
    (they are recomputed by the next pressure solve)."""
    return FlowState(
        restrict_field(state.concentration, coarse, "mean"),
        restrict_field(state.pressure, coarse, "mean"),
        None,
        state.time,
    )


def prolong_state(state: FlowState, fine: Grid2D) -> FlowState:
    return FlowState(
        prolong_field(state.concentration, fine),
        prolong_field(state.pressure, fine),
        None,
        state.time,
    )


def map_state(state: FlowState, grid: Grid2D) -> FlowState:
    if state.grid == grid:
        return state.copy()
    if state.grid.n_cells >= grid.n_cells:
        return restrict_state(state, grid)
    return prolong_state(state, grid)


def map_action(action: np.ndarray, n_wells: int) -> np.ndarray:
    """Action transfer between levels.

    Wells are shared physical points, so the weight vector is level
    invariant and the mapping is the identity; total signed rate is
    conserved at every level by the env's weight normalization.
    """
    a = np.asarray(action, dtype=float)
    if a.shape != (n_wells,):
        raise ConfigError(f"action must have shape ({n_wells},), got {a.shape}")
    return a.copy()


# ----------------------------------------------------------------------
@dataclass(frozen=True)
class LevelSpec:
    level: int
    grid: Grid2D
    cost_per_step: float


class LevelStack:
    """Environments on nested grids, coarsest first; last is the target.

    Per-level permeability sets are built by sequential restriction from
    the target level downward, so synchronizing an environment from the
    level above reproduces its own set entry bit for bit.
    """

    def __init__(self, envs: list[ResSimEnv], costs: list[float] | None = None):
        if not envs:
            raise ConfigError("stack needs at least one level")
        for lo, hi in zip(envs, envs[1:]):
            # Validates nesting: GridMap construction rejects mismatched
            # domains. Equal resolution is allowed (identity levels), but
            # such stacks need explicit strictly increasing costs.
            grid_map(hi.grid, lo.grid)
            if hi.grid.n_cells < lo.grid.n_cells:
                raise ConfigError("levels must be ordered coarsest to finest")
        if costs is None:
            costs = analytic_level_costs([e.grid for e in envs])
        if len(costs) != len(envs):
            raise ConfigError("one cost per level required")
        if any(c <= 0 for c in costs) or any(a >= b for a, b in zip(costs, costs[1:])):
            raise ConfigError("costs must be positive and strictly increasing")
        self.envs = envs
        self.levels = [
            LevelSpec(i + 1, env.grid, float(c)) for i, (env, c) in enumerate(zip(envs, costs))
        ]

    @property
    def n_levels(self) -> int:
        return len(self.envs)

    @property
    def target_env(self) -> ResSimEnv:
        return self.envs[-1]

    @property
    def step_costs(self) -> list[float]:
        return [spec.cost_per_step for spec in self.levels]

    def pair_costs(self) -> list[float]:
        """Cost of one synchronized sample per level: c_l + c_{l-1}, c_0 = 0."""
        c = self.step_costs
        return [c[0]] + [c[i] + c[i - 1] for i in range(1, len(c))]

    def set_costs(self, costs: list[float]) -> None:
        if len(costs) != self.n_levels:
            raise ConfigError("one cost per level required")
        self.levels = [
            LevelSpec(s.level, s.grid, float(c)) for s, c in zip(self.levels, costs)
        ]

    def clone_envs(self) -> "LevelStack":
        """Fresh env instances sharing configs and obs normalization."""
        envs = []
        for env in self.envs:
            clone = ResSimEnv(env.config)
            clone.set_obs_norm(*env.obs_norm())
            envs.append(clone)
        return LevelStack(envs, self.step_costs)

    @classmethod
    def build(
        cls,
        grids: list[Grid2D],
        pattern: WellPattern,
        target_perm_set: list[ScalarField],
        total_rate: float,
        porosity: float = 0.2,
        viscosity: float = 0.3,
        n_control_steps: int = 5,
        episode_time: float | None = None,
        costs: list[float] | None = None,
    ) -> "LevelStack":
        """Build one env per grid; sublevel permeability sets come from
        sequential restriction of the target-level set."""
        perm_sets: list[list[ScalarField]] = [list(target_perm_set)]
        for grid in reversed(grids[:-1]):
            perm_sets.append([restrict_field(p, grid, "harmonic") for p in perm_sets[-1]])
        perm_sets.reverse()
        if episode_time is None:
            episode_time = porosity * grids[-1].area / total_rate
        envs = [
            ResSimEnv(
                EnvConfig(
                    grid=grid,
                    pattern=pattern,
                    perm_set=pset,
                    total_rate=total_rate,
                    porosity=porosity,
                    viscosity=viscosity,
                    n_control_steps=n_control_steps,
                    episode_time=episode_time,
                )
            )
            for grid, pset in zip(grids, perm_sets)
        ]
        return cls(envs, costs)

    def calibrate_observations(self, seed: int, n_rollouts: int = 100) -> None:
        """Per-level pressure-channel calibration with a shared seed."""
        for i, env in enumerate(self.envs):
            env.calibrate_pressure_obs(np.random.default_rng([seed, i]), n_rollouts)

    def obs_norms(self) -> list[tuple[float, float]]:
        return [env.obs_norm() for env in self.envs]

    def set_obs_norms(self, norms) -> None:
        if len(norms) != self.n_levels:
            raise ConfigError("one (loc, scale) pair per level required")
        for env, (loc, scale) in zip(self.envs, norms):
            env.set_obs_norm(loc, scale)


def sync_env_from(target: ResSimEnv, source: ResSimEnv) -> None:
    """Overwrite the target env's state with the mapped source state.

    Concentration and pressure are mapped between the grids; the
    permeability sample id, step counter, episode bookkeeping, and clock
    are carried over. The target picks its own per-level field for the
    shared sample id, which for a downward sync equals the restriction of
    the source's field by construction of the stack's permeability sets.
    """
    if source.config.n_control_steps != target.config.n_control_steps:
        raise ConfigError("synchronized envs must share the control schedule")
    if source.perm_index < 0:
        raise ConfigError("source env has no active episode to synchronize from")
    if not (0 <= source.perm_index < len(target.config.perm_set)):
        raise ConfigError("permeability sample id missing at the target level")
    target.state = map_state(source.state, target.grid)
    target.perm_index = source.perm_index
    target.perm = target.config.perm_set[source.perm_index]
    target.step_index = source.step_index
    target.cumulative_reward = source.cumulative_reward
    target.needs_reset = source.needs_reset


def analytic_level_costs(grids: list[Grid2D], exponent: float = 1.0) -> list[float]:
    """Cell-count-based cost model, normalized to the target level."""
    raw = [g.n_cells**exponent for g in grids]
    return [r / raw[-1] for r in raw]


def measure_level_costs(
    stack: LevelStack, n_trials: int = 100, seed: int = 0
) -> list[tuple[float, float]]:
    """Average wall time of one control step per level over ``n_trials``.

    Returns (raw seconds, normalized by target level) per level. Uses a
    throwaway copy of each env so stack state is untouched.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    raw = []
    for i, env in enumerate(stack.envs):
        probe = ResSimEnv(env.config)
        rng = np.random.default_rng([seed, i])
        probe.reset(rng)
        # Warm the pressure-system cache so measurements reflect the
        # steady-state per-step cost.
        probe.step(np.ones(probe.n_wells))
        total = 0.0
        count = 0
        while count < n_trials:
            if probe.done:
                probe.reset(rng)
            action = rng.uniform(0.001, 1.0, probe.n_wells)
            t0 = time.perf_counter()
            probe.step(action)
            total += time.perf_counter() - t0
            count += 1
        raw.append(total / n_trials)
    target = raw[-1]
    return [(r, r / target) for r in raw]


def write_cost_csv(costs: list[tuple[float, float]], path) -> None:
    with open(path, "w") as f:
        f.write("level,raw_seconds,normalized\n")
        for i, (raw, norm) in enumerate(costs, start=1):
            f.write(f"{i},{raw:.17g},{norm:.17g}\n")
