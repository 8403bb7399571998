"""Episodic control environment over the finite-volume flow solver.

An episode is a fixed number of control steps (default 5). At reset a
permeability field is drawn uniformly from a finite representative set;
the controller sets per-well weights in [0.001, 1] which are normalized
into injection/production rates; the reward per step is the increment in
sweep efficiency (displaced pore-volume fraction), so the cumulative
episode reward lies in [0, 1].

The observation is concentration followed by pressure at every well cell.
Raw pressures are gauge- and scale-dependent, so the pressure channel is
standardized by a fixed affine transform calibrated from no-policy
rollouts at setup; wells sit at fixed physical coordinates and are mapped
to the containing cell of whatever grid the environment runs on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, UsageError
from .fvsim import (
    FlowState,
    Grid2D,
    PressureSystem,
    ScalarField,
    WellSet,
    assemble_transmissibilities,
    simulate_control_step,
)

__all__ = ["WellPattern", "EnvConfig", "StepResult", "ResSimEnv"]

ACTION_LOW = 0.001
ACTION_HIGH = 1.0


@dataclass(frozen=True)
class WellPattern:
    """Well locations as physical coordinates, independent of any grid."""

    injector_xy: tuple[tuple[float, float], ...]
    producer_xy: tuple[tuple[float, float], ...]

    @property
    def n_injectors(self) -> int:
        return len(self.injector_xy)

    @property
    def n_producers(self) -> int:
        return len(self.producer_xy)

    @property
    def n_wells(self) -> int:
        return self.n_injectors + self.n_producers

    def cells(self, grid: Grid2D) -> tuple[list[int], list[int]]:
        """Containing cells per well on ``grid``; cells must be distinct."""
        inj = [grid.cell_containing(x, y) for x, y in self.injector_xy]
        prod = [grid.cell_containing(x, y) for x, y in self.producer_xy]
        if len(set(inj + prod)) != len(inj) + len(prod):
            raise ConfigError(
                f"well pattern collides on grid {grid.nx}x{grid.ny}: "
                "two wells share a cell"
            )
        return inj, prod

    @classmethod
    def left_right_edges(cls, width: float, height: float, n_injectors: int, n_producers: int):
        """Injectors uniformly spaced on the left edge, producers on the right."""
        inj = tuple((0.0, (i + 0.5) * height / n_injectors) for i in range(n_injectors))
        prod = tuple((width, (i + 0.5) * height / n_producers) for i in range(n_producers))
        return cls(inj, prod)

    @classmethod
    def center_and_edges(cls, width: float, height: float, n_injectors: int, n_per_edge: int):
        """Injectors on the central vertical axis, producers on both vertical edges."""
        inj = tuple((width / 2.0, (i + 0.5) * height / n_injectors) for i in range(n_injectors))
        prod = tuple((0.0, (i + 0.5) * height / n_per_edge) for i in range(n_per_edge)) + tuple(
            (width, (i + 0.5) * height / n_per_edge) for i in range(n_per_edge)
        )
        return cls(inj, prod)


@dataclass
class EnvConfig:
    """Everything needed to run episodes on one grid level."""

    grid: Grid2D
    pattern: WellPattern
    perm_set: list[ScalarField]
    total_rate: float = 2304.0
    porosity: float = 0.2
    viscosity: float = 0.3
    n_control_steps: int = 5
    episode_time: float | None = None

    def __post_init__(self):
        if not self.perm_set:
            raise ConfigError("perm_set must be non-empty")
        if self.total_rate <= 0:
            raise ConfigError(f"total_rate must be > 0, got {self.total_rate}")
        if self.n_control_steps < 1:
            raise ConfigError("need n_control_steps >= 1")
        for p in self.perm_set:
            if p.grid != self.grid:
                raise ConfigError("perm_set entries must live on the env grid")
        if self.episode_time is None:
            # Default: time to inject one pore volume.
            self.episode_time = self.porosity * self.grid.area / self.total_rate
        if self.episode_time <= 0:
            raise ConfigError("episode_time must be > 0")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any]


class ResSimEnv:
    """One environment instance; single-threaded, deterministic given seeds."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.grid = config.grid
        inj, prod = config.pattern.cells(config.grid)
        self._inj_cells = np.array(inj, dtype=int)
        self._prod_cells = np.array(prod, dtype=int)
        self._well_cells = np.concatenate([self._inj_cells, self._prod_cells])
        self.n_injectors = len(inj)
        self.n_producers = len(prod)
        self.n_wells = self.n_injectors + self.n_producers
        self.obs_dim = 2 * self.n_wells
        # Affine standardization of the pressure channel; identity until
        # calibrate_pressure_obs runs.
        self.pressure_loc = 0.0
        self.pressure_scale = 1.0

        self.state: FlowState = FlowState.initial(self.grid)
        self.perm_index: int = -1
        self.perm: ScalarField | None = None
        self.step_index: int = 0
        self.cumulative_reward: float = 0.0
        self.needs_reset: bool = True
        self._systems: dict[int, PressureSystem] = {}

    # ------------------------------------------------------------------
    @property
    def done(self) -> bool:
        return self.needs_reset or self.step_index >= self.config.n_control_steps

    @property
    def pore_volume(self) -> float:
        return self.config.porosity * self.grid.area

    @property
    def control_dt(self) -> float:
        return self.config.episode_time / self.config.n_control_steps

    def pressure_system(self, perm_index: int) -> PressureSystem:
        system = self._systems.get(perm_index)
        if system is None:
            trans = assemble_transmissibilities(
                self.grid, self.config.perm_set[perm_index], self.config.viscosity
            )
            system = PressureSystem(trans)
            self._systems[perm_index] = system
        return system

    def equal_rates_wellset(self) -> WellSet:
        return self.rates_from_weights(np.ones(self.n_wells))

    def rates_from_weights(self, weights: np.ndarray) -> WellSet:
        """Normalize well weights so injector rates sum to +Q and producer
        rates to -Q, preserving incompressibility for any weight vector."""
        w = np.asarray(weights, dtype=float)
        wi = w[: self.n_injectors]
        wp = w[self.n_injectors :]
        q = self.config.total_rate
        inj_rates = wi / wi.sum() * q
        prod_rates = -wp / wp.sum() * q
        inj = tuple((int(c), float(r)) for c, r in zip(self._inj_cells, inj_rates))
        prod = tuple((int(c), float(r)) for c, r in zip(self._prod_cells, prod_rates))
        return WellSet(inj, prod)

    # ------------------------------------------------------------------
    def reset(self, rng: np.random.Generator, perm_index: int | None = None) -> np.ndarray:
        """Sample a permeability, zero the concentration, and solve the
        initial equal-rate pressure field feeding the first observation."""
        if perm_index is None:
            perm_index = int(rng.integers(len(self.config.perm_set)))
        if not (0 <= perm_index < len(self.config.perm_set)):
            raise ConfigError(f"perm_index {perm_index} out of range")
        self.perm_index = perm_index
        self.perm = self.config.perm_set[perm_index]
        pressure, fluxes = self.pressure_system(perm_index).solve(self.equal_rates_wellset())
        self.state = FlowState(ScalarField.constant(self.grid, 0.0), pressure, fluxes, 0.0)
        self.step_index = 0
        self.cumulative_reward = 0.0
        self.needs_reset = False
        return self.observe()

    def step(self, action: np.ndarray) -> StepResult:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset() first")
        a = np.asarray(action, dtype=float)
        if a.shape != (self.n_wells,):
            raise ConfigError(f"action must have shape ({self.n_wells},), got {a.shape}")
        clamped = bool(np.any(a < ACTION_LOW) or np.any(a > ACTION_HIGH))
        a = np.clip(a, ACTION_LOW, ACTION_HIGH)
        wells = self.rates_from_weights(a)
        self.state, swept = simulate_control_step(
            self.state,
            self.perm,
            wells,
            self.config.porosity,
            self.config.viscosity,
            self.control_dt,
            system=self.pressure_system(self.perm_index),
        )
        reward = swept / self.pore_volume
        self.step_index += 1
        self.cumulative_reward += reward
        return StepResult(
            observation=self.observe(),
            reward=reward,
            done=self.done,
            info={
                "sweep_efficiency": self.cumulative_reward,
                "step_index": self.step_index,
                "perm_index": self.perm_index,
                "action_clamped": clamped,
            },
        )

    def observe(self) -> np.ndarray:
        """Concentration then standardized pressure at every well cell."""
        c = self.state.concentration.values[self._well_cells]
        p_raw = self.state.pressure.values[self._well_cells]
        p = (p_raw - self.pressure_loc) / self.pressure_scale
        return np.concatenate([c, p])

    # ------------------------------------------------------------------
    def calibrate_pressure_obs(self, rng: np.random.Generator, n_rollouts: int = 100) -> None:
        """Fix the pressure-channel affine transform from no-policy rollouts.

        Runs ``n_rollouts`` equal-rate episodes, pools the raw well
        pressures seen at every observation point, and stores their
        mean/std. Deterministic given ``rng``.
        """
        samples = []
        equal = np.ones(self.n_wells)
        for _ in range(n_rollouts):
            self.reset(rng)
            samples.append(self.state.pressure.values[self._well_cells].copy())
            while not self.done:
                self.step(equal)
                samples.append(self.state.pressure.values[self._well_cells].copy())
        pooled = np.concatenate(samples)
        self.pressure_loc = float(pooled.mean())
        scale = float(pooled.std())
        self.pressure_scale = scale if scale > 1e-12 else 1.0
        self.needs_reset = True

    def obs_norm(self) -> tuple[float, float]:
        return self.pressure_loc, self.pressure_scale

    def set_obs_norm(self, loc: float, scale: float) -> None:
        self.pressure_loc = float(loc)
        self.pressure_scale = float(scale)
