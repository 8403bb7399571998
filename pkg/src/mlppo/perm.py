"""Stochastic permeability-field generators.

Two families:

* a binary channel model — a straight high-permeability band (245 mD)
  crossing a square domain left to right through a 0.14 mD background,
  with uniformly distributed width and edge offsets;
* log-normal fields from an anisotropic exponential variogram, conditioned
  by simple kriging to a fixed log-permeability at the well cells.

Both samplers are pure functions of (grid, parameters, generator) and are
deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .fvsim import Grid2D, ScalarField

__all__ = [
    "ChannelParams",
    "VariogramParams",
    "sample_channel_params",
    "channel_perm_from_params",
    "sample_channel_perm",
    "variogram_eval",
    "covariance_matrix",
    "sample_gaussian_field",
    "sample_kriged_perm",
]

PermeabilityField = ScalarField


@dataclass(frozen=True)
class ChannelParams:
    """Channel geometry in physical units (ft) plus the two facies values (mD).

    ``l1`` and ``l2`` are the distances of the channel's upper edge from the
    top of the domain at the left and right sides; ``w`` is the band width.
    """

    w: float
    l1: float
    l2: float
    k_channel: float = 245.0
    k_background: float = 0.14

    def validate(self, domain_length: float) -> None:
        if not (0.0 <= self.l1 <= domain_length - self.w):
            raise ConfigError(f"l1={self.l1} outside [0, L-w]")
        if not (0.0 <= self.l2 <= domain_length - self.w):
            raise ConfigError(f"l2={self.l2} outside [0, L-w]")


@dataclass(frozen=True)
class VariogramParams:
    """Anisotropic exponential variogram with rotated principal axes."""

    sigma2: float = 5.0
    lx: float = 620.0
    ly: float = 62.0
    rotation: float = np.pi / 8
    conditioned_value: float = 2.41

    def __post_init__(self):
        if self.sigma2 <= 0 or self.lx <= 0 or self.ly <= 0:
            raise ConfigError("variogram needs sigma2, lx, ly > 0")


def sample_channel_params(
    domain_length: float,
    rng: np.random.Generator,
    w_range: tuple[float, float] = (120.0, 360.0),
) -> ChannelParams:
    """Draw w ~ U(w_range) and l1, l2 ~ U(0, L - w)."""
    if domain_length < w_range[1]:
        raise ConfigError(
            f"domain length {domain_length} shorter than max channel width {w_range[1]}"
        )
    w = float(rng.uniform(*w_range))
    l1 = float(rng.uniform(0.0, domain_length - w))
    l2 = float(rng.uniform(0.0, domain_length - w))
    return ChannelParams(w, l1, l2)


def channel_perm_from_params(
    grid: Grid2D, params: ChannelParams, domain_length: float | None = None
) -> PermeabilityField:
    """Rasterize a channel onto the grid by cell-center membership.

    A cell is in the channel when its center (x, y) satisfies
    (l2-l1)/L * x + l1 <= y <= (l2-l1)/L * x + l1 + w, with y measured
    from the top edge.
    """
    length = grid.width if domain_length is None else domain_length
    if abs(grid.width - grid.height) > 1e-9 * length:
        raise ConfigError("channel model expects a square domain")
    params.validate(length)
    x, y = grid.cell_centers()
    upper = (params.l2 - params.l1) / length * x + params.l1
    inside = (upper <= y) & (y <= upper + params.w)
    values = np.where(inside, params.k_channel, params.k_background)
    return ScalarField(grid, values)


def sample_channel_perm(
    grid: Grid2D,
    rng: np.random.Generator,
    domain_length: float | None = None,
) -> PermeabilityField:
    length = grid.width if domain_length is None else domain_length
    return channel_perm_from_params(grid, sample_channel_params(length, rng), length)


def variogram_eval(params: VariogramParams, r_x, r_y):
    """gamma(r) = sigma2 * (1 - exp(-sqrt((r_x/lx)^2 + (r_y/ly)^2)))."""
    h = np.sqrt((np.asarray(r_x) / params.lx) ** 2 + (np.asarray(r_y) / params.ly) ** 2)
    return params.sigma2 * (1.0 - np.exp(-h))


def covariance_matrix(grid: Grid2D, params: VariogramParams) -> np.ndarray:
    """Dense cell-center covariance, sigma2 - gamma(rotated lag).

    Lag vectors are rotated by -rotation before the variogram is
    evaluated, which aligns the anisotropy axes with a field rotated
    clockwise by +rotation.
    """
    x, y = grid.cell_centers()
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    ct, st = np.cos(-params.rotation), np.sin(-params.rotation)
    rx = ct * dx - st * dy
    ry = st * dx + ct * dy
    return params.sigma2 - variogram_eval(params, rx, ry)


def sample_gaussian_field(
    grid: Grid2D,
    params: VariogramParams,
    rng: np.random.Generator,
    mean: float = 0.0,
    max_cells: int = 10_000,
) -> np.ndarray:
    """Unconditional Gaussian field via dense Cholesky factorization.

    Desk-scale only: the covariance is factorized densely, so the cell
    count is capped at ``max_cells``.
    """
    n = grid.n_cells
    if n > max_cells:
        raise ConfigError(f"{n} cells exceeds dense-factorization cap {max_cells}")
    cov = covariance_matrix(grid, params)
    cov[np.diag_indices_from(cov)] += 1e-10 * params.sigma2
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise GenerationError(f"covariance not positive definite after jitter: {exc}") from exc
    return mean + chol @ rng.standard_normal(n)


def sample_kriged_perm(
    grid: Grid2D,
    params: VariogramParams,
    well_cells,
    rng: np.random.Generator,
    mean: float | None = None,
    max_cells: int = 10_000,
) -> PermeabilityField:
    """Log-normal field conditioned to ``conditioned_value`` at the well cells.

    Draws an unconditional field, then applies the simple-kriging residual
    correction so the log-field equals the conditioning value exactly at
    the data cells. The process mean defaults to the conditioning value.
    Returns exp(field) as permeability.
    """
    idx = np.asarray(sorted(set(int(c) for c in well_cells)), dtype=int)
    if idx.size == 0:
        raise ConfigError("kriged sampler needs at least one conditioning cell")
    if idx.min() < 0 or idx.max() >= grid.n_cells:
        raise ConfigError("conditioning cell outside grid")
    mu = params.conditioned_value if mean is None else mean
    g = sample_gaussian_field(grid, params, rng, mean=mu, max_cells=max_cells)

    cov = covariance_matrix(grid, params)
    cov[np.diag_indices_from(cov)] += 1e-10 * params.sigma2
    c_data = cov[np.ix_(idx, idx)]
    try:
        weights = np.linalg.solve(c_data, params.conditioned_value - g[idx])
    except np.linalg.LinAlgError as exc:
        raise GenerationError(f"kriging system singular: {exc}") from exc
    conditioned = g + cov[:, idx] @ weights
    return ScalarField(grid, np.exp(conditioned))
