"""Finite-volume solver for incompressible single-phase tracer flow.

Two coupled equations on a structured 2D grid: a pressure equation with
Darcy velocity (two-point flux approximation, harmonic face permeability)
and first-order upwind transport of a passive concentration, with explicit
CFL sub-stepping. Wells are cell-centered point sources/sinks.

Unit convention: lengths in ft, time in days, permeability in mD,
viscosity in cP, rates in ft^2/day (areal 2D flow). Darcy's law is applied
with k/mu taken numerically in these units, i.e. pressures come out in a
consistent internal unit that differs from psi by a constant factor. All
observable quantities used downstream (concentration, rates, swept volume)
are unaffected; pressure is only meaningful up to this scaling and an
additive gauge constant.

Cell indexing is row-major: cell (ix, iy) has flat index ``iy * nx + ix``,
with ix counting columns from the left edge and iy counting rows from the
top edge (y is the distance from the top-left corner, increasing downward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, IntegrityError, SolverFailure, UsageError

__all__ = [
    "Grid2D",
    "ScalarField",
    "WellSet",
    "FaceFluxes",
    "FlowState",
    "Transmissibilities",
    "TransportLedger",
    "PressureSystem",
    "assemble_transmissibilities",
    "solve_pressure",
    "transport_step",
    "simulate_control_step",
    "write_field_csv",
    "read_field_csv",
]

# Round-off band absorbed by the post-step clamp; larger violations raise.
_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class Grid2D:
    """Uniform structured grid covering ``[0, nx*dx] x [0, ny*dy]``."""

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if self.dx <= 0 or self.dy <= 0:
            raise ConfigError(f"grid needs dx, dy > 0, got dx={self.dx}, dy={self.dy}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def width(self) -> float:
        return self.nx * self.dx

    @property
    def height(self) -> float:
        return self.ny * self.dy

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def cell_index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def cell_containing(self, x: float, y: float) -> int:
        """Flat index of the cell containing physical point (x, y).

        Points on the far boundary are assigned to the last cell.
        """
        if not (0.0 <= x <= self.width and 0.0 <= y <= self.height):
            raise ConfigError(f"point ({x}, {y}) outside domain")
        ix = min(int(x / self.dx), self.nx - 1)
        iy = min(int(y / self.dy), self.ny - 1)
        return self.cell_index(ix, iy)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of all cell centers, flat row-major order."""
        xs = (np.arange(self.nx) + 0.5) * self.dx
        ys = (np.arange(self.ny) + 0.5) * self.dy
        gx, gy = np.meshgrid(xs, ys)
        return gx.ravel(), gy.ravel()


@dataclass
class ScalarField:
    """One real value per cell, stored flat in row-major order."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_cells,):
            raise ConfigError(
                f"field length {self.values.shape} does not match grid "
                f"{self.grid.nx}x{self.grid.ny}"
            )

    def as_matrix(self) -> np.ndarray:
        """(ny, nx) view of the values."""
        return self.values.reshape(self.grid.ny, self.grid.nx)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.n_cells, float(value)))


@dataclass(frozen=True)
class WellSet:
    """Cell-centered sources (injectors, rate >= 0) and sinks (producers, rate <= 0).

    Rates must close to zero in total (incompressibility), and every well
    must occupy a distinct cell.
    """

    injectors: tuple[tuple[int, float], ...]
    producers: tuple[tuple[int, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "injectors", tuple((int(c), float(r)) for c, r in self.injectors))
        object.__setattr__(self, "producers", tuple((int(c), float(r)) for c, r in self.producers))
        for c, r in self.injectors:
            if r < 0:
                raise ConfigError(f"injector rate must be >= 0, got {r} at cell {c}")
        for c, r in self.producers:
            if r > 0:
                raise ConfigError(f"producer rate must be <= 0, got {r} at cell {c}")
        cells = [c for c, _ in self.injectors] + [c for c, _ in self.producers]
        if len(set(cells)) != len(cells):
            raise ConfigError("well cells must be distinct")
        total = sum(r for _, r in self.injectors) + sum(r for _, r in self.producers)
        scale = max((abs(r) for _, r in self.injectors + self.producers), default=0.0)
        if abs(total) > 1e-9 * max(scale, 1.0):
            raise ConfigError(f"well rates must sum to zero, got {total}")

    @property
    def total_injection(self) -> float:
        return sum(r for _, r in self.injectors)

    def rate_vector(self, grid: Grid2D) -> np.ndarray:
        """Per-cell source/sink vector q, flat row-major."""
        q = np.zeros(grid.n_cells)
        for c, r in self.injectors + self.producers:
            if not (0 <= c < grid.n_cells):
                raise ConfigError(f"well cell {c} outside grid")
            q[c] += r
        return q


@dataclass(frozen=True)
class Transmissibilities:
    """Face transmissibilities: tx between x-neighbours, ty between y-neighbours.

    ``tx[iy, ix]`` couples cells (ix, iy) and (ix+1, iy); shape (ny, nx-1).
    ``ty[iy, ix]`` couples cells (ix, iy) and (ix, iy+1); shape (ny-1, nx).
    """

    grid: Grid2D
    tx: np.ndarray
    ty: np.ndarray


@dataclass(frozen=True)
class FaceFluxes:
    """Volumetric fluxes across interior faces, positive in +x / +y direction."""

    grid: Grid2D
    fx: np.ndarray
    fy: np.ndarray


@dataclass
class FlowState:
    """Concentration + pressure + face fluxes at a simulation time (days)."""

    concentration: ScalarField
    pressure: ScalarField
    face_fluxes: FaceFluxes | None
    time: float = 0.0

    @property
    def grid(self) -> Grid2D:
        return self.concentration.grid

    def copy(self) -> "FlowState":
        return FlowState(
            self.concentration.copy(),
            self.pressure.copy(),
            self.face_fluxes,
            self.time,
        )

    @classmethod
    def initial(cls, grid: Grid2D) -> "FlowState":
        return cls(ScalarField.constant(grid, 0.0), ScalarField.constant(grid, 0.0), None, 0.0)


@dataclass
class TransportLedger:
    """Time-integrated boundary bookkeeping for one transport call.

    ``injected``           integral of clean-water injection, sum(q+) dt
    ``produced_clean``     integral of clean water leaving, sum(|q-| c) dt
    ``swept_volume``       integral of resident fluid displaced, sum(|q-| (1-c)) dt
    """

    injected: float = 0.0
    produced_clean: float = 0.0
    swept_volume: float = 0.0
    n_substeps: int = 0


def assemble_transmissibilities(
    grid: Grid2D, perm: ScalarField, viscosity: float
) -> Transmissibilities:
    """Two-point flux transmissibilities with harmonic face permeability.

    For the face between cells L and R: T = H(k_L, k_R) * A_face / (mu * d),
    with H the harmonic mean, A_face the face length and d the
    center-to-center distance.
    """
    if viscosity <= 0:
        raise ConfigError(f"viscosity must be > 0, got {viscosity}")
    k = perm.as_matrix()
    if np.any(k <= 0) or not np.all(np.isfinite(k)):
        raise ConfigError("permeability must be strictly positive and finite")
    hx = 2.0 / (1.0 / k[:, :-1] + 1.0 / k[:, 1:])
    hy = 2.0 / (1.0 / k[:-1, :] + 1.0 / k[1:, :])
    tx = hx * grid.dy / (viscosity * grid.dx)
    ty = hy * grid.dx / (viscosity * grid.dy)
    return Transmissibilities(grid, tx, ty)


class PressureSystem:
    """Assembled TPFA pressure operator, reusable across right-hand sides.

    The incompressible pressure equation is pure Neumann, so the operator
    has a constant null space; it is removed by pinning one reference
    cell's pressure to zero. Solves use preconditioned conjugate gradients
    (relative tolerance ``rtol``, iteration cap ``50 * n_cells``) and are
    verified against the per-cell mass-balance residual.
    """

    def __init__(
        self,
        trans: Transmissibilities,
        ref_cell: int = 0,
        preconditioner: str = "auto",
    ):
        grid = trans.grid
        n = grid.n_cells
        if not (0 <= ref_cell < n):
            raise ConfigError(f"reference cell {ref_cell} outside grid")
        self.grid = grid
        self.trans = trans
        self.ref_cell = ref_cell

        rows, cols, vals = [], [], []
        idx = np.arange(n).reshape(grid.ny, grid.nx)
        for t, a, b in (
            (trans.tx, idx[:, :-1].ravel(), idx[:, 1:].ravel()),
            (trans.ty, idx[:-1, :].ravel(), idx[1:, :].ravel()),
        ):
            tv = t.ravel()
            rows += [a, b, a, b]
            cols += [b, a, a, b]
            vals += [-tv, -tv, tv, tv]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        a_full = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

        # Pin the reference cell symmetrically: zero its row and column
        # off-diagonals, keep a positive diagonal entry.
        pinned = a_full.tolil()
        diag_ref = max(a_full[ref_cell, ref_cell], a_full.diagonal().mean())
        pinned[ref_cell, :] = 0.0
        pinned[:, ref_cell] = 0.0
        pinned[ref_cell, ref_cell] = diag_ref
        self._a_pinned = pinned.tocsr()
        self._diag = self._a_pinned.diagonal()

        # CG needs an SPD preconditioner: Jacobi is cheapest on small
        # grids, smoothed-aggregation AMG (symmetric sweeps) keeps the
        # iteration count flat on large, high-contrast systems.
        if preconditioner == "auto":
            preconditioner = "jacobi" if n <= 2048 else "amg"
        if preconditioner == "amg":
            import pyamg

            ml = pyamg.smoothed_aggregation_solver(self._a_pinned, max_coarse=10)
            self._m = ml.aspreconditioner(cycle="V")
        elif preconditioner == "jacobi":
            inv_d = 1.0 / self._diag
            self._m = spla.LinearOperator((n, n), lambda x: inv_d * x)
        else:
            raise ConfigError(f"unknown preconditioner {preconditioner!r}")

    def solve(
        self,
        wells: WellSet,
        rtol: float = 1e-10,
        maxiter: int | None = None,
        residual_tol: float = 1e-8,
    ) -> tuple[ScalarField, FaceFluxes]:
        grid = self.grid
        if not wells.injectors or not wells.producers:
            raise ConfigError("need at least one injector and one producer")
        q = wells.rate_vector(grid)
        return self.solve_rates(q, rtol=rtol, maxiter=maxiter, residual_tol=residual_tol)

    def solve_rates(
        self,
        q: np.ndarray,
        rtol: float = 1e-10,
        maxiter: int | None = None,
        residual_tol: float = 1e-8,
    ) -> tuple[ScalarField, FaceFluxes]:
        grid = self.grid
        n = grid.n_cells
        if maxiter is None:
            maxiter = 50 * n
        if not np.all(q == 0.0):
            total = q.sum()
            if abs(total) > 1e-9 * max(np.abs(q).max(), 1.0):
                raise ConfigError(f"source terms must sum to zero, got {total}")
        b = q.copy()
        b[self.ref_cell] = 0.0

        scale = np.abs(q).max()
        if scale == 0.0:
            p = np.zeros(n)
        else:
            p, info = spla.cg(self._a_pinned, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=self._m)
            if info != 0 or not self._balanced(p, q, residual_tol):
                # One tighter retry before giving up.
                p, info = spla.cg(
                    self._a_pinned, b, rtol=rtol * 1e-3, atol=0.0, maxiter=maxiter, M=self._m
                )
                if info != 0 or not self._balanced(p, q, residual_tol):
                    res = self._residual_norm(p, q)
                    raise SolverFailure(
                        f"pressure solve residual {res:.3e} exceeds "
                        f"{residual_tol:.1e} * |q| (cg info={info})",
                        residual=res,
                    )
        fluxes = self._fluxes(p)
        return ScalarField(grid, p), fluxes

    def _fluxes(self, p: np.ndarray) -> FaceFluxes:
        pm = p.reshape(self.grid.ny, self.grid.nx)
        fx = self.trans.tx * (pm[:, :-1] - pm[:, 1:])
        fy = self.trans.ty * (pm[:-1, :] - pm[1:, :])
        return FaceFluxes(self.grid, fx, fy)

    def _residual_norm(self, p: np.ndarray, q: np.ndarray) -> float:
        f = self._fluxes(p)
        div = np.zeros((self.grid.ny, self.grid.nx))
        div[:, :-1] += f.fx
        div[:, 1:] -= f.fx
        div[:-1, :] += f.fy
        div[1:, :] -= f.fy
        return float(np.abs(div.ravel() - q).max())

    def _balanced(self, p: np.ndarray, q: np.ndarray, residual_tol: float) -> bool:
        return self._residual_norm(p, q) <= residual_tol * max(np.abs(q).max(), 1e-300)


def solve_pressure(
    grid: Grid2D,
    trans: Transmissibilities,
    wells: WellSet,
    ref_cell: int = 0,
    rtol: float = 1e-10,
    maxiter: int | None = None,
) -> tuple[ScalarField, FaceFluxes]:
    """One-shot pressure solve; see PressureSystem for the reusable form."""
    return PressureSystem(trans, ref_cell=ref_cell).solve(wells, rtol=rtol, maxiter=maxiter)


def transport_step(
    state: FlowState,
    wells: WellSet,
    porosity: float,
    dt: float,
    cfl: float = 0.9,
    max_substeps: int = 1_000_000,
) -> tuple[FlowState, TransportLedger]:
    """Advance concentration by explicit first-order upwinding over dt days.

    Internally sub-steps so each sub-step satisfies CFL <= ``cfl``.
    Injector cells receive clean water (c=1); producer cells remove fluid
    at their local concentration. The face fluxes in ``state`` are held
    fixed for the whole step (incompressible, tracer does not feed back).
    """
    if dt <= 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    if porosity <= 0 or porosity > 1:
        raise ConfigError(f"porosity must be in (0, 1], got {porosity}")
    if state.face_fluxes is None:
        raise UsageError("transport_step requires face fluxes from a pressure solve")

    grid = state.grid
    q = wells.rate_vector(grid).reshape(grid.ny, grid.nx)
    qpos = np.maximum(q, 0.0)
    qneg = np.minimum(q, 0.0)
    fx, fy = state.face_fluxes.fx, state.face_fluxes.fy
    fxp, fxm = np.maximum(fx, 0.0), np.minimum(fx, 0.0)
    fyp, fym = np.maximum(fy, 0.0), np.minimum(fy, 0.0)

    # Stability limit: per-cell outflow (faces + production) empties at
    # most a ``cfl`` fraction of the cell's pore volume per sub-step.
    out = -qneg.copy()
    out[:, :-1] += fxp
    out[:, 1:] -= fxm
    out[:-1, :] += fyp
    out[1:, :] -= fym
    pore_vol = porosity * grid.cell_area
    peak = out.max()
    n_sub = 1 if peak <= 0 else max(1, math.ceil(dt * peak / (cfl * pore_vol)))
    if n_sub > max_substeps:
        raise ConfigError(f"CFL sub-step count {n_sub} exceeds cap {max_substeps}")
    dt_sub = dt / n_sub

    # The scheme is monotone under the CFL bound, so concentration can
    # only leave [0, 1] through round-off and through the mass-balance
    # defect left by the pressure solve. Each sub-step (after clamping)
    # can overshoot 1 by at most dt_sub * imbalance / pore_volume, which
    # widens the acceptable band accordingly; anything larger is a bug.
    div = np.zeros_like(q)
    div[:, :-1] += fx
    div[:, 1:] -= fx
    div[:-1, :] += fy
    div[1:, :] -= fy
    imbalance = float(np.abs(div - q).max())
    upper_tol = _CLAMP_TOL + dt_sub * imbalance / pore_vol

    c = state.concentration.as_matrix().copy()
    ledger = TransportLedger(n_substeps=n_sub)
    sum_qpos = qpos.sum()
    for _ in range(n_sub):
        gx = fxp * c[:, :-1] + fxm * c[:, 1:]
        gy = fyp * c[:-1, :] + fym * c[1:, :]
        net = qpos + qneg * c
        net[:, :-1] -= gx
        net[:, 1:] += gx
        net[:-1, :] -= gy
        net[1:, :] += gy

        ledger.injected += dt_sub * sum_qpos
        ledger.produced_clean += dt_sub * float((-qneg * c).sum())
        ledger.swept_volume += dt_sub * float((-qneg * (1.0 - c)).sum())

        c = c + (dt_sub / pore_vol) * net
        lo, hi = float(c.min()), float(c.max())
        if lo < -_CLAMP_TOL or hi > 1.0 + upper_tol:
            raise IntegrityError(
                f"concentration left [0,1] beyond round-off: min={lo:.3e}, max={hi:.3e}"
            )
        np.clip(c, 0.0, 1.0, out=c)

    new_state = FlowState(
        ScalarField(grid, c.ravel()),
        state.pressure,
        state.face_fluxes,
        state.time + dt,
    )
    return new_state, ledger


def simulate_control_step(
    state: FlowState,
    perm: ScalarField,
    wells: WellSet,
    porosity: float,
    viscosity: float,
    duration: float,
    system: PressureSystem | None = None,
) -> tuple[FlowState, float]:
    """One control step: a single pressure solve, then transport over ``duration``.

    Returns the new state and the swept-volume integral
    ``int sum_cells |min(q,0)| (1 - c) dt`` over the step, which divided by
    the pore volume gives the step's sweep-efficiency increment.
    """
    if duration <= 0:
        raise ConfigError(f"duration must be > 0, got {duration}")
    if system is None:
        trans = assemble_transmissibilities(state.grid, perm, viscosity)
        system = PressureSystem(trans)
    pressure, fluxes = system.solve(wells)
    staged = FlowState(state.concentration, pressure, fluxes, state.time)
    advanced, ledger = transport_step(staged, wells, porosity, duration)
    return advanced, ledger.swept_volume


def write_field_csv(field: ScalarField, path) -> None:
    """Write a field as CSV: header names, grid row, then one value per line.

    Values carry 17 significant digits (lossless for float64).
    """
    g = field.grid
    with open(path, "w") as f:
        f.write("nx,ny,dx,dy\n")
        f.write(f"{g.nx},{g.ny},{g.dx:.17g},{g.dy:.17g}\n")
        for v in field.values:
            f.write(f"{v:.17g}\n")


def read_field_csv(path) -> ScalarField:
    with open(path) as f:
        header = f.readline().strip()
        if header != "nx,ny,dx,dy":
            raise ConfigError(f"unexpected field CSV header: {header!r}")
        nx_s, ny_s, dx_s, dy_s = f.readline().strip().split(",")
        grid = Grid2D(int(nx_s), int(ny_s), float(dx_s), float(dy_s))
        values = np.array([float(line) for line in f if line.strip()])
    return ScalarField(grid, values)
