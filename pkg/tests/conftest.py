"""Shared desk-scale builders for the test suite."""

import numpy as np

from mlppo.env import WellPattern
from mlppo.fvsim import Grid2D
from mlppo.multilevel import LevelStack
from mlppo.perm import ChannelParams, channel_perm_from_params

SIDE = 1280.0


def square_grid(n, side=SIDE):
    return Grid2D(n, n, side / n, side / n)


def desk_perms(grid, n_perms, seed=0):
    """Distinct seeded channel fields on ``grid``."""
    rng = np.random.default_rng(seed)
    fields = []
    for _ in range(n_perms):
        w = float(rng.uniform(160.0, 320.0))
        l1 = float(rng.uniform(0.0, SIDE - w))
        l2 = float(rng.uniform(0.0, SIDE - w))
        fields.append(channel_perm_from_params(grid, ChannelParams(w, l1, l2)))
    return fields


def desk_stack(ns=(8, 16), n_perms=2, n_wells=4, seed=0, costs=None, total_rate=2304.0):
    """Channelized flow stack on nested square grids, coarsest first."""
    grids = [square_grid(n) for n in ns]
    perms = desk_perms(grids[-1], n_perms, seed)
    pattern = WellPattern.left_right_edges(SIDE, SIDE, n_wells, n_wells)
    return LevelStack.build(grids, pattern, perms, total_rate=total_rate, costs=costs)


def fd_gradient_errors(params, loss_fn, h=1e-5):
    """Central finite differences of ``loss_fn(params)`` against the
    analytic gradient dict that ``loss_fn`` also returns.

    Returns the worst absolute and relative-with-floor errors over all
    parameter components.
    """
    _, grads = loss_fn(params)
    flat_ad = np.concatenate([grads[k].ravel() for k in sorted(grads)])
    theta = params.to_vector()
    flat_fd = np.zeros_like(theta)
    for i in range(theta.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            probe = params.copy()
            vec = theta.copy()
            vec[i] += sign * h
            probe.set_vector(vec)
            val, _ = loss_fn(probe)
            if slot == 0:
                up = val
            else:
                down = val
        flat_fd[i] = (up - down) / (2 * h)
    abs_err = np.abs(flat_ad - flat_fd)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(flat_ad), np.abs(flat_fd)), 1e-3)
    return abs_err.max(), rel_err.max()
