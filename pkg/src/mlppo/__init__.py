"""Multilevel PPO on finite-volume reservoir-flow environments.

A library for training proximal policy optimization agents against a
hierarchy of grid discretizations of a porous-media flow control task,
estimating the training objective with an approximate multilevel Monte
Carlo telescope, and analysing the variance/cost trade-off of that
estimator against plain Monte Carlo.
"""

__version__ = "0.1.0"
