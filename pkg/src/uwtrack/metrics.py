"""Tracking quality metrics: OSPA distance and per-path MSE.

OSPA follows Schuhmacher, Vo & Vo (2008): localization cost through an
optimal assignment with per-point cutoff c, plus c-weighted cardinality
mismatch, outer exponent 1/p. Distances are computed on per-dimension
scaled states because delay (seconds) and Doppler (~1e-3) live two orders
of magnitude apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import PathState


@dataclass(frozen=True)
class OspaParams:
    cutoff_c: float = 0.05
    order_p: float = 2.0

    def __post_init__(self):
        if self.cutoff_c <= 0:
            raise ValueError("cutoff_c must be positive")
        if self.order_p < 1:
            raise ValueError("order_p must be >= 1")


@dataclass(frozen=True)
class StateScaler:
    """Per-dimension scale factors applied before the Euclidean distance."""

    tau_scale: float = 1.0
    doppler_scale: float = 1e-3

    def __post_init__(self):
        if self.tau_scale <= 0 or self.doppler_scale <= 0:
            raise ValueError("scale factors must be strictly positive")

    def apply(self, states: np.ndarray) -> np.ndarray:
        return states / np.array([self.tau_scale, self.doppler_scale])


def as_state_array(states) -> np.ndarray:
    """Accepts (n,2) arrays, sequences of PathState, or sequences of pairs."""
    if isinstance(states, np.ndarray):
        return states.reshape(-1, 2) if states.size else np.empty((0, 2))
    rows = []
    for s in states:
        if isinstance(s, PathState):
            rows.append([s.delay_tau, s.doppler_a])
        else:
            rows.append([float(s[0]), float(s[1])])
    return np.array(rows) if rows else np.empty((0, 2))


def _cutoff_cost(x: np.ndarray, y: np.ndarray, params: OspaParams, scaler: StateScaler) -> np.ndarray:
    dx = scaler.apply(x)[:, None, :] - scaler.apply(y)[None, :, :]
    d = np.sqrt(np.sum(dx * dx, axis=2))
    return np.minimum(params.cutoff_c, d) ** params.order_p


def ospa(x_set, y_set, params: OspaParams = OspaParams(),
         scaler: StateScaler = StateScaler()) -> float:
    """OSPA distance between two finite state sets (0 for two empty sets)."""
    x = as_state_array(x_set)
    y = as_state_array(y_set)
    m, n = len(x), len(y)
    if m == 0 and n == 0:
        return 0.0
    if m > n:
        x, y, m, n = y, x, n, m
    if m == 0:
        return params.cutoff_c
    cost = _cutoff_cost(x, y, params, scaler)
    rows, cols = linear_sum_assignment(cost)
    loc = float(cost[rows, cols].sum())
    c_p = params.cutoff_c ** params.order_p
    return float(((loc + c_p * (n - m)) / n) ** (1.0 / params.order_p))


def match_sets(truth, estimates, params: OspaParams = OspaParams(),
               scaler: StateScaler = StateScaler()) -> list[tuple[int, int]]:
    """OSPA-optimal pairs (truth_index, estimate_index) with distance < cutoff."""
    t = as_state_array(truth)
    e = as_state_array(estimates)
    if len(t) == 0 or len(e) == 0:
        return []
    cost = _cutoff_cost(t, e, params, scaler)
    c_p = params.cutoff_c ** params.order_p
    rows, cols = linear_sum_assignment(cost)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if cost[i, j] < c_p]


@dataclass
class MseSeries:
    """Per-epoch squared-error means, pooled over trials and matched paths."""

    mse_tau: np.ndarray
    mse_doppler: np.ndarray
    matched: np.ndarray   # matched (trial, path) samples per epoch
    missed: np.ndarray    # truth paths with no assigned estimate per epoch


def per_path_mse(estimates_by_trial, truth_by_epoch, params: OspaParams = OspaParams(),
                 scaler: StateScaler = StateScaler()) -> MseSeries:
    """Squared estimation error per epoch and dimension, averaged over trials.

    estimates_by_trial: [trial][epoch] -> state set; truth_by_epoch: [epoch] ->
    state set. Assignment per epoch is OSPA-optimal; truth paths left
    unassigned (or assigned beyond the cutoff) count as missed.
    """
    n_epochs = len(truth_by_epoch)
    sq_tau = np.zeros(n_epochs)
    sq_dop = np.zeros(n_epochs)
    matched = np.zeros(n_epochs, dtype=int)
    missed = np.zeros(n_epochs, dtype=int)
    truth_arrays = [as_state_array(t) for t in truth_by_epoch]
    for trial in estimates_by_trial:
        if len(trial) != n_epochs:
            raise ValueError("every trial must cover every epoch")
        for k in range(n_epochs):
            t = truth_arrays[k]
            e = as_state_array(trial[k])
            pairs = match_sets(t, e, params, scaler)
            for i, j in pairs:
                sq_tau[k] += (t[i, 0] - e[j, 0]) ** 2
                sq_dop[k] += (t[i, 1] - e[j, 1]) ** 2
            matched[k] += len(pairs)
            missed[k] += len(t) - len(pairs)
    with np.errstate(invalid="ignore", divide="ignore"):
        mse_tau = np.where(matched > 0, sq_tau / np.maximum(matched, 1), np.nan)
        mse_dop = np.where(matched > 0, sq_dop / np.maximum(matched, 1), np.nan)
    return MseSeries(mse_tau=mse_tau, mse_doppler=mse_dop, matched=matched, missed=missed)
