"""Mirror-reflection ray geometry for shallow-water multipath channels.

Transmitter and receiver sit at the same depth in an isovelocity layer
bounded by a flat surface and bottom, so every eigenpath unfolds into a
straight line through image sources. A path is identified by its ordered
sequence of boundary hits; that signature fixes a constant equivalent
vertical depth D2, while the horizontal range D1 carries all of the time
variation. Per-path delay, Doppler scaling factor and spreading amplitude
all follow from (D1, D2).

Sign convention: relative speed v > 0 means transmitter and receiver are
closing, so the range advances by -v*T per block (range grows for v < 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

SURFACE = "surface"
BOTTOM = "bottom"


class InversionUndefinedError(ValueError):
    """Raised when (D1, D2) cannot be recovered from a path state (v = 0)."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Geometry, kinematics and block constants, SI units throughout."""

    receiver_depth_h10: float       # m, receiver (and transmitter) depth below surface
    bottom_clearance_h20: float     # m, distance from receiver depth to the bottom
    initial_range_dsr: float        # m, horizontal range at epoch 1
    relative_speed_v: float         # m/s, positive = closing
    sound_speed_c: float = 1500.0   # m/s
    block_length_t: float = 1.0     # s, tracking state interval
    spreading_exponent_beta: float = 1.5
    max_reflections: int = 2
    surface_loss: float = 1.0       # per-bounce amplitude multiplier
    bottom_loss: float = 1.0
    doppler_spread_scale: float = 1.0  # ground-truth stressor, scales (a_p - mean a)

    def __post_init__(self):
        if self.receiver_depth_h10 <= 0 or self.bottom_clearance_h20 <= 0:
            raise ValueError("boundary distances h10, h20 must be positive")
        if self.initial_range_dsr <= 0:
            raise ValueError("initial_range_dsr must be positive")
        if self.sound_speed_c <= 0:
            raise ValueError("sound_speed_c must be positive")
        if self.block_length_t <= 0:
            raise ValueError("block_length_t must be positive")
        if not 1.0 <= self.spreading_exponent_beta <= 2.0:
            raise ValueError("spreading_exponent_beta must lie in [1, 2]")
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")


@dataclass(frozen=True)
class PathSpec:
    """One eigenpath's identity: boundary-hit signature and unfolded depth."""

    reflection_signature: tuple[str, ...]
    equivalent_depth_d2: float  # m, constant over time for a fixed signature
    label: int
    boundary_gain: float = 1.0  # product of per-bounce loss multipliers


@dataclass(frozen=True)
class PathState:
    """Per-path kinematic state: delay (s) and Doppler scaling factor."""

    delay_tau: float
    doppler_a: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.delay_tau, self.doppler_a)


@dataclass(frozen=True)
class PathArrival:
    """A path's contribution to one channel block."""

    label: int
    amplitude: float
    state: PathState


@dataclass(frozen=True)
class ChannelSnapshot:
    """Ground-truth channel for one block: arrivals plus the range they share."""

    epoch_k: int
    horizontal_range_d1: float
    paths: tuple[PathArrival, ...] = field(default_factory=tuple)

    @property
    def path_count(self) -> int:
        return len(self.paths)

    def states(self) -> list[PathState]:
        return [p.state for p in self.paths]


def enumerate_paths(cfg: ScenarioConfig) -> list[PathSpec]:
    """Direct path plus all alternating image-source paths up to max_reflections bounces.

    Unfolded depth for an n-bounce signature: first leg to the first boundary,
    n-1 full water-column crossings, last leg back from the final boundary.
    """
    h10, h20 = cfg.receiver_depth_h10, cfg.bottom_clearance_h20
    column = h10 + h20
    leg = {SURFACE: h10, BOTTOM: h20}
    gain = {SURFACE: cfg.surface_loss, BOTTOM: cfg.bottom_loss}

    specs = [PathSpec(reflection_signature=(), equivalent_depth_d2=0.0, label=0)]
    label = 1
    for bounces in range(1, cfg.max_reflections + 1):
        for first in (SURFACE, BOTTOM):
            sig = tuple(
                first if i % 2 == 0 else (BOTTOM if first == SURFACE else SURFACE)
                for i in range(bounces)
            )
            d2 = leg[sig[0]] + (bounces - 1) * column + leg[sig[-1]]
            g = math.prod(gain[b] for b in sig)
            specs.append(PathSpec(sig, d2, label, boundary_gain=g))
            label += 1
    return specs


def path_params(d1: float, spec: PathSpec, cfg: ScenarioConfig) -> PathState:
    """Delay and Doppler scaling factor of a path at horizontal range d1."""
    if d1 <= 0:
        raise ValueError(f"horizontal range must be positive, got {d1}")
    c, v = cfg.sound_speed_c, cfg.relative_speed_v
    tau = math.hypot(d1, spec.equivalent_depth_d2) / c
    a = v * d1 / (c * c * tau)
    return PathState(delay_tau=tau, doppler_a=a)


def invert_params(state: PathState, cfg: ScenarioConfig) -> tuple[float, float]:
    """Recover (D1, D2) from a path state. Undefined for v = 0."""
    v, c = cfg.relative_speed_v, cfg.sound_speed_c
    if v == 0.0:
        raise InversionUndefinedError("D1 is not recoverable from a = 0 when v = 0")
    tau, a = state.delay_tau, state.doppler_a
    d1 = c * c * tau * a / v
    rad = (c * tau) ** 2 - (c * c * tau * a / v) ** 2
    if rad < 0:
        if rad < -1e-12 * (c * tau) ** 2:
            raise ValueError("state violates |a| <= |v|/c, no real geometry exists")
        rad = 0.0
    return d1, math.sqrt(rad)


def amplitude_of(path_length: float, cfg: ScenarioConfig) -> float:
    """Spreading amplitude, power loss ~ d^beta, direct path at initial range = 1."""
    if path_length <= 0:
        raise ValueError(f"path length must be positive, got {path_length}")
    return (path_length / cfg.initial_range_dsr) ** (-cfg.spreading_exponent_beta / 2.0)


def _snapshot_at(d1: float, epoch: int, specs: list[PathSpec], cfg: ScenarioConfig) -> ChannelSnapshot:
    states = [path_params(d1, s, cfg) for s in specs]
    if cfg.doppler_spread_scale != 1.0 and states:
        mean_a = sum(st.doppler_a for st in states) / len(states)
        states = [
            replace(st, doppler_a=mean_a + cfg.doppler_spread_scale * (st.doppler_a - mean_a))
            for st in states
        ]
    arrivals = tuple(
        PathArrival(
            label=s.label,
            amplitude=s.boundary_gain * amplitude_of(st.delay_tau * cfg.sound_speed_c, cfg),
            state=st,
        )
        for s, st in zip(specs, states)
    )
    return ChannelSnapshot(epoch_k=epoch, horizontal_range_d1=d1, paths=arrivals)


def initial_snapshot(cfg: ScenarioConfig) -> ChannelSnapshot:
    """Ground-truth channel at epoch 1, range = initial_range_dsr."""
    return _snapshot_at(cfg.initial_range_dsr, 1, enumerate_paths(cfg), cfg)


def evolve_snapshot(snap: ChannelSnapshot, cfg: ScenarioConfig) -> ChannelSnapshot:
    """Advance the channel one block: D1 -> D1 - v*T, recompute every path."""
    d1 = snap.horizontal_range_d1 - cfg.relative_speed_v * cfg.block_length_t
    if d1 <= 0:
        raise ValueError("range closed through zero; scenario ill-posed beyond this epoch")
    return _snapshot_at(d1, snap.epoch_k + 1, enumerate_paths(cfg), cfg)


def truth_trajectory(cfg: ScenarioConfig, epochs: int) -> list[ChannelSnapshot]:
    """Snapshots for epochs 1..epochs."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    snaps = [initial_snapshot(cfg)]
    while len(snaps) < epochs:
        snaps.append(evolve_snapshot(snaps[-1], cfg))
    return snaps


def write_truth_csv(snapshots: list[ChannelSnapshot], path) -> None:
    """Dump ground-truth trajectories: epoch,path_label,tau_s,doppler,amplitude."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "path_label", "tau_s", "doppler", "amplitude"])
        for snap in snapshots:
            for p in snap.paths:
                w.writerow([
                    snap.epoch_k,
                    p.label,
                    f"{p.state.delay_tau:.12g}",
                    f"{p.state.doppler_a:.12g}",
                    f"{p.amplitude:.12g}",
                ])
