import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from uwtrack.geometry import ScenarioConfig
from uwtrack.measure import ClutterModel, default_clutter
from uwtrack.tracker import TrackerConfig
from uwtrack.waveform import SignalParams


@pytest.fixture
def scenario_sim() -> ScenarioConfig:
    """Shallow-water simulation scenario: 50/100 m boundaries, 500 m range,
    5 m/s opening, 1 s blocks."""
    return ScenarioConfig(receiver_depth_h10=50.0, bottom_clearance_h20=100.0,
                          initial_range_dsr=500.0, relative_speed_v=-5.0,
                          sound_speed_c=1500.0, block_length_t=1.0,
                          spreading_exponent_beta=1.5, max_reflections=2)


@pytest.fixture
def signal_sim() -> SignalParams:
    return SignalParams(carrier_fc=5000.0, sample_rate_fs=50000.0,
                        probe_length_tg=0.1, probe_bandwidth=4000.0,
                        symbol_rate_rs=2000.0, modulation="BPSK")


def make_tracker_cfg(scenario: ScenarioConfig, epochs: int = 25, clutter_rate: float = 2.0,
                     p_detect: float = 0.9, **overrides) -> TrackerConfig:
    """Experiment-profile tracker constants over the scenario's window."""
    clutter = default_clutter(scenario, epochs, clutter_rate)
    base = dict(p_survival=0.999, p_detect=p_detect, clutter=clutter,
                q_process=np.diag([1e-4, 1e-6]), r_meas=np.diag([1e-5, 1e-6]),
                birth_weight_wb=0.1, birth_cov_pb=np.diag([1e-4, 1e-6]),
                num_particles_m=200, prune_tau_p=1e-4, confirm_tau_c=0.75,
                exist_tau_e=0.25, gate_radius=4.0)
    base.update(overrides)
    return TrackerConfig(**base)


@pytest.fixture
def tracker_cfg(scenario_sim) -> TrackerConfig:
    return make_tracker_cfg(scenario_sim)


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
