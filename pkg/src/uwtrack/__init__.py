"""uwtrack: doubly-spread underwater acoustic channel simulation, multi-
Bernoulli path tracking, and path-specific passive time-reversal mirrors."""

from .geometry import (ChannelSnapshot, PathArrival, PathSpec, PathState,
                       ScenarioConfig, enumerate_paths, evolve_snapshot,
                       initial_snapshot, invert_params, path_params,
                       truth_trajectory)
from .harness import ExperimentPlan, RunReport, compare_baselines, load_plan, run
from .measure import (ClutterModel, Measurement, MeasurementSet,
                      extract_measurements, ingest_measurements,
                      synth_measurements)
from .metrics import OspaParams, StateScaler, ospa, per_path_mse
from .ptrm import (QFunctionProfile, TrackedChannel, conventional_ptrm,
                   ps_ptrm, psc_ptrm, q_profile)
from .receiver import DfeConfig, ber, demodulate, rls_dfe
from .tracker import (MBComponent, MBDensity, TrackerConfig, predict_state,
                      track_step, transition_jacobian)
from .waveform import Frame, PassbandSignal, SignalParams, apply_channel, build_frame, gen_hfm

__version__ = "0.1.0"
