"""Experiment runner: plans, seeded Monte Carlo sweeps, method comparison.

A plan is a TOML file with [scenario], [signal], [tracker], [dfe], [metrics]
and [plan] tables whose keys mirror the config dataclass fields. run()
executes trials (optionally across a process pool), each trial walking the
full pipeline per epoch: ground truth -> frame -> channel -> measurements ->
tracking -> one mirror+DFE chain per configured method -> metrics. All
randomness flows from one seed through per-trial child sequences, so reruns
are byte-identical.
"""

from __future__ import annotations

import math
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import measure, metrics, ptrm, receiver, tracker, waveform
from .geometry import ChannelSnapshot, ScenarioConfig, truth_trajectory, write_truth_csv
from .measure import ClutterModel, MeasurementSet, default_clutter
from .metrics import MseSeries, OspaParams, StateScaler
from .ptrm import TrackedChannel
from .receiver import DfeConfig
from .tracker import TrackerConfig
from .waveform import Frame, PassbandSignal, SignalParams

METHODS = ("LS-cPTRM", "measurement-cPTRM", "PS-PTRM", "PSC-PTRM")
SOURCES = ("synthetic", "waveform", "file")


class PlanError(ValueError):
    """Plan validation failure; message lists offending field paths."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid plan:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class MetricsConfig:
    ospa: OspaParams = field(default_factory=OspaParams)
    scaler: StateScaler = field(default_factory=StateScaler)
    # per-path MSE assignment may use noise-normalized scales so that rare
    # far-off estimates count as misses instead of polluting squared errors
    label_ospa: OspaParams | None = None
    label_scaler: StateScaler | None = None

    @property
    def labeling(self) -> tuple[OspaParams, StateScaler]:
        return (self.label_ospa or self.ospa, self.label_scaler or self.scaler)


@dataclass(frozen=True)
class ExperimentPlan:
    scenario: ScenarioConfig
    signal: SignalParams | None
    tracker_cfg: TrackerConfig
    tracker_scenario: ScenarioConfig      # what the tracker assumes (v may differ)
    dfe: DfeConfig
    metrics_cfg: MetricsConfig
    methods: tuple[str, ...]
    epochs: int
    trials: int
    seed: int
    measurement_source: str
    measurement_file: str | None = None
    snr_db: float | None = 5.0
    payload_symbols: int = 400
    doppler_grid_step: float = 1e-4
    extraction_threshold_db: float = 12.0
    measurement_noise: np.ndarray | None = None  # synthetic generator covariance;
                                                 # None = the tracker's assumed R
    source_path: str | None = None

    @property
    def generator_noise(self) -> np.ndarray:
        return self.measurement_noise if self.measurement_noise is not None \
            else self.tracker_cfg.r_meas

    @property
    def needs_waveform(self) -> bool:
        return bool(self.methods) or self.measurement_source == "waveform"


def _build_section(cls, table: dict, path: str, problems: list, **extra):
    try:
        return cls(**{**table, **extra})
    except TypeError as exc:
        problems.append(f"{path}: {exc}")
    except ValueError as exc:
        problems.append(f"{path}: {exc}")
    return None


def _as_cov(value, path: str, problems: list) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == (2,):
        return np.diag(arr)
    if arr.shape == (2, 2):
        return arr
    problems.append(f"{path}: expected a 2-vector diagonal or 2x2 matrix")
    return np.eye(2)


def plan_from_dict(data: dict, source_path: str | None = None) -> ExperimentPlan:
    problems: list[str] = []

    scenario = _build_section(ScenarioConfig, data.get("scenario", {}), "scenario", problems)
    if scenario is None:
        raise PlanError(problems or ["scenario: missing"])

    signal = None
    if "signal" in data:
        signal = _build_section(SignalParams, data["signal"], "signal", problems)

    plan_tbl = dict(data.get("plan", {}))
    epochs = int(plan_tbl.pop("epochs", 25))
    trials = int(plan_tbl.pop("trials", 1))
    seed = int(plan_tbl.pop("seed", 0))
    methods = tuple(plan_tbl.pop("methods", ()))
    source = plan_tbl.pop("measurement_source", "synthetic")
    meas_file = plan_tbl.pop("measurement_file", None)
    snr_db = plan_tbl.pop("snr_db", 5.0)
    payload_symbols = int(plan_tbl.pop("payload_symbols", 400))
    grid_step = float(plan_tbl.pop("doppler_grid_step", 1e-4))
    thr_db = float(plan_tbl.pop("extraction_threshold_db", 12.0))
    meas_noise = plan_tbl.pop("measurement_noise", None)
    if meas_noise is not None:
        meas_noise = _as_cov(meas_noise, "plan.measurement_noise", problems)
    for key in plan_tbl:
        problems.append(f"plan.{key}: unknown key")

    if trials < 1:
        problems.append("plan.trials: must be >= 1")
    if epochs < 1:
        problems.append("plan.epochs: must be >= 1")
    if source not in SOURCES:
        problems.append(f"plan.measurement_source: {source!r} not one of {SOURCES}")
    if source == "file" and not meas_file:
        problems.append("plan.measurement_file: required when measurement_source is 'file'")
    for m in methods:
        if m not in METHODS:
            problems.append(f"plan.methods: unknown method {m!r}")
    if (methods or source == "waveform") and signal is None:
        problems.append("signal: required when methods are configured or source is 'waveform'")

    tracker_tbl = dict(data.get("tracker", {}))
    clutter_rate = float(tracker_tbl.pop("clutter_rate", 2.0))
    assumed_v = tracker_tbl.pop("assumed_speed_v", None)
    for key in ("q_process", "r_meas", "birth_cov_pb"):
        if key in tracker_tbl:
            tracker_tbl[key] = _as_cov(tracker_tbl[key], f"tracker.{key}", problems)
    tracker_tbl.setdefault("p_survival", 0.999)
    tracker_tbl.setdefault("p_detect", 0.9)
    tracker_tbl.setdefault("q_process", np.diag([1e-4, 1e-6]))
    tracker_tbl.setdefault("r_meas", np.diag([1e-5, 1e-6]))

    tracker_cfg = None
    if not problems:
        clutter = default_clutter(scenario, epochs, clutter_rate)
        tracker_cfg = _build_section(TrackerConfig, tracker_tbl, "tracker", problems,
                                     clutter=clutter)
    if tracker_cfg is None:
        raise PlanError(problems)

    tracker_scenario = scenario if assumed_v is None else replace(
        scenario, relative_speed_v=float(assumed_v))

    dfe = _build_section(DfeConfig, data.get("dfe", {}), "dfe", problems) or DfeConfig()

    m_tbl = data.get("metrics", {})
    ospa_params = _build_section(
        OspaParams, {k: m_tbl[k] for k in ("cutoff_c", "order_p") if k in m_tbl},
        "metrics", problems) or OspaParams()
    scaler = _build_section(
        StateScaler, {k: m_tbl[k] for k in ("tau_scale", "doppler_scale") if k in m_tbl},
        "metrics", problems) or StateScaler()
    label_ospa = label_scaler = None
    if "label_cutoff_c" in m_tbl:
        label_ospa = _build_section(OspaParams, {"cutoff_c": m_tbl["label_cutoff_c"],
                                                 "order_p": m_tbl.get("order_p", 2.0)},
                                    "metrics.label_cutoff_c", problems)
    if "label_tau_scale" in m_tbl or "label_doppler_scale" in m_tbl:
        label_scaler = _build_section(
            StateScaler, {"tau_scale": m_tbl.get("label_tau_scale", scaler.tau_scale),
                          "doppler_scale": m_tbl.get("label_doppler_scale", scaler.doppler_scale)},
            "metrics.label_scale", problems)

    if problems:
        raise PlanError(problems)

    return ExperimentPlan(scenario=scenario, signal=signal, tracker_cfg=tracker_cfg,
                          tracker_scenario=tracker_scenario, dfe=dfe,
                          metrics_cfg=MetricsConfig(ospa_params, scaler, label_ospa, label_scaler),
                          methods=methods, epochs=epochs, trials=trials, seed=seed,
                          measurement_source=source, measurement_file=meas_file,
                          snr_db=snr_db, payload_symbols=payload_symbols,
                          doppler_grid_step=grid_step, extraction_threshold_db=thr_db,
                          measurement_noise=meas_noise, source_path=source_path)


def load_plan(path) -> ExperimentPlan:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return plan_from_dict(data, source_path=str(path))


# --- per-trial pipeline --------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    ospa_tracked: np.ndarray
    ospa_meas: np.ndarray
    nhat: np.ndarray
    est_sets: list
    meas_sets: list
    ber: dict
    mse_db: dict
    diverged: int
    tracks_rows: list
    error: str | None = None


def _doppler_grid(plan: ExperimentPlan) -> np.ndarray:
    lo, hi = plan.tracker_cfg.clutter.doppler_window
    return np.arange(lo, hi + plan.doppler_grid_step / 2, plan.doppler_grid_step)


def _tracked_channel(state: tracker.TrackerState, cfg: TrackerConfig, epoch: int,
                     mset: MeasurementSet) -> TrackedChannel:
    """Existing confirmed tracks; bootstrap from raw measurements before any
    track has confirmed (the mirrors need some channel from frame one)."""
    triplets = []
    for comp in state.density.components:
        if comp.confirmed and comp.weight > cfg.exist_tau_e and comp.mean[0] > 0:
            amp = comp.amplitude if comp.amplitude is not None else 1.0
            triplets.append((amp, float(comp.mean[0]), float(comp.mean[1])))
    if not triplets:
        for m in mset.items:
            if m.delay_tau_tilde > 0:
                amp = m.amplitude_est if m.amplitude_est is not None else 1.0
                triplets.append((amp, m.delay_tau_tilde, m.doppler_a_tilde))
    return TrackedChannel.from_triplets(epoch, triplets)


def _measurement_channel(mset: MeasurementSet, epoch: int) -> TrackedChannel:
    triplets = [(m.amplitude_est if m.amplitude_est is not None else 1.0,
                 m.delay_tau_tilde, m.doppler_a_tilde)
                for m in mset.items if m.delay_tau_tilde > 0]
    return TrackedChannel.from_triplets(epoch, triplets)


def _data_window(frame: Frame, margin: float = 0.1) -> tuple[float, float]:
    seg = frame.segment("data")
    fs = frame.sample_rate
    return (seg.start / fs - margin, (seg.start + seg.length) / fs + margin)


def _equalize(method: str, y: PassbandSignal, frame: Frame, mset: MeasurementSet,
              ch: TrackedChannel, snap: ChannelSnapshot, plan: ExperimentPlan) -> PassbandSignal:
    window = _data_window(frame)
    fs = plan.signal.sample_rate_fs
    if method == "PS-PTRM":
        return ptrm.ps_ptrm(y, ch, out_window=window)
    if method == "PSC-PTRM":
        return ptrm.psc_ptrm(y, ch, out_window=window)
    if method == "measurement-cPTRM":
        ch_meas = _measurement_channel(mset, snap.epoch_k)
        if ch_meas.path_count == 0:
            return PassbandSignal(np.zeros(len(y.samples)), fs, t0=y.t0)
        weights = np.maximum(ch_meas.amplitudes, 1e-6)
        a_glob = float(np.sum(weights * ch_meas.dopplers) / np.sum(weights))
        y_c = ptrm.global_doppler_compensate(y, a_glob)
        cir = ptrm.cir_from_triplets(ch_meas, fs, global_doppler=a_glob)
        return ptrm.conventional_ptrm(y_c, cir)
    if method == "LS-cPTRM":
        a_glob = measure.estimate_global_doppler(y, plan.signal, frame)
        y_c = ptrm.global_doppler_compensate(y, a_glob)
        # no tracking: the LS fit only gets the static surveillance prior
        delay_window = plan.tracker_cfg.clutter.tau_window
        probe = waveform.gen_hfm(plan.signal, "up").samples
        o_up = frame.segment("probe_up").start / fs
        cir = ptrm.ls_cir_estimate(y_c, probe, o_up, delay_window)
        return ptrm.conventional_ptrm(y_c, cir)
    raise ValueError(f"unknown method {method!r}")


def _crop(z: PassbandSignal, window: tuple[float, float]) -> PassbandSignal:
    fs = z.sample_rate
    k0 = max(0, int(math.floor((window[0] - z.t0) * fs)))
    k1 = min(len(z.samples), int(math.ceil((window[1] - z.t0) * fs)))
    return PassbandSignal(z.samples[k0:k1], fs, t0=z.t0 + k0 / fs)


def run_trial(plan: ExperimentPlan, truth: list[ChannelSnapshot],
              file_sets, trial_idx: int, seed_seq) -> TrialResult:
    rng = np.random.default_rng(seed_seq)
    cfg = plan.tracker_cfg
    state = tracker.init_state()
    grid = _doppler_grid(plan) if plan.measurement_source == "waveform" else None

    n_ep = plan.epochs
    res = TrialResult(
        trial=trial_idx,
        ospa_tracked=np.zeros(n_ep), ospa_meas=np.zeros(n_ep),
        nhat=np.zeros(n_ep, dtype=int), est_sets=[], meas_sets=[],
        ber={m: np.full(n_ep, np.nan) for m in plan.methods},
        mse_db={m: np.full(n_ep, np.nan) for m in plan.methods},
        diverged=0, tracks_rows=[])

    try:
        for k, snap in enumerate(truth, start=1):
            frame = y = None
            train_syms = payload = None
            if plan.needs_waveform:
                n_data = plan.dfe.training_length + plan.payload_symbols
                bits, train_syms, payload = receiver.frame_bits(
                    plan.signal, plan.payload_symbols, plan.dfe.training_length, rng)
                frame = waveform.build_frame(plan.signal, bits)
                y = waveform.apply_channel(frame.signal, snap, plan.snr_db, rng)

            if plan.measurement_source == "synthetic":
                mset = measure.synth_measurements(snap, cfg.p_detect, cfg.clutter,
                                                  plan.generator_noise, rng)
            elif plan.measurement_source == "waveform":
                mset = measure.extract_measurements(y, plan.signal, frame, grid,
                                                    plan.extraction_threshold_db, epoch=k)
            else:
                mset = file_sets[k - 1] if k - 1 < len(file_sets) else MeasurementSet(k)

            step = tracker.track_step(state, mset, cfg, plan.tracker_scenario, rng)
            state = step.state

            truth_states = [p.state for p in snap.paths]
            res.ospa_tracked[k - 1] = metrics.ospa(step.estimates, truth_states,
                                                   plan.metrics_cfg.ospa, plan.metrics_cfg.scaler)
            res.ospa_meas[k - 1] = metrics.ospa(mset.as_array(), truth_states,
                                                plan.metrics_cfg.ospa, plan.metrics_cfg.scaler)
            res.nhat[k - 1] = step.n_hat
            res.est_sets.append(metrics.as_state_array(step.estimates))
            res.meas_sets.append(mset.as_array())

            if trial_idx == 0:
                for comp in state.density.components:
                    existing = comp.confirmed and comp.weight > cfg.exist_tau_e
                    res.tracks_rows.append(
                        (k, comp.track_id, comp.weight, comp.mean[0], comp.mean[1],
                         comp.cov[0, 0], comp.cov[0, 1], comp.cov[1, 1],
                         int(comp.confirmed), int(existing)))

            if plan.methods:
                ch = _tracked_channel(state, cfg, k, mset)
                window = _data_window(frame)
                cache: dict[str, tuple[float, float, bool]] = {}
                for m in plan.methods:
                    if m not in cache:
                        z = _equalize(m, y, frame, mset, ch, snap, plan)
                        soft = receiver.demodulate(_crop(z, window), plan.signal,
                                                   frame, oversample=2)
                        out = receiver.rls_dfe(soft, plan.dfe, train_syms,
                                               plan.signal.modulation, payload_bits=payload)
                        post = out.mse_db[plan.dfe.training_length:]
                        cache[m] = (out.ber_payload,
                                    float(np.mean(post)) if len(post) else math.nan,
                                    out.diverged)
                    b, msedb, div = cache[m]
                    res.ber[m][k - 1] = b
                    res.mse_db[m][k - 1] = msedb
                    res.diverged += int(div)
    except Exception as exc:  # crash isolation: a failing trial never kills the run
        res.error = f"{type(exc).__name__}: {exc}"
    return res


# --- aggregation ----------------------------------------------------------------

@dataclass
class RunReport:
    plan: ExperimentPlan
    ospa_tracked: np.ndarray       # (trials_ok, epochs)
    ospa_meas: np.ndarray
    nhat: np.ndarray
    tracked_doppler_mean: np.ndarray
    mse_tracked: MseSeries
    mse_meas: MseSeries
    ber: dict
    mse_db: dict
    failures: list
    elapsed_s: float
    tracks_rows: list
    truth: list

    @property
    def trials_completed(self) -> int:
        return self.ospa_tracked.shape[0]

    def ber_mean(self, method: str) -> np.ndarray:
        return np.nanmean(self.ber[method], axis=0)

    def ber_overall(self, method: str) -> float:
        return float(np.nanmean(self.ber[method]))


def run(plan: ExperimentPlan, threads: int = 1, out_dir=None) -> RunReport:
    t_start = time.perf_counter()
    truth = truth_trajectory(plan.scenario, plan.epochs)
    file_sets = []
    if plan.measurement_source == "file":
        file_sets = measure.ingest_measurements(plan.measurement_file)
        if len(file_sets) < plan.epochs:
            raise PlanError([f"plan.measurement_file: {len(file_sets)} epochs in file, "
                             f"plan needs {plan.epochs}"])

    seeds = np.random.SeedSequence(plan.seed).spawn(plan.trials)
    results: list[TrialResult | None] = [None] * plan.trials
    if threads > 1 and plan.trials > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(run_trial, plan, truth, file_sets, t, seeds[t]): t
                    for t in range(plan.trials)}
            for fut in futs:
                results[futs[fut]] = fut.result()
    else:
        for t in range(plan.trials):
            results[t] = run_trial(plan, truth, file_sets, t, seeds[t])

    ok = [r for r in results if r.error is None]
    failures = [(r.trial, r.error) for r in results if r.error is not None]
    if not ok:
        raise RuntimeError(f"all {plan.trials} trials failed; first: {failures[0][1]}")

    truth_sets = [np.array([[p.state.delay_tau, p.state.doppler_a] for p in s.paths])
                  for s in truth]
    label_params, label_scaler = plan.metrics_cfg.labeling
    mse_tracked = metrics.per_path_mse([r.est_sets for r in ok], truth_sets,
                                       label_params, label_scaler)
    mse_meas = metrics.per_path_mse([r.meas_sets for r in ok], truth_sets,
                                    label_params, label_scaler)

    doppler_mean = np.full(plan.epochs, np.nan)
    for k in range(plan.epochs):
        vals = np.concatenate([r.est_sets[k][:, 1] for r in ok if len(r.est_sets[k])] or
                              [np.empty(0)])
        if len(vals):
            doppler_mean[k] = float(np.mean(vals))

    report = RunReport(
        plan=plan,
        ospa_tracked=np.vstack([r.ospa_tracked for r in ok]),
        ospa_meas=np.vstack([r.ospa_meas for r in ok]),
        nhat=np.vstack([r.nhat for r in ok]),
        tracked_doppler_mean=doppler_mean,
        mse_tracked=mse_tracked, mse_meas=mse_meas,
        ber={m: np.vstack([r.ber[m] for r in ok]) for m in plan.methods},
        mse_db={m: np.vstack([r.mse_db[m] for r in ok]) for m in plan.methods},
        failures=failures,
        elapsed_s=time.perf_counter() - t_start,
        tracks_rows=(results[0].tracks_rows if results[0] and results[0].error is None else []),
        truth=truth)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


@dataclass
class BaselineTable:
    methods: tuple
    per_epoch: dict       # method -> (epochs,) mean BER
    overall: dict         # method -> scalar mean BER

    def ordered(self) -> list:
        return sorted(self.overall.items(), key=lambda kv: kv[1])


def compare_baselines(plan: ExperimentPlan, threads: int = 1, out_dir=None) -> tuple[RunReport, BaselineTable]:
    if len(plan.methods) < 2:
        raise PlanError(["plan.methods: compare needs at least two methods"])
    report = run(plan, threads=threads, out_dir=out_dir)
    table = BaselineTable(
        methods=plan.methods,
        per_epoch={m: report.ber_mean(m) for m in plan.methods},
        overall={m: report.ber_overall(m) for m in plan.methods})
    if out_dir is not None:
        _write_compare_csv(table, Path(out_dir) / "compare.csv")
    return report, table


# --- output ----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.12g}" if isinstance(x, float) else str(x)


def write_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = report.plan

    if plan.source_path and Path(plan.source_path).exists():
        shutil.copy(plan.source_path, out / "plan.toml")

    write_truth_csv(report.truth, out / "truth.csv")

    with open(out / "metrics.csv", "w") as fh:
        fh.write("epoch,metric,source,value,trials\n")
        n = report.trials_completed
        for k in range(plan.epochs):
            rows = [
                ("ospa", "tracked", float(np.mean(report.ospa_tracked[:, k]))),
                ("ospa", "measurements", float(np.mean(report.ospa_meas[:, k]))),
                ("mse_tau", "tracked", float(report.mse_tracked.mse_tau[k])),
                ("mse_tau", "measurements", float(report.mse_meas.mse_tau[k])),
                ("mse_doppler", "tracked", float(report.mse_tracked.mse_doppler[k])),
                ("mse_doppler", "measurements", float(report.mse_meas.mse_doppler[k])),
                ("n_hat", "tracked", float(np.mean(report.nhat[:, k]))),
            ]
            for metric, source, value in rows:
                fh.write(f"{k + 1},{metric},{source},{_fmt(value)},{n}\n")

    if plan.methods:
        with open(out / "ber.csv", "w") as fh:
            fh.write("frame,epoch,method,ber,mse_db\n")
            for t in range(report.trials_completed):
                for k in range(plan.epochs):
                    for m in plan.methods:
                        fh.write(f"{t},{k + 1},{m},{_fmt(float(report.ber[m][t, k]))},"
                                 f"{_fmt(float(report.mse_db[m][t, k]))}\n")

    with open(out / "tracks.csv", "w") as fh:
        fh.write("epoch,track_id,weight,tau_s,doppler,P11,P12,P22,confirmed,existing\n")
        for row in report.tracks_rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")

    with open(out / "summary.txt", "w") as fh:
        fh.write(f"epochs={plan.epochs} trials={plan.trials} "
                 f"completed={report.trials_completed} seed={plan.seed}\n")
        fh.write(f"measurement_source={plan.measurement_source}\n")
        fh.write(f"elapsed_s={report.elapsed_s:.1f}\n")
        fh.write(f"mean_ospa_tracked={_fmt(float(np.mean(report.ospa_tracked)))}\n")
        fh.write(f"mean_ospa_measurements={_fmt(float(np.mean(report.ospa_meas)))}\n")
        for m in plan.methods:
            fh.write(f"ber[{m}]={_fmt(report.ber_overall(m))}\n")
        for t, msg in report.failures:
            fh.write(f"trial_failure[{t}]={msg}\n")


def _write_compare_csv(table: BaselineTable, path) -> None:
    with open(path, "w") as fh:
        fh.write("method,epoch,ber\n")
        for m in table.methods:
            for k, v in enumerate(table.per_epoch[m], start=1):
                fh.write(f"{m},{k},{_fmt(float(v))}\n")
            fh.write(f"{m},mean,{_fmt(table.overall[m])}\n")


def track_file(plan: ExperimentPlan, measurements_path, out_dir=None):
    """Run the tracker over an ingested measurement CSV; returns step results."""
    sets = measure.ingest_measurements(measurements_path)
    rng = np.random.default_rng(np.random.SeedSequence(plan.seed))
    steps = tracker.run_tracker(sets, plan.tracker_cfg, plan.tracker_scenario, rng)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "tracks.csv", "w") as fh:
            fh.write("epoch,track_id,weight,tau_s,doppler,P11,P12,P22,confirmed,existing\n")
            for mset, step in zip(sets, steps):
                for comp in step.state.density.components:
                    existing = comp.confirmed and comp.weight > plan.tracker_cfg.exist_tau_e
                    row = (mset.epoch_k, comp.track_id, comp.weight, comp.mean[0],
                           comp.mean[1], comp.cov[0, 0], comp.cov[0, 1], comp.cov[1, 1],
                           int(comp.confirmed), int(existing))
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
    return steps


def q_profiles(plan: ExperimentPlan, epoch: int = 1, out_dir=None) -> dict:
    """Exact-parameter q-profiles of the three mirrors at one epoch."""
    if plan.signal is None:
        raise PlanError(["signal: required for qprofile"])
    snaps = truth_trajectory(plan.scenario, epoch)
    ch = TrackedChannel.from_snapshot(snaps[epoch - 1])
    probe = waveform.gen_hfm(plan.signal, "up")
    profiles = {}
    for mode in ("conventional", "ps", "psc"):
        profiles[mode] = ptrm.q_profile(ch, ch, probe, mode)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for mode, prof in profiles.items():
            ptrm.write_q_csv(prof, out / f"qprofile_{mode}.csv")
        with open(out / "qprofile_summary.txt", "w") as fh:
            for mode, prof in profiles.items():
                fh.write(f"{mode}: peak={prof.mainlobe_peak:.6g} at lag "
                         f"{prof.peak_lag:.6g}s, max_sidelobe={prof.max_sidelobe:.6g}, "
                         f"focusing_ratio={prof.focusing_ratio:.6g}\n")
    return profiles
