"""Passive time-reversal mirrors for doubly-spread channels.

conventional_ptrm convolves with a flipped static CIR estimate: right for
time-invariant multipath, defocused once paths carry distinct Doppler.
ps_ptrm rebuilds the mirror path by path from tracked (A, tau, a) triplets,
each branch advancing by tau and rescaling time by (1 - a). psc_ptrm first
replaces each triplet by its compensated pair tau/(1+a), a/(1+a), which
collapses the mirror mainlobe of every path onto lag zero.

All mirrors keep the output causal by advancing t0 by the largest tracked
delay; downstream consumers align through t0 alone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, hilbert

from .geometry import ChannelSnapshot, PathArrival, PathState
from .waveform import PassbandSignal, apply_channel, place_impulse, resample_linear_map


class InvalidDopplerError(ValueError):
    """A tracked Doppler factor a <= -1 leaves no valid compensation."""


@dataclass(frozen=True)
class TrackedChannel:
    """Per-epoch tracked channel: (amplitude, delay, doppler) triplets."""

    epoch_k: int
    amplitudes: np.ndarray
    delays: np.ndarray
    dopplers: np.ndarray

    def __post_init__(self):
        for name in ("amplitudes", "delays", "dopplers"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (len(self.amplitudes) == len(self.delays) == len(self.dopplers)):
            raise ValueError("triplet arrays must have equal length")
        if np.any(self.delays <= 0):
            raise ValueError("tracked delays must be positive")

    @property
    def path_count(self) -> int:
        return len(self.delays)

    @classmethod
    def from_triplets(cls, epoch: int, triplets) -> "TrackedChannel":
        triplets = list(triplets)
        if not triplets:
            return cls(epoch, np.empty(0), np.empty(0), np.empty(0))
        arr = np.array([[a, t, d] for a, t, d in triplets], dtype=float)
        return cls(epoch, arr[:, 0], arr[:, 1], arr[:, 2])

    @classmethod
    def from_snapshot(cls, snap: ChannelSnapshot) -> "TrackedChannel":
        return cls.from_triplets(snap.epoch_k, [
            (p.amplitude, p.state.delay_tau, p.state.doppler_a) for p in snap.paths])

    def to_snapshot(self) -> ChannelSnapshot:
        paths = tuple(
            PathArrival(label=i, amplitude=float(a),
                        state=PathState(delay_tau=float(t), doppler_a=float(d)))
            for i, (a, t, d) in enumerate(zip(self.amplitudes, self.delays, self.dopplers)))
        return ChannelSnapshot(epoch_k=self.epoch_k, horizontal_range_d1=0.0, paths=paths)


@dataclass(frozen=True)
class QFunctionProfile:
    """Mirror focusing diagnostic: normalized cross-correlation over lag."""

    lags: np.ndarray          # s, 0 = perfect alignment
    magnitude: np.ndarray     # normalized so a unit static path peaks at 1
    mainlobe_peak: float
    peak_lag: float
    max_sidelobe: float

    @property
    def focusing_ratio(self) -> float:
        return self.mainlobe_peak / self.max_sidelobe if self.max_sidelobe > 0 else math.inf


def conventional_ptrm(y: PassbandSignal, cir_estimate: PassbandSignal) -> PassbandSignal:
    """Convolve with the time-flipped CIR estimate; q-peak maps to lag 0."""
    if len(cir_estimate.samples) >= len(y.samples):
        raise ValueError("CIR estimate must be shorter than the received signal")
    z = fftconvolve(y.samples, cir_estimate.samples[::-1])
    cir_end = cir_estimate.t0 + (len(cir_estimate.samples) - 1) / y.sample_rate
    return PassbandSignal(z, y.sample_rate, t0=y.t0 - cir_end)


def _branch_sum(y: PassbandSignal, ch: TrackedChannel,
                out_window: tuple[float, float] | None) -> PassbandSignal:
    fs = y.sample_rate
    tau_max = float(np.max(ch.delays))
    if out_window is None:
        t0_out = y.t0 - tau_max
        n_out = len(y.samples) + int(math.ceil(tau_max * fs)) + 1
    else:
        t0_out = min(out_window[0], y.t0 - tau_max)
        n_out = int(math.ceil((out_window[1] - t0_out) * fs)) + 1
    out = np.zeros(n_out)
    for amp, tau, a in zip(ch.amplitudes, ch.delays, ch.dopplers):
        # branch value z(t) = y((1 - a) t + tau)
        offset = ((1.0 - a) * t0_out + tau - y.t0) * fs
        step = 1.0 - a
        out += amp * resample_linear_map(y.samples, offset, step, n_out)
    return PassbandSignal(out, fs, t0=t0_out)


def ps_ptrm(y: PassbandSignal, ch: TrackedChannel,
            out_window: tuple[float, float] | None = None) -> PassbandSignal:
    """Path-specific mirror straight from the tracked triplets.

    out_window optionally restricts the computed output to a transmit-clock
    time span (the downstream consumer's region of interest).
    """
    if ch.path_count == 0:
        warnings.warn("empty tracked channel: mirror output is zero", stacklevel=2)
        return PassbandSignal(np.zeros(len(y.samples)), y.sample_rate, t0=y.t0)
    return _branch_sum(y, ch, out_window)


def psc_ptrm(y: PassbandSignal, ch: TrackedChannel,
             out_window: tuple[float, float] | None = None) -> PassbandSignal:
    """Path-specific mirror with per-path Doppler/delay compensation."""
    if ch.path_count == 0:
        warnings.warn("empty tracked channel: mirror output is zero", stacklevel=2)
        return PassbandSignal(np.zeros(len(y.samples)), y.sample_rate, t0=y.t0)
    if np.any(1.0 + ch.dopplers <= 0.0):
        raise InvalidDopplerError("tracked doppler <= -1 cannot be compensated")
    comp = TrackedChannel(ch.epoch_k, ch.amplitudes,
                          ch.delays / (1.0 + ch.dopplers),
                          ch.dopplers / (1.0 + ch.dopplers))
    return _branch_sum(y, comp, out_window)


def global_doppler_compensate(y: PassbandSignal, a_hat: float) -> PassbandSignal:
    """Undo one common time compression: out(t) = y(t / (1 + a_hat)).

    A path with scaling a carries x((1+a)t - tau); after compensation its
    content reads x((1+a)/(1+a_hat) t - tau), so at a_hat = a the delay axis
    returns to the transmit clock.
    """
    if 1.0 + a_hat <= 0.0:
        raise InvalidDopplerError("global doppler <= -1 cannot be compensated")
    fs = y.sample_rate
    n_out = int(math.floor(len(y.samples) * (1.0 + a_hat)))
    step = 1.0 / (1.0 + a_hat)
    offset = (y.t0 * step - y.t0) * fs  # keeps t0 meaning: out.t0 == y.t0
    out = resample_linear_map(y.samples, offset, step, n_out)
    return PassbandSignal(out, fs, t0=y.t0)


def cir_from_triplets(ch: TrackedChannel, sample_rate: float,
                      global_doppler: float = 0.0) -> PassbandSignal:
    """Static delta-train CIR on the arrival-time axis of a (compensated) signal."""
    arrivals = ch.delays / (1.0 + ch.dopplers) * (1.0 + global_doppler)
    n = int(math.ceil(np.max(arrivals) * sample_rate)) + 64
    buf = np.zeros(n)
    for amp, t_arr in zip(ch.amplitudes, arrivals):
        place_impulse(buf, t_arr * sample_rate, amp)
    return PassbandSignal(buf, sample_rate, t0=0.0)


def ls_cir_estimate(y: PassbandSignal, probe: np.ndarray, probe_offset_s: float,
                    delay_window: tuple[float, float], reg: float = 1e-3) -> PassbandSignal:
    """Least-squares CIR over a dense sample-spaced delay grid.

    Solves min_h ||y_seg - h * probe||^2 by Tikhonov-regularized spectral
    division of the segment where the probe's multipath arrivals live.
    """
    fs = y.sample_rate
    lo, hi = delay_window
    if hi <= lo:
        raise ValueError("delay window must have positive length")
    k0 = int(math.floor((probe_offset_s + lo - y.t0) * fs))
    k1 = int(math.ceil((probe_offset_s + hi - y.t0) * fs)) + len(probe)
    k0 = max(0, k0)
    k1 = min(len(y.samples), k1)
    seg = y.samples[k0:k1]
    n_fft = 1 << int(math.ceil(math.log2(max(len(seg) + len(probe), 2))))
    yf = np.fft.rfft(seg, n_fft)
    xf = np.fft.rfft(probe, n_fft)
    denom = np.abs(xf) ** 2
    hf = yf * np.conj(xf) / (denom + reg * float(np.mean(denom)))
    h = np.fft.irfft(hf, n_fft)
    n_keep = int(math.ceil((hi - lo) * fs)) + 1
    cir = h[:n_keep]
    t0 = k0 / fs + y.t0 - probe_offset_s
    return PassbandSignal(cir, fs, t0=t0)


def q_profile(ch_true: TrackedChannel, ch_hat: TrackedChannel, probe: PassbandSignal,
              mode: str) -> QFunctionProfile:
    """Push a probe through the true channel and the selected mirror, then
    cross-correlate with the probe itself. mode: conventional | ps | psc."""
    y = apply_channel(probe, ch_true.to_snapshot(), snr_db=None)
    if mode == "ps":
        z = ps_ptrm(y, ch_hat)
    elif mode == "psc":
        z = psc_ptrm(y, ch_hat)
    elif mode == "conventional":
        z = conventional_ptrm(y, cir_from_triplets(ch_hat, y.sample_rate))
    else:
        raise ValueError(f"unknown mirror mode {mode!r}")

    fs = probe.sample_rate
    ref = np.conj(hilbert(probe.samples))
    corr = np.abs(fftconvolve(z.samples, ref[::-1]))
    energy = float(np.sum(probe.samples ** 2))
    mag = corr / energy
    # index k corresponds to lag (k - (len(ref) - 1))/fs + (z.t0 - probe.t0)
    lags = (np.arange(len(corr)) - (len(ref) - 1)) / fs + (z.t0 - probe.t0)
    peak_idx = int(np.argmax(mag))
    lobe_halfwidth = 1.0 / _probe_bandwidth_estimate(probe)
    outside = np.abs(lags - lags[peak_idx]) > lobe_halfwidth
    max_side = float(np.max(mag[outside])) if np.any(outside) else 0.0
    return QFunctionProfile(lags=lags, magnitude=mag,
                            mainlobe_peak=float(mag[peak_idx]),
                            peak_lag=float(lags[peak_idx]),
                            max_sidelobe=max_side)


def _probe_bandwidth_estimate(probe: PassbandSignal) -> float:
    """RMS bandwidth of the probe, for a mainlobe-width estimate."""
    spec = np.abs(np.fft.rfft(probe.samples)) ** 2
    freqs = np.fft.rfftfreq(len(probe.samples), 1.0 / probe.sample_rate)
    mean_f = float(np.sum(freqs * spec) / np.sum(spec))
    var_f = float(np.sum((freqs - mean_f) ** 2 * spec) / np.sum(spec))
    return max(math.sqrt(var_f) * 2.0, probe.sample_rate / len(probe.samples))


def write_q_csv(profile: QFunctionProfile, path) -> None:
    with open(path, "w") as fh:
        fh.write("lag_s,magnitude\n")
        stride = max(1, len(profile.lags) // 20000)
        for k in range(0, len(profile.lags), stride):
            fh.write(f"{profile.lags[k]:.9g},{profile.magnitude[k]:.9g}\n")
