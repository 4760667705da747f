"""Post-mirror demodulation chain.

Coherent mix-down against the transmit clock, image-reject lowpass, RRC
matched filter, then a fractionally-spaced RLS decision-feedback equalizer
with a second-order decision-directed phase-locked loop. The DFE is the
only stateful, strictly sequential piece of the receive path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, firwin, kaiserord

from .waveform import (PassbandSignal, SignalParams, demap_symbols, map_bits,
                       rrc_taps, sample_fractional, slice_symbol)


class SyncError(ValueError):
    """Frame timing unavailable for demodulation."""


@dataclass(frozen=True)
class DfeConfig:
    feedforward_taps: int = 24
    feedback_taps: int = 12
    forgetting_lambda: float = 0.995
    training_length: int = 200
    pll_proportional: float = 0.05
    pll_integral: float = 2e-3
    rls_delta: float = 1e-2   # inverse initial tap covariance scale

    def __post_init__(self):
        if self.feedforward_taps < 1 or self.feedback_taps < 0:
            raise ValueError("need at least one feedforward tap")
        if not 0.0 < self.forgetting_lambda <= 1.0:
            raise ValueError("forgetting_lambda must lie in (0, 1]")
        if self.training_length < 0:
            raise ValueError("training_length must be >= 0")


@dataclass(frozen=True)
class DecisionRecord:
    index: int
    soft: complex
    decision: complex
    training: bool


@dataclass
class DfeResult:
    decisions: list[DecisionRecord]
    decided_bits: np.ndarray
    ber_payload: float | None
    mse_db: np.ndarray           # per-symbol error power, dB
    diverged: bool
    final_taps: np.ndarray | None = None


def _image_reject_lowpass(params: SignalParams) -> np.ndarray:
    fs = params.sample_rate_fs
    pass_edge = 1.1 * (1.0 + params.rrc_rolloff) * params.symbol_rate_rs / 2.0
    stop_edge = 2.0 * params.carrier_fc - 1.5 * pass_edge
    if stop_edge <= 1.3 * pass_edge:
        raise ValueError("carrier too low to separate the demodulation image")
    numtaps, beta = kaiserord(120.0, (stop_edge - pass_edge) / (fs / 2.0))
    numtaps += 1 - numtaps % 2
    return firwin(numtaps, (pass_edge + stop_edge) / 2.0, window=("kaiser", beta), fs=fs)


def demodulate(z: PassbandSignal, params: SignalParams, layout,
               oversample: int = 1) -> np.ndarray:
    """Complex baseband sequence sampled at oversample points per symbol.

    Symbol timing comes from the frame layout on the transmit clock; z must
    carry its alignment in t0.
    """
    if hasattr(layout, "layout"):
        layout = layout.layout
    data = next((s for s in layout if s.name == "data"), None)
    if data is None or data.length == 0:
        raise SyncError("no data segment to demodulate")
    fs = params.sample_rate_fs
    sps = params.samples_per_symbol
    n_sym = data.length // sps

    t = z.t0 + np.arange(len(z.samples)) / fs
    bb = z.samples * np.exp(-2j * math.pi * params.carrier_fc * t) * math.sqrt(2.0)
    lpf = _image_reject_lowpass(params)
    bb = fftconvolve(bb, lpf.astype(complex))
    rrc = rrc_taps(params).astype(complex)
    bb = fftconvolve(bb, rrc)
    delay = (len(lpf) - 1) / 2.0 + (len(rrc) - 1) / 2.0

    sym_times = (data.start + (np.arange(n_sym * oversample) / oversample) * sps) / fs
    positions = (sym_times - z.t0) * fs + delay
    return sample_fractional(bb, positions)


def rls_dfe(soft: np.ndarray, cfg: DfeConfig, training_symbols: np.ndarray,
            modulation: str, payload_bits: np.ndarray | None = None,
            oversample: int = 2, pll_enabled: bool = True) -> DfeResult:
    """Exponentially weighted RLS DFE over a fractionally-spaced input.

    soft holds oversample samples per symbol; the first len(training_symbols)
    symbols adapt against the known sequence, the rest run decision-directed.
    A proportional+integral phase loop de-rotates the feedforward input
    before the slicer. Divergence (windowed error power 10x the post-training
    window) is flagged, never raised.
    """
    n_sym = len(soft) // oversample
    n_ff, n_fb = cfg.feedforward_taps, cfg.feedback_taps
    n_tr = min(cfg.training_length, len(training_symbols), n_sym)
    dim = n_ff + n_fb
    w = np.zeros(dim, dtype=complex)
    p = np.eye(dim, dtype=complex) / cfg.rls_delta
    lam = cfg.forgetting_lambda

    pad = np.zeros(n_ff, dtype=complex)
    buf = np.concatenate([pad, np.asarray(soft, dtype=complex), pad])
    center = n_ff // 2
    fb = np.zeros(n_fb, dtype=complex)

    theta = 0.0
    integ = 0.0
    err_pow = []
    decisions: list[DecisionRecord] = []
    ref_mse = None
    diverged = False

    for k in range(n_sym):
        hi = k * oversample + center + n_ff
        ff = buf[hi - n_ff:hi][::-1] * np.exp(-1j * theta)
        u = np.concatenate([ff, fb]) if n_fb else ff
        y = np.vdot(w, u)  # w^H u
        training = k < n_tr
        d = training_symbols[k] if training else slice_symbol(y, modulation)
        e = d - y
        pu = p @ u
        denom = lam + float(np.real(np.vdot(u, pu)))
        g = pu / denom
        w = w + g * np.conj(e)
        p = (p - np.outer(g, np.conj(pu))) / lam
        if pll_enabled and abs(d) > 0:
            phi = float(np.angle(y * np.conj(d))) if abs(y) > 0 else 0.0
            integ += cfg.pll_integral * phi
            theta += cfg.pll_proportional * phi + integ
        if n_fb:
            fb = np.concatenate(([d], fb[:-1]))
        err_pow.append(abs(e) ** 2)
        decisions.append(DecisionRecord(index=k, soft=complex(y), decision=complex(d),
                                        training=training))
        if k >= n_tr + 99 and (k - n_tr + 1) % 100 == 0:
            window = float(np.mean(err_pow[k - 99:k + 1]))
            if ref_mse is None:
                ref_mse = max(window, 1e-12)
            elif window > 10.0 * ref_mse:
                diverged = True

    payload_syms = np.array([d.decision for d in decisions[n_tr:]], dtype=complex)
    decided_bits = demap_symbols(payload_syms, modulation) if len(payload_syms) else np.empty(0, int)
    ber_payload = None
    if payload_bits is not None:
        ber_payload = ber(decided_bits, np.asarray(payload_bits, dtype=int))
    mse_db = 10.0 * np.log10(np.maximum(np.array(err_pow), 1e-300))
    return DfeResult(decisions=decisions, decided_bits=decided_bits,
                     ber_payload=ber_payload, mse_db=mse_db, diverged=diverged,
                     final_taps=w)


def ber(decided_bits: np.ndarray, truth_bits: np.ndarray) -> float:
    """Payload bit error rate; lengths must match exactly."""
    decided_bits = np.asarray(decided_bits, dtype=int)
    truth_bits = np.asarray(truth_bits, dtype=int)
    if decided_bits.shape != truth_bits.shape:
        raise ValueError(f"bit length mismatch: {decided_bits.shape} vs {truth_bits.shape}")
    if len(truth_bits) == 0:
        return 0.0
    return float(np.mean(decided_bits != truth_bits))


def training_sequence(params: SignalParams, n_symbols: int, seed: int = 7) -> np.ndarray:
    """Known pseudo-random training prefix, reproducible for both ends."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, n_symbols * params.bits_per_symbol)
    return map_bits(bits, params.modulation)


def frame_bits(params: SignalParams, n_payload_symbols: int, n_training: int,
               rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(all_bits, training_symbols, payload_bits) for one frame's data segment."""
    train_syms = training_sequence(params, n_training)
    train_bits = demap_symbols(train_syms, params.modulation)
    payload = rng.integers(0, 2, n_payload_symbols * params.bits_per_symbol)
    return np.concatenate([train_bits, payload]), train_syms, payload
