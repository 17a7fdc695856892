"""Heterodyne reference-measurement chain: beat tones, RF conditioning, and
log power detection, plus the soft relative-frequency stabilization loop.

Two dim references at optical frequencies f_T and f_T + X beat against a
local oscillator offset by Y = f_T - f_R, so each balanced detector carries
tones at Y and X + Y whose RF powers track the projection of the respective
reference onto that detector's analyzer. Fixed filter branches isolate one
tone per measurement: the V-measurement branch and the D-measurement branch
keep the unshifted tone at Y, and a second D-measurement branch keeps the
shifted tone at X + Y.

The model is envelope-analytic: tone powers propagate through Butterworth
magnitude responses and gain tables; no RF waveform is synthesized. The
control loop only ever consumes detected powers, and this keeps
million-iteration simulations cheap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import signal as _signal

from .poincare import H, PolRotation, project_power, vwp_matrix

# Conversion constants folding photodiode responsivity and TIA gain into the
# one scalar the model needs. Calibrated so a -50 dBm received reference with
# a +6 dBm LO yields a beat tone 25 dB above the LO shot-noise floor.
TONE_CONVERSION_DB = 24.0
SHOT_FLOOR_OFFSET_DB = -51.0
DEFAULT_LO_DBM = 6.0
DEFAULT_REF_DBM = -50.0


def shot_noise_floor_dbm(lo_power_dbm: float) -> float:
    """Effective in-band shot-noise power; scales with LO power."""
    return lo_power_dbm + SHOT_FLOOR_OFFSET_DB


@dataclass(frozen=True)
class FrequencyPlan:
    """The RF frequency plan: AOM shift X, LO offset Y, detector bandwidth B,
    laser wander span nu and linewidth, all in the units named."""

    f_t_thz: float = 189.6
    x_mhz: float = 200.0
    y_mhz: float = 70.0
    b_mhz: float = 500.0
    nu_mhz: float = 125.0
    linewidth_khz: float = 10.0
    # Minimum tone separation the fixed filters need; defaults to the laser
    # wander span plus linewidth when not given.
    separation_span_mhz: Optional[float] = None

    def __post_init__(self):
        if self.y_mhz + self.x_mhz > self.b_mhz:
            raise ValueError("Y + X must not exceed the detector bandwidth B")
        required = self.required_separation_mhz
        if self.x_mhz <= required:
            raise ValueError(
                f"AOM shift X={self.x_mhz} MHz must exceed the combined laser "
                f"wander span {required} MHz or fixed filters cannot separate "
                f"the beat notes"
            )

    @property
    def required_separation_mhz(self) -> float:
        if self.separation_span_mhz is not None:
            return self.separation_span_mhz
        return self.nu_mhz + self.linewidth_khz * 1e-3


@dataclass(frozen=True)
class FilterStage:
    """One analog conditioning filter, as a Butterworth magnitude response."""

    kind: str  # 'lowpass' | 'highpass' | 'bandpass'
    corner_mhz: tuple  # (fc,) or (lo, hi)
    order: int = 7

    def __post_init__(self):
        corners = tuple(float(c) for c in np.atleast_1d(self.corner_mhz))
        object.__setattr__(self, "corner_mhz", corners)
        if self.kind not in ("lowpass", "highpass", "bandpass"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if any(c <= 0 for c in corners):
            raise ValueError("filter corners must be positive")
        if self.kind == "bandpass":
            if len(corners) != 2 or not corners[0] < corners[1]:
                raise ValueError("bandpass needs corners (lo, hi) with lo < hi")
        elif len(corners) != 1:
            raise ValueError(f"{self.kind} takes a single corner")

    def magnitude_db(self, f_mhz):
        f = np.maximum(np.asarray(f_mhz, dtype=float), 1e-9)
        n2 = 2 * self.order
        if self.kind == "lowpass":
            return -10.0 * np.log10(1.0 + (f / self.corner_mhz[0]) ** n2)
        if self.kind == "highpass":
            return -10.0 * np.log10(1.0 + (self.corner_mhz[0] / f) ** n2)
        lo, hi = self.corner_mhz
        return (-10.0 * np.log10(1.0 + (lo / f) ** n2)
                - 10.0 * np.log10(1.0 + (f / hi) ** n2))


@dataclass(frozen=True)
class GainTable:
    """Piecewise-linear gain versus frequency, dB."""

    freqs_mhz: tuple = (0.0, 1500.0)
    gains_db: tuple = (0.0, 0.0)

    def __call__(self, f_mhz):
        return np.interp(np.asarray(f_mhz, dtype=float), self.freqs_mhz, self.gains_db)


@dataclass(frozen=True)
class RfChain:
    """Per-branch filter cascades plus the shared amplifier/TIA gain tables."""

    branches: dict
    amplifier: GainTable = field(
        default_factory=lambda: GainTable((0.0, 500.0, 1500.0), (40.0, 39.0, 36.0))
    )
    tia: GainTable = field(default_factory=lambda: GainTable((0.0, 1500.0), (0.0, -1.0)))

    @classmethod
    def default(cls, order: int = 7) -> "RfChain":
        """The deployed branch plan: 10-200 MHz for both unshifted-tone
        branches, >200 MHz high-pass plus 200-400 MHz for the shifted tone."""
        return cls(
            branches={
                "m_d": (FilterStage("bandpass", (10.0, 200.0), order),
                        FilterStage("lowpass", (200.0,), order)),
                "m_h": (FilterStage("bandpass", (10.0, 200.0), order),
                        FilterStage("lowpass", (200.0,), order)),
                "m_r": (FilterStage("highpass", (250.0,), order),
                        FilterStage("bandpass", (200.0, 400.0), order)),
            }
        )

    def branch_response_db(self, branch: str, f_mhz):
        total = self.amplifier(f_mhz) + self.tia(f_mhz)
        for stage in self.branches[branch]:
            total = total + stage.magnitude_db(f_mhz)
        return total


@dataclass(frozen=True)
class DigitalLpf:
    corner_hz: float = 10e3
    order: int = 8


@dataclass(frozen=True)
class PowerDetectorModel:
    """Log RF power detector feeding the digital low-pass stage.

    reading_noise_db is the white noise on each raw dB reading before the
    digital filter; the Butterworth stage averages it down.
    """

    load_ohms: float = 50.0
    response_slope_mv_per_db: float = -25.0
    reading_noise_db: float = 0.0
    lpf: DigitalLpf = field(default_factory=DigitalLpf)

    def __post_init__(self):
        if self.load_ohms <= 0:
            raise ValueError("load impedance must be positive")

    def to_volts(self, power_db):
        """Detector analog output; negative slope, arbitrary 0-dB intercept."""
        return np.asarray(power_db) * self.response_slope_mv_per_db * 1e-3


@dataclass(frozen=True)
class PartialStokesReading:
    """The measurement trio consumed by the three control loops, dB."""

    m_d: float
    m_h: float
    m_r: float
    timestamp_s: float = 0.0

    def __post_init__(self):
        for name in ("m_d", "m_h", "m_r"):
            v = getattr(self, name)
            if np.ndim(v) == 0 and not math.isfinite(float(v)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class MeasurementOptics:
    """Receiver wave-plate angles plus the uncompensated fiber before them.

    Each detector's effective analyzer, referred back to the correction-stack
    output, is (QWP . HWP . PCM)^T applied to the polarizer axis (the LO
    polarization, taken as H).
    """

    qwp1: float = 0.0
    hwp1: float = math.pi / 4
    qwp2: float = 3 * math.pi / 4
    hwp2: float = 0.0
    pcm_rotation: PolRotation = field(default_factory=PolRotation.identity)

    def analyzer(self, detector: int) -> np.ndarray:
        if detector == 1:
            qwp, hwp = self.qwp1, self.hwp1
        elif detector == 2:
            qwp, hwp = self.qwp2, self.hwp2
        else:
            raise ValueError("detector must be 1 or 2")
        m = (vwp_matrix(qwp, math.pi / 2)
             @ vwp_matrix(hwp, math.pi)
             @ self.pcm_rotation.matrix)
        return m.T @ H

    @classmethod
    def default_calibrated(cls, pcm: Optional[PolRotation] = None) -> "MeasurementOptics":
        """Angles aligning detector 1 with V and detector 2 with the image of
        D behind the quarter-wave-biased correction element (identity PCM)."""
        return cls(pcm_rotation=pcm or PolRotation.identity())


@dataclass(frozen=True)
class TonePowers:
    """Pre-filter RF tone powers (dBm) and where they sit in frequency."""

    det1_y: float
    det1_xy: float
    det2_y: float
    det2_xy: float
    freq_y_mhz: float
    freq_xy_mhz: float


def beat_powers(ref1_arrival, ref2_arrival, optics: MeasurementOptics,
                plan: FrequencyPlan, ref_power_dbm: float = DEFAULT_REF_DBM,
                lo_power_dbm: float = DEFAULT_LO_DBM,
                y_actual_mhz: Optional[float] = None) -> TonePowers:
    """RF tone powers for the two references arriving at the two detectors.

    ref1 is the unshifted launch (tones at Y), ref2 the AOM-shifted launch
    (tones at X + Y). Each tone: conversion constant + reference power + LO
    power + 10 log10(projection onto that detector's analyzer), floored at
    the LO shot noise so a perfectly nulled projection never returns -inf.
    """
    y = plan.y_mhz if y_actual_mhz is None else y_actual_mhz
    floor = shot_noise_floor_dbm(lo_power_dbm)
    a1 = optics.analyzer(1)
    a2 = optics.analyzer(2)

    def tone(state, analyzer):
        p = max(project_power(state, analyzer), 1e-30)
        raw = TONE_CONVERSION_DB + ref_power_dbm + lo_power_dbm + 10.0 * math.log10(p)
        return max(raw, floor)

    return TonePowers(
        det1_y=tone(ref1_arrival, a1),
        det1_xy=tone(ref2_arrival, a1),
        det2_y=tone(ref1_arrival, a2),
        det2_xy=tone(ref2_arrival, a2),
        freq_y_mhz=y,
        freq_xy_mhz=y + plan.x_mhz,
    )


_BRANCH_TONES = {
    # branch -> (detector tones as (dominant freq key, contaminant freq key))
    "m_d": ("det1_y", "det1_xy", "freq_y_mhz"),
    "m_h": ("det2_y", "det2_xy", "freq_y_mhz"),
    "m_r": ("det2_xy", "det2_y", "freq_xy_mhz"),
}


def _branch_power_db(branch, tones: TonePowers, chain: RfChain, lo_power_dbm: float):
    dom_key, con_key, dom_freq_key = _BRANCH_TONES[branch]
    f_dom = getattr(tones, dom_freq_key)
    f_con = tones.freq_xy_mhz if dom_freq_key == "freq_y_mhz" else tones.freq_y_mhz
    p_dom = getattr(tones, dom_key) + chain.branch_response_db(branch, f_dom)
    p_con = getattr(tones, con_key) + chain.branch_response_db(branch, f_con)
    p_noise = shot_noise_floor_dbm(lo_power_dbm) + chain.branch_response_db(branch, f_dom)
    linear = 10 ** (p_dom / 10) + 10 ** (p_con / 10) + 10 ** (p_noise / 10)
    return 10.0 * np.log10(linear)


def chain_and_detect(tones: TonePowers, chain: RfChain, det: PowerDetectorModel,
                     lo_power_dbm: float = DEFAULT_LO_DBM,
                     rng: Optional[np.random.Generator] = None,
                     lpf_streams: Optional[dict] = None,
                     timestamp_s: float = 0.0) -> PartialStokesReading:
    """Condition the four tones into the three dB readings.

    Each branch sums (in linear power) its two tones attenuated by the branch
    filters and gain tables plus the shot-noise floor, converts to dB, adds
    detector reading noise, and optionally runs each reading through its
    stateful digital low-pass stream.
    """
    out = {}
    for branch in ("m_d", "m_h", "m_r"):
        reading = _branch_power_db(branch, tones, chain, lo_power_dbm)
        if rng is not None and det.reading_noise_db > 0:
            reading = reading + rng.normal(0.0, det.reading_noise_db)
        if lpf_streams is not None:
            reading = lpf_streams[branch].push(reading)
        out[branch] = float(reading)
    return PartialStokesReading(out["m_d"], out["m_h"], out["m_r"], timestamp_s)


class ButterworthStream:
    """Stateful discrete-time Butterworth low-pass on a reading sequence.

    Initialized to steady state at the first sample, so a constant input is
    reproduced immediately (unity DC gain). If the corner is at or above the
    Nyquist rate of the reading sequence the stage is transparent.
    """

    def __init__(self, corner_hz: float, sample_rate_hz: float, order: int = 8):
        self.sample_rate_hz = sample_rate_hz
        self.corner_hz = corner_hz
        self.transparent = corner_hz >= sample_rate_hz / 2
        if not self.transparent:
            self.sos = _signal.butter(order, corner_hz, fs=sample_rate_hz, output="sos")
            self._zi_unit = _signal.sosfilt_zi(self.sos)
        self._zi = None

    def push(self, x):
        """Filter one sample (scalar or a batch vector of parallel streams)."""
        if self.transparent:
            return x
        x = np.asarray(x, dtype=float)
        if self._zi is None:
            if x.ndim == 0:
                self._zi = self._zi_unit * float(x)
            else:
                self._zi = self._zi_unit[:, None, :] * x[None, :, None]
        if x.ndim == 0:
            y, self._zi = _signal.sosfilt(self.sos, np.atleast_1d(x), zi=self._zi)
            return float(y[0])
        y, self._zi = _signal.sosfilt(self.sos, x[:, None], zi=self._zi, axis=-1)
        return y[:, 0]

    def reset(self):
        self._zi = None


def make_lpf_streams(det: PowerDetectorModel, sample_rate_hz: float) -> dict:
    return {
        b: ButterworthStream(det.lpf.corner_hz, sample_rate_hz, det.lpf.order)
        for b in ("m_d", "m_h", "m_r")
    }


# --- relative-frequency stabilization ----------------------------------------

@dataclass(frozen=True)
class FreqStabConfig:
    """PI loop on the measured beat frequency, through a slow thermal actuator."""

    setpoint_mhz: float = 70.0
    kp: float = 0.4
    ki_per_s: float = 3.0
    actuator_bandwidth_hz: float = 10.0
    sample_rate_hz: float = 50.0
    actuation_limit_mhz: float = 2000.0


@dataclass(frozen=True)
class FreqStabState:
    integral: float = 0.0
    actuation_mhz: float = 0.0


def frequency_stab_step(config: FreqStabConfig, state: FreqStabState,
                        measured_y_mhz: float):
    """One stabilization iteration; returns (applied correction, new state).

    The PI command passes through a first-order lag modeling the thermal
    frequency actuator; the returned correction is the lagged actuation that
    subtracts from the relative frequency.
    """
    dt = 1.0 / config.sample_rate_hz
    e = measured_y_mhz - config.setpoint_mhz
    integral = state.integral + e * dt
    command = config.kp * e + config.ki_per_s * integral
    command = float(np.clip(command, -config.actuation_limit_mhz,
                            config.actuation_limit_mhz))
    alpha = 1.0 - math.exp(-2.0 * math.pi * config.actuator_bandwidth_hz * dt)
    actuation = state.actuation_mhz + alpha * (command - state.actuation_mhz)
    return actuation, FreqStabState(integral=integral, actuation_mhz=actuation)


class FrequencyStabilizer:
    def __init__(self, config: FreqStabConfig = FreqStabConfig()):
        self.config = config
        self.state = FreqStabState()

    def step(self, measured_y_mhz: float) -> float:
        correction, self.state = frequency_stab_step(self.config, self.state,
                                                     measured_y_mhz)
        return correction


class LaserFrequencyDrift:
    """Mean-reverting (Ornstein-Uhlenbeck) relative-frequency wander.

    stationary_std_mhz sets the bounded wander scale: +/- 2 sigma spans about
    200 MHz at the 50-MHz default.
    """

    def __init__(self, stationary_std_mhz: float = 50.0, tau_s: float = 30.0,
                 seed: int = 0, initial_mhz: float = 0.0):
        self.std = stationary_std_mhz
        self.tau = tau_s
        self.rng = np.random.default_rng(seed)
        self.value = initial_mhz

    def step(self, dt: float) -> float:
        sigma_w = self.std * math.sqrt(2.0 / self.tau)
        self.value += (-self.value / self.tau) * dt \
            + sigma_w * math.sqrt(dt) * self.rng.normal()
        return self.value


def simulate_frequency_lock(duration_s: float,
                            config: FreqStabConfig = FreqStabConfig(),
                            drift: Optional[LaserFrequencyDrift] = None,
                            meas_noise_mhz: float = 4.0,
                            seed: int = 0,
                            drift_ramp_mhz_per_s: float = 0.0) -> dict:
    """Closed-loop run of the relative-frequency lock.

    Returns the Y trace, measured trace, and applied actuation, with the loop
    held at config.setpoint_mhz. meas_noise_mhz models the zero-crossing
    frequency estimate noise.
    """
    rng = np.random.default_rng(seed)
    if drift is None:
        drift = LaserFrequencyDrift(seed=seed + 1)
    stab = FrequencyStabilizer(config)
    dt = 1.0 / config.sample_rate_hz
    n = int(round(duration_s * config.sample_rate_hz))
    y = np.empty(n)
    measured = np.empty(n)
    actuation = np.empty(n)
    ramp = 0.0
    for k in range(n):
        wander = drift.step(dt) + ramp
        ramp += drift_ramp_mhz_per_s * dt
        y_actual = config.setpoint_mhz + wander - stab.state.actuation_mhz
        m = y_actual + (rng.normal(0.0, meas_noise_mhz) if meas_noise_mhz > 0 else 0.0)
        correction = stab.step(m)
        y[k] = y_actual
        measured[k] = m
        actuation[k] = correction
    return {"y_mhz": y, "measured_mhz": measured, "actuation_mhz": actuation,
            "time_s": np.arange(n) * dt}


def write_readings_csv(path, readings) -> None:
    """CSV export of a reading sequence: timestamp_s, m_d, m_h, m_r."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "m_d", "m_h", "m_r"])
        for r in readings:
            writer.writerow([repr(float(r.timestamp_s)), repr(float(r.m_d)),
                             repr(float(r.m_h)), repr(float(r.m_r))])
