"""Streaming drift-spectrum analyzer: accumulate/decimate sample pyramid,
two-channel normalization, and averaged magnitude FFTs per decimation level.

Raw two-channel power samples (ADC counts of the two polarizer outputs) are
block-accumulated by powers of two into progressively slower sample streams.
Each level normalizes one channel by the channel sum (after an offset shift
keeping both positive) and runs fixed-length FFTs whose magnitudes are
averaged; slow polarization drift shows up as low-frequency peaks.

Accumulation is a plain block sum, so integer inputs decimate bit-exactly
and cascading two factor-2^8 stages equals one factor-2^16 stage.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as _signal


@dataclass(frozen=True)
class SamplePyramid:
    """Decimation plan: base sample rate, accumulation factors, ADC offset."""

    base_rate_hz: float = 1.5625e3
    factors: tuple = (2 ** 8, 2 ** 16)
    adc_offset: float = 2 ** 13

    def __post_init__(self):
        factors = tuple(int(f) for f in self.factors)
        if any(f & (f - 1) for f in factors) or any(f < 1 for f in factors):
            raise ValueError("accumulation factors must be powers of two")
        if list(factors) != sorted(set(factors)):
            raise ValueError("accumulation factors must be strictly increasing")
        object.__setattr__(self, "factors", factors)

    def level_rate_hz(self, factor: int) -> float:
        return self.base_rate_hz / factor


@dataclass(frozen=True)
class SpectrumResult:
    """Averaged one-sided magnitude spectrum at one pyramid level."""

    frequencies_hz: np.ndarray
    mean_magnitude: np.ndarray
    std_magnitude: np.ndarray
    fft_length: int
    n_averaged: int
    sample_rate_hz: float

    def __post_init__(self):
        if len(self.frequencies_hz) != self.fft_length // 2 + 1:
            raise ValueError("bin count must be fft_length/2 + 1")
        if self.n_averaged < 1:
            raise ValueError("n_averaged must be >= 1")


class InsufficientSamples(RuntimeError):
    """Not enough input for the requested averaging; carries any partial result."""

    def __init__(self, message, partial: Optional[SpectrumResult] = None):
        super().__init__(message)
        self.partial = partial


def normalize(channel_a, channel_b, offset: float = 2 ** 13):
    """Offset-shifted ratio a/(a+b), the polarization-fraction observable."""
    a = np.asarray(channel_a, dtype=float) + offset
    b = np.asarray(channel_b, dtype=float) + offset
    den = a + b
    if np.any(den == 0):
        raise ZeroDivisionError("channel sum is zero after offset shift")
    return a / den


def block_accumulate(x, factor: int):
    """Sum consecutive blocks of `factor` samples; trailing remainder dropped.

    Integer inputs stay integers, so cascaded accumulation is bit-exact.
    """
    x = np.asarray(x)
    n = len(x) // factor
    if n == 0:
        return x[:0]
    return x[: n * factor].reshape(n, factor).sum(axis=1)


def _spectra_from_samples(samples, fft_length: int, window: Optional[str] = None):
    samples = np.asarray(samples, dtype=float)
    n_spectra = len(samples) // fft_length
    if n_spectra == 0:
        return None
    frames = samples[: n_spectra * fft_length].reshape(n_spectra, fft_length)
    if window is not None:
        frames = frames * _signal.get_window(window, fft_length)
    return np.abs(np.fft.rfft(frames, axis=1))


def _result_from_magnitudes(mags, fft_length, rate):
    freqs = np.fft.rfftfreq(fft_length, d=1.0 / rate)
    return SpectrumResult(
        frequencies_hz=freqs,
        mean_magnitude=mags.mean(axis=0),
        std_magnitude=mags.std(axis=0),
        fft_length=fft_length,
        n_averaged=mags.shape[0],
        sample_rate_hz=rate,
    )


def accumulate_and_fft(stream, pyramid: SamplePyramid, fft_length: int = 4096,
                       n_to_average: int = 1, window: Optional[str] = None) -> dict:
    """Decimate one sample stream through every pyramid level and average FFTs.

    Returns {factor: SpectrumResult}. Block averaging divides the block sum
    by the factor, so the stream may be raw counts or normalized fractions.
    Raises InsufficientSamples (with any partial spectrum attached) when a
    level cannot fill fft_length * n_to_average samples.
    """
    stream = np.asarray(stream)
    results = {}
    for factor in pyramid.factors:
        decimated = block_accumulate(stream, factor) / factor
        mags = _spectra_from_samples(decimated, fft_length, window)
        rate = pyramid.level_rate_hz(factor)
        if mags is None:
            raise InsufficientSamples(
                f"level /{factor}: {len(decimated)} samples cannot fill one "
                f"{fft_length}-point FFT"
            )
        if mags.shape[0] < n_to_average:
            raise InsufficientSamples(
                f"level /{factor}: only {mags.shape[0]} of {n_to_average} FFTs available",
                partial=_result_from_magnitudes(mags, fft_length, rate),
            )
        results[factor] = _result_from_magnitudes(mags[:n_to_average], fft_length, rate)
    return results


def counts_pipeline(raw_a, raw_b, pyramid: SamplePyramid, fft_length: int = 4096,
                    n_to_average: int = 1, window: Optional[str] = None) -> dict:
    """The full two-channel pipeline: accumulate raw counts per level (exact
    integer block sums), convert to averages, normalize, then FFT."""
    raw_a = np.asarray(raw_a)
    raw_b = np.asarray(raw_b)
    results = {}
    for factor in pyramid.factors:
        sum_a = block_accumulate(raw_a, factor)
        sum_b = block_accumulate(raw_b, factor)
        normalized = normalize(sum_a / factor, sum_b / factor, pyramid.adc_offset)
        mags = _spectra_from_samples(normalized, fft_length, window)
        rate = pyramid.level_rate_hz(factor)
        if mags is None:
            raise InsufficientSamples(
                f"level /{factor}: not enough samples for one {fft_length}-point FFT"
            )
        if mags.shape[0] < n_to_average:
            raise InsufficientSamples(
                f"level /{factor}: only {mags.shape[0]} of {n_to_average} FFTs available",
                partial=_result_from_magnitudes(mags, fft_length, rate),
            )
        results[factor] = _result_from_magnitudes(mags[:n_to_average], fft_length, rate)
    return results


class DriftSpectrumAnalyzer:
    """Bounded-memory streaming front end for the pyramid.

    Push normalized samples in chunks; completed SpectrumResults per level
    are collected in .results (a list per factor). Only one FFT frame per
    level is buffered at a time.
    """

    def __init__(self, pyramid: SamplePyramid, fft_length: int = 4096,
                 n_to_average: int = 1, window: Optional[str] = None):
        self.pyramid = pyramid
        self.fft_length = fft_length
        self.n_to_average = n_to_average
        self.window = window
        self._carry = {f: np.empty(0) for f in pyramid.factors}
        self._frames = {f: [] for f in pyramid.factors}
        self._mags = {f: [] for f in pyramid.factors}
        self.results = {f: [] for f in pyramid.factors}

    def push(self, samples) -> None:
        samples = np.asarray(samples, dtype=float)
        for factor in self.pyramid.factors:
            data = np.concatenate([self._carry[factor], samples])
            n_blocks = len(data) // factor
            decimated = block_accumulate(data[: n_blocks * factor], factor) / factor
            self._carry[factor] = data[n_blocks * factor:]
            self._frames[factor].extend(decimated.tolist())
            while len(self._frames[factor]) >= self.fft_length:
                frame = np.array(self._frames[factor][: self.fft_length])
                del self._frames[factor][: self.fft_length]
                mags = _spectra_from_samples(frame, self.fft_length, self.window)
                self._mags[factor].append(mags[0])
                if len(self._mags[factor]) == self.n_to_average:
                    stack = np.array(self._mags[factor])
                    self._mags[factor] = []
                    self.results[factor].append(
                        _result_from_magnitudes(stack, self.fft_length,
                                                self.pyramid.level_rate_hz(factor))
                    )


def drift_report(spectra, prominence: float = 0.05, skip_dc_bins: int = 1) -> list:
    """Dominant drift bands per spectrum: peak bins whose prominence exceeds
    `prominence` times the largest non-DC magnitude."""
    report = []
    for spec in spectra:
        mag = np.asarray(spec.mean_magnitude, dtype=float)
        body = mag[skip_dc_bins:]
        peaks = []
        if body.size >= 3 and body.max() > 0:
            idx, props = _signal.find_peaks(body, prominence=prominence * body.max())
            for i, prom in zip(idx, props["prominences"]):
                peaks.append({
                    "frequency_hz": float(spec.frequencies_hz[i + skip_dc_bins]),
                    "magnitude": float(body[i]),
                    "prominence": float(prom),
                })
        peaks.sort(key=lambda p: -p["magnitude"])
        report.append({"sample_rate_hz": spec.sample_rate_hz, "peaks": peaks})
    return report


# --- I/O ---------------------------------------------------------------------

def load_counts_csv(path):
    """Two-column CSV of raw counts -> (channel_a, channel_b) int arrays."""
    a, b = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if row[0].strip().lower() in ("a", "channel_a"):
                continue
            a.append(int(float(row[0])))
            b.append(int(float(row[1])))
    if not a:
        raise ValueError(f"no count rows found in {path}")
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


def write_spectrum_csv(path, result: SpectrumResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz", "mean", "std"])
        for f, m, s in zip(result.frequencies_hz, result.mean_magnitude,
                           result.std_magnitude):
            writer.writerow([repr(float(f)), repr(float(m)), repr(float(s))])
