"""Drifting fiber-channel model: a stack of wave-plates with random-walk drift.

The channel is a stack of variable wave-plates with alternating axis families
(H/V, D/A, ...). Environmental drift perturbs every element's retardance and
axis angle each iteration. Wavelength dependence enters two ways: element
retardances scale as reference_wavelength/wavelength, and an optional
first-order differential-group-delay rotation tilts signals offset from the
reference wavelength.

Channel parameters are handled as arrays of shape (..., n_elements, 2) with
the last axis holding (retardance, axis_angle); a leading batch dimension
lets many seeds advance in lockstep.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .poincare import PolRotation, WaveplateElement, rotation_about_axis, vwp_matrix

SPEED_OF_LIGHT_M_S = 299_792_458.0
CHANNEL_SPACING_HZ = 100e9  # DWDM grid spacing

DRIFT_VARIANTS = ("random_walk", "biased_random_walk", "sinusoidal", "scripted")


@dataclass(frozen=True)
class ChannelState:
    """Ordered wave-plate stack plus the reference wavelength it was set at."""

    elements: tuple
    reference_wavelength_nm: float = 1581.2

    def __post_init__(self):
        if len(self.elements) < 1:
            raise ValueError("channel needs at least one element")
        object.__setattr__(self, "elements", tuple(self.elements))

    @classmethod
    def default(cls, n_elements: int = 4, reference_wavelength_nm: float = 1581.2,
                retardances=None) -> "ChannelState":
        """Alternating H/V and D/A elements, unbounded retardance."""
        if retardances is None:
            retardances = [0.0] * n_elements
        elements = tuple(
            WaveplateElement(
                axis_angle=(0.0 if i % 2 == 0 else math.pi / 4),
                retardance=retardances[i],
                retardance_limit=math.inf,
            )
            for i in range(n_elements)
        )
        return cls(elements, reference_wavelength_nm)

    @property
    def params(self) -> np.ndarray:
        """(n_elements, 2) array of (retardance, axis_angle)."""
        return np.array([[e.retardance, e.axis_angle] for e in self.elements])

    def with_params(self, params) -> "ChannelState":
        params = np.asarray(params, dtype=float)
        elements = tuple(
            WaveplateElement(axis_angle=a, retardance=r, retardance_limit=math.inf)
            for r, a in params
        )
        return ChannelState(elements, self.reference_wavelength_nm)


@dataclass(frozen=True)
class DriftModel:
    """How the channel moves each iteration.

    random_walk:        +/- step_size per coordinate, equal probability.
    biased_random_walk: bias + (+/- step_size) per coordinate.
    sinusoidal:         retardance of the designated elements set to
                        amplitude * sin(2 pi f t).
    scripted:           absolute (retardance, axis_angle) vectors replayed
                        row by row from `trace`.
    """

    variant: str = "random_walk"
    step_size: float = math.pi / 360
    bias: float = 0.0
    frequency_hz: float = 0.0
    amplitude: float = 0.0
    trace: Optional[np.ndarray] = None
    seed: int = 0
    sinusoid_elements: tuple = (0,)
    perturb_angles: bool = True  # walks move axis angles with the same step

    def __post_init__(self):
        if self.variant not in DRIFT_VARIANTS:
            raise ValueError(f"unknown drift variant {self.variant!r}")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.variant == "scripted":
            if self.trace is None or len(self.trace) == 0:
                raise ValueError("scripted drift needs a nonempty trace")
            object.__setattr__(self, "trace", np.asarray(self.trace, dtype=float))


class TraceExhausted(RuntimeError):
    """Raised when a scripted drift runs past the end of its trace."""


def step_params(params, model: DriftModel, rng: np.random.Generator,
                iteration: int, dt: float) -> np.ndarray:
    """Advance channel parameters one iteration; batched over leading dims.

    params has shape (..., n, 2); the random draw covers the whole batch so a
    fixed seed yields one deterministic trajectory per batch layout.
    """
    params = np.asarray(params, dtype=float)
    if model.variant in ("random_walk", "biased_random_walk"):
        signs = rng.integers(0, 2, size=params.shape) * 2 - 1
        delta = signs * model.step_size
        if model.variant == "biased_random_walk":
            delta = delta + model.bias
        if not model.perturb_angles:
            delta[..., 1] = 0.0
        return params + delta
    if model.variant == "sinusoidal":
        out = params.copy()
        t = (iteration + 1) * dt
        value = model.amplitude * math.sin(2 * math.pi * model.frequency_hz * t)
        for idx in model.sinusoid_elements:
            out[..., idx, 0] = value
        return out
    # scripted
    if iteration >= len(model.trace):
        raise TraceExhausted(
            f"scripted trace has {len(model.trace)} rows, iteration {iteration} requested"
        )
    row = model.trace[iteration].reshape(params.shape[-2], 2)
    out = np.broadcast_to(row, params.shape).copy()
    return out


def drift_step(channel: ChannelState, model: DriftModel, rng: np.random.Generator,
               iteration: int = 0, dt: float = 1e-3) -> ChannelState:
    """One drift iteration on a ChannelState. Deterministic given the rng state."""
    return channel.with_params(step_params(channel.params, model, rng, iteration, dt))


@dataclass
class DriftProcess:
    """Stateful convenience wrapper: owns the rng and iteration counter."""

    model: DriftModel
    loop_rate_hz: float = 1000.0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.model.seed)
        self.iteration = 0

    def step(self, channel: ChannelState) -> ChannelState:
        out = drift_step(channel, self.model, self.rng, self.iteration,
                         1.0 / self.loop_rate_hz)
        self.iteration += 1
        return out


# --- wavelength dependence ------------------------------------------------

@dataclass(frozen=True)
class PmdModel:
    """First-order DGD knob: a fixed rotation proportional to channel offset."""

    dgd_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    dgd_magnitude: float = 0.0  # radians per 100-GHz channel offset
    enabled: bool = False

    def __post_init__(self):
        axis = np.asarray(self.dgd_axis, dtype=float)
        if self.enabled:
            norm = np.linalg.norm(axis)
            if abs(norm - 1.0) > 1e-9:
                raise ValueError("dgd_axis must be unit norm when PMD is enabled")
        object.__setattr__(self, "dgd_axis", axis)


def channel_offset_100ghz(wavelength_nm: float, reference_nm: float) -> float:
    """Signed offset between two wavelengths in units of 100-GHz channels."""
    f = SPEED_OF_LIGHT_M_S / (wavelength_nm * 1e-9)
    f_ref = SPEED_OF_LIGHT_M_S / (reference_nm * 1e-9)
    return (f - f_ref) / CHANNEL_SPACING_HZ


def wavelength_for_offset(reference_nm: float, n_channels: float) -> float:
    """Wavelength sitting exactly n_channels * 100 GHz from the reference."""
    f_ref = SPEED_OF_LIGHT_M_S / (reference_nm * 1e-9)
    return SPEED_OF_LIGHT_M_S / (f_ref + n_channels * CHANNEL_SPACING_HZ) * 1e9


def rotation_from_params(params, reference_wavelength_nm: float,
                         wavelength_nm: Optional[float] = None,
                         pmd: Optional[PmdModel] = None) -> np.ndarray:
    """Composite channel rotation for parameter arrays (..., n, 2).

    Retardances scale by reference_wavelength/wavelength; if PMD is enabled a
    DGD rotation about its axis by magnitude * channel-offset is appended.
    """
    params = np.asarray(params, dtype=float)
    scale = 1.0
    if wavelength_nm is not None:
        if wavelength_nm <= 0:
            raise ValueError("wavelength must be positive")
        scale = reference_wavelength_nm / wavelength_nm
    n = params.shape[-2]
    mats = vwp_matrix(params[..., 1], params[..., 0] * scale)  # (..., n, 3, 3)
    m = mats[..., 0, :, :]
    for i in range(1, n):
        m = mats[..., i, :, :] @ m
    if pmd is not None and pmd.enabled and wavelength_nm is not None:
        offset = channel_offset_100ghz(wavelength_nm, reference_wavelength_nm)
        if offset != 0.0:
            m = rotation_about_axis(pmd.dgd_axis, pmd.dgd_magnitude * offset) @ m
    return m


def channel_rotation(channel: ChannelState, wavelength_nm: Optional[float] = None,
                     pmd: Optional[PmdModel] = None) -> PolRotation:
    """The channel's polarization rotation, optionally at an offset wavelength."""
    return PolRotation(
        rotation_from_params(channel.params, channel.reference_wavelength_nm,
                             wavelength_nm, pmd)
    )


# --- scripted trace I/O -----------------------------------------------------

def load_trace_csv(path) -> np.ndarray:
    """Load a scripted drift trace: one row per iteration, columns in
    (retardance, axis_angle) pairs per element, radians."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            rows.append([float(x) for x in row])
    if not rows:
        raise ValueError(f"no trace rows found in {path}")
    return np.asarray(rows, dtype=float)


def save_trace_csv(path, trace) -> None:
    trace = np.asarray(trace, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in trace:
            writer.writerow([repr(float(x)) for x in row])
