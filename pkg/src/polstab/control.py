"""Three-axis PID polarization control with a slope-sign extended-range variant.

Three independent loops each tie one measurement branch to one correction
actuator. The wiring rule: a loop that drives a wave-plate with rotation axis
in basis 1 must consume a measurement in basis 2 taken on a reference launched
in basis 3, where (1, 2, 3) are the three mutually unbiased polarization bases
H/V, D/A, R/L in any duplicate-free assignment.

Base PID uses the error sign configured per loop. The slope-sign variant
multiplies the raw error by the finite-difference estimate of the sign of
d(measurement)/d(command), which lets the loop ride through the periodic
slope reversals of the sinusoidal measurement-vs-retardance response instead
of losing lock at the first fringe.

Gains follow the instrument convention: proportional gain in dB (20 log10)
and an integrator corner frequency in Hz, with Ki = Kp * 2*pi*corner and a
backward-Euler discrete integrator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .poincare import PolRotation, WaveplateElement, vwp_matrix

MUB_BASES = ("H/V", "D/A", "R/L")


class MubWiringError(ValueError):
    """A control loop repeats a basis among actuator, measurement, reference."""


@dataclass(frozen=True)
class PidConfig:
    proportional_gain_db: float = 1.0
    integrator_corner_hz: float = 1.0
    derivative_gain: Optional[float] = None  # linear gain; None disables the D term
    setpoint_db: float = 0.0
    output_limits: tuple = (-5 * math.pi, 5 * math.pi)
    sample_rate_hz: float = 1000.0
    sign: int = 1
    # Detector/input dynamic range: errors are clamped to +/- this many dB
    # before the gains, bounding the slew a deep fade can command.
    error_clamp_db: Optional[float] = None

    def __post_init__(self):
        if self.integrator_corner_hz <= 0:
            raise ValueError("integrator corner must be positive")
        lo, hi = self.output_limits
        if not lo < hi:
            raise ValueError("output_limits must satisfy min < max")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        if self.error_clamp_db is not None and self.error_clamp_db <= 0:
            raise ValueError("error_clamp_db must be positive when set")

    @property
    def kp(self) -> float:
        """Linear proportional gain from the dB setting."""
        return 10.0 ** (self.proportional_gain_db / 20.0)

    @property
    def ki(self) -> float:
        """Integral gain: Kp * 2*pi*corner (output per error-unit-second)."""
        return self.kp * 2.0 * math.pi * self.integrator_corner_hz


@dataclass(frozen=True)
class PidState:
    """Loop memory. Fields may be scalars or aligned arrays (batched loops).

    m_prev, c_prev, c_prev2 hold the measurement and command history the
    slope-sign error needs; slope_sign is the last resolved slope estimate
    (always +/-1). steps counts updates so the first two iterations, which
    lack usable history, fall back to the stored sign.
    """

    integral: float = 0.0
    prev_error: float = 0.0
    m_prev: float = 0.0
    c_prev: float = 0.0
    c_prev2: float = 0.0
    slope_sign: float = 1.0
    steps: int = 0

    @classmethod
    def zeros(cls, batch_shape=()) -> "PidState":
        if batch_shape == ():
            return cls()
        z = np.zeros(batch_shape)
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), np.ones(batch_shape), 0)


def _maybe_scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def slope_sign_error(state: PidState, m_n, setpoint_db):
    """Error with the measured slope sign folded in; returns (e_n, slope_sign).

    e_n = -(M_n - T) * Sgn(dM/dC), evaluated piecewise on the ordering of the
    last two commands. Degenerate cases: equal commands reuse the stored
    slope sign; an unchanged measurement gives Sgn(0) = 0 and hence e_n = 0
    while the stored sign is kept.
    """
    m_n = np.asarray(m_n, dtype=float)
    err = m_n - setpoint_db
    err_prev = np.asarray(state.m_prev, dtype=float) - setpoint_db
    dc = np.asarray(state.c_prev, dtype=float) - np.asarray(state.c_prev2, dtype=float)
    stored = np.asarray(state.slope_sign, dtype=float)

    with np.errstate(divide="ignore", invalid="ignore"):
        upper = np.sign((err - err_prev) / dc)          # C_{n-1} > C_{n-2}
        lower = np.sign((err_prev - err) / (-dc))       # C_{n-1} < C_{n-2}
    sgn = np.where(dc > 0, upper, np.where(dc < 0, lower, stored))
    e_n = -err * sgn
    new_sign = np.where(sgn != 0, sgn, stored)
    return _maybe_scalar(e_n), _maybe_scalar(new_sign)


def pid_step(config: PidConfig, state: PidState, m_n, *, error=None):
    """One PID iteration; returns (command, new_state).

    Backward-Euler discretization at config.sample_rate_hz. When `error` is
    None the base-mode error sign * (M_n - T) is used; the slope-sign
    controller passes its modified error in. Anti-windup clamps the integral
    so the saturated output is exactly reproduced by the accumulator.
    """
    m_n = np.asarray(m_n, dtype=float)
    dt = 1.0 / config.sample_rate_hz
    if error is None:
        e = config.sign * (m_n - config.setpoint_db)
    else:
        e = np.asarray(error, dtype=float)
    if config.error_clamp_db is not None:
        e = np.clip(e, -config.error_clamp_db, config.error_clamp_db)
    new_sign = state.slope_sign
    integral = np.asarray(state.integral, dtype=float) + e * dt
    p = config.kp * e
    i = config.ki * integral
    if config.derivative_gain is not None:
        d = config.derivative_gain * (e - np.asarray(state.prev_error)) / dt
    else:
        d = 0.0
    raw = p + i + d
    lo, hi = config.output_limits
    out = np.clip(raw, lo, hi)
    if config.ki > 0:
        integral = np.where(raw > hi, (hi - p - d) / config.ki, integral)
        integral = np.where(raw < lo, (lo - p - d) / config.ki, integral)
    new_state = PidState(
        integral=_maybe_scalar(integral),
        prev_error=_maybe_scalar(e),
        m_prev=_maybe_scalar(m_n),
        c_prev=_maybe_scalar(out),
        c_prev2=state.c_prev,
        slope_sign=new_sign,
        steps=state.steps + 1,
    )
    return _maybe_scalar(out), new_state


class PidLoop:
    """Stateful single loop: base PID or slope-sign mode."""

    def __init__(self, config: PidConfig, mode: str = "base_pid"):
        if mode not in ("base_pid", "slope_sign"):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.config = config
        self.mode = mode
        self.state = PidState()

    def reset(self, batch_shape=()):
        self.state = PidState.zeros(batch_shape)

    def update(self, m_n):
        if self.mode == "slope_sign":
            if self.state.steps < 2:
                e = -(np.asarray(m_n, dtype=float) - self.config.setpoint_db) \
                    * np.asarray(self.state.slope_sign)
                new_sign = self.state.slope_sign
            else:
                e, new_sign = slope_sign_error(self.state, m_n, self.config.setpoint_db)
            out, st = pid_step(self.config, self.state, m_n, error=_maybe_scalar(e))
            self.state = replace(st, slope_sign=new_sign)
        else:
            out, self.state = pid_step(self.config, self.state, m_n)
        return out


# --- correction stack -------------------------------------------------------

@dataclass(frozen=True)
class CorrectionStack:
    """The actuator chain: H/V squeezer, D/A squeezer, quarter-wave-biased
    H/V element, and the D/A squeezer it rotates into the R/L basis.

    The bias element holds a fixed calibration retardance (nominally pi/2);
    only the other three are driven. Conjugating the last squeezer by the
    bias makes it an R/L-axis rotation up to a constant output rotation,
    which downstream measurement calibration absorbs.
    """

    elements: tuple
    hv_index: int = 0
    da_index: int = 1
    bias_index: int = 2
    rl_index: int = 3

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @classmethod
    def default_squeezers(cls, retardance_limit: float = 5 * math.pi,
                          bias_retardance: float = math.pi / 2) -> "CorrectionStack":
        return cls(
            elements=(
                WaveplateElement(0.0, 0.0, retardance_limit),
                WaveplateElement(math.pi / 4, 0.0, retardance_limit),
                WaveplateElement(0.0, bias_retardance, retardance_limit),
                WaveplateElement(math.pi / 4, 0.0, retardance_limit),
            )
        )

    @property
    def driven_indices(self) -> tuple:
        return (self.hv_index, self.da_index, self.rl_index)

    def control_basis(self, actuator_index: int) -> str:
        """The control basis an actuator effectively rotates about."""
        if actuator_index == self.rl_index:
            return "R/L"
        angle = self.elements[actuator_index].axis_angle
        if abs(angle) < 1e-9 or abs(angle - math.pi) < 1e-9:
            return "H/V"
        if abs(angle - math.pi / 4) < 1e-9:
            return "D/A"
        raise ValueError(f"actuator {actuator_index} axis {angle} is not on a cardinal basis")

    @property
    def axis_angles(self) -> np.ndarray:
        return np.array([e.axis_angle for e in self.elements])

    @property
    def retardances(self) -> np.ndarray:
        return np.array([e.retardance for e in self.elements])

    def matrix_from_retardances(self, retardances) -> np.ndarray:
        """Stack rotation for retardance arrays (..., n_elements), batched."""
        retardances = np.asarray(retardances, dtype=float)
        axes = self.axis_angles
        m = vwp_matrix(axes[0], retardances[..., 0])
        for i in range(1, len(self.elements)):
            m = vwp_matrix(axes[i], retardances[..., i]) @ m
        return m

    def rotation(self) -> PolRotation:
        return PolRotation(self.matrix_from_retardances(self.retardances))

    def output_frame_correction(self) -> PolRotation:
        """Constant rotation undoing the bias element at the stack output.

        Working in this corrected frame makes the driven R/L squeezer a pure
        R/L-axis rotation and restores literal-basis analyzers.
        """
        bias = self.elements[self.bias_index]
        return PolRotation(vwp_matrix(bias.axis_angle, -bias.retardance))

    def with_retardances(self, retardances) -> "CorrectionStack":
        retardances = np.asarray(retardances, dtype=float)
        elements = tuple(
            e.with_retardance(float(r)) for e, r in zip(self.elements, retardances)
        )
        return replace(self, elements=elements)


# --- three-axis controller --------------------------------------------------

# Composite dB-to-retardance scale of the analog chain: the log detector's
# volts-per-dB slope times the squeezer's radians-per-volt drive constant.
# PID outputs are in this volts-equivalent unit; actuators apply
# retardance = ACTUATOR_RAD_PER_UNIT * output.
ACTUATOR_RAD_PER_UNIT = 0.04


@dataclass(frozen=True)
class LoopSpec:
    """One loop's wiring: which actuator, which measurement, which reference."""

    actuator_index: int
    measurement: str  # 'm_d', 'm_h', or 'm_r'
    reference_index: int  # 0 or 1 (launched reference the branch observes)
    pid: PidConfig = field(default_factory=PidConfig)

    def __post_init__(self):
        if self.measurement not in ("m_d", "m_h", "m_r"):
            raise ValueError(f"unknown measurement key {self.measurement!r}")


@dataclass(frozen=True)
class RangeLimitEvent:
    loop_index: int
    actuator_index: int
    commanded: float
    limit: float


def validate_mub_wiring(loops, stack: CorrectionStack, measurement_bases: dict,
                        reference_bases) -> None:
    """Reject any loop whose (actuator, measurement, reference) bases repeat."""
    for k, loop in enumerate(loops):
        bases = (
            stack.control_basis(loop.actuator_index),
            measurement_bases[loop.measurement],
            reference_bases[loop.reference_index],
        )
        if len(set(bases)) != 3:
            raise MubWiringError(
                f"loop {k}: bases {bases} repeat; actuator, measurement and "
                f"reference must use three distinct mutually unbiased bases"
            )
        for b in bases:
            if b not in MUB_BASES:
                raise MubWiringError(f"loop {k}: unknown basis {b!r}")


class ThreeAxisController:
    """Three independent loops driving the correction stack.

    mode 'base_pid' runs the configured error signs; 'slope_sign' replaces
    each loop's error with the slope-sign form. State is single-owner and
    advanced synchronously with the simulation clock.
    """

    def __init__(self, loops, mode: str = "base_pid",
                 rad_per_unit: float = ACTUATOR_RAD_PER_UNIT):
        loops = tuple(loops)
        if mode not in ("base_pid", "slope_sign"):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.loops = loops
        self.mode = mode
        self.rad_per_unit = rad_per_unit
        self.states = [PidState() for _ in loops]
        self._saturated = [False for _ in loops]

    def reset(self, batch_shape=()):
        self.states = [PidState.zeros(batch_shape) for _ in self.loops]
        self._saturated = [False for _ in self.loops]

    def validate(self, stack: CorrectionStack, measurement_bases: dict,
                 reference_bases) -> None:
        validate_mub_wiring(self.loops, stack, measurement_bases, reference_bases)

    def loop_error(self, k: int, m_n):
        """The error fed to loop k's PID for measurement m_n."""
        loop = self.loops[k]
        state = self.states[k]
        if self.mode == "slope_sign":
            if state.steps < 2:
                e = -(np.asarray(m_n, dtype=float) - loop.pid.setpoint_db) \
                    * np.asarray(state.slope_sign)
                return _maybe_scalar(e), state.slope_sign
            return slope_sign_error(state, m_n, loop.pid.setpoint_db)
        return None, state.slope_sign  # base mode: pid_step derives the error

    def step(self, reading, stack: CorrectionStack):
        """Advance all loops one iteration; returns (new_stack, events).

        `reading` is anything exposing m_d / m_h / m_r attributes in dB.
        Commands map onto actuator retardances through rad_per_unit; commands
        whose retardance would exceed an actuator's range are clamped and
        reported as range-limit events on the transition into saturation.
        """
        retardances = stack.retardances
        events = []
        for k, loop in enumerate(self.loops):
            m_n = getattr(reading, loop.measurement)
            error, new_sign = self.loop_error(k, m_n)
            out, st = pid_step(loop.pid, self.states[k], m_n, error=error)
            self.states[k] = replace(st, slope_sign=new_sign)
            element = stack.elements[loop.actuator_index]
            limit = element.retardance_limit
            commanded = float(out) * self.rad_per_unit
            clamped = float(np.clip(commanded, -limit, limit))
            at_limit = abs(commanded) >= limit - 1e-12
            if at_limit and not self._saturated[k]:
                events.append(RangeLimitEvent(k, loop.actuator_index, commanded, limit))
            self._saturated[k] = bool(at_limit)
            retardances[loop.actuator_index] = clamped
        return stack.with_retardances(retardances), events


def controller_step(controller: ThreeAxisController, reading,
                    stack: CorrectionStack):
    """Functional alias for ThreeAxisController.step."""
    return controller.step(reading, stack)


def default_loops(setpoint_db: float, sample_rate_hz: float = 1000.0,
                  proportional_gain_db: float = 1.0,
                  integrator_corner_hz: float = 1.0,
                  corner_scales=(1.0, 0.8, 0.6),
                  signs=(-1, -1, 1),
                  output_limit_rad: float = 5 * math.pi,
                  rad_per_unit: float = ACTUATOR_RAD_PER_UNIT) -> tuple:
    """The standard wiring: m_h -> H/V squeezer, m_d -> D/A squeezer,
    m_r -> R/L composite, with per-loop detuned integrator corners.

    Loop signs default to the pattern that is stable for the package's
    rotation conventions: the H/V and D/A loops share a sign and the R/L
    loop takes the opposite one.
    """
    limit_units = output_limit_rad / rad_per_unit

    def cfg(scale, sign):
        return PidConfig(
            proportional_gain_db=proportional_gain_db,
            integrator_corner_hz=integrator_corner_hz * scale,
            setpoint_db=setpoint_db,
            output_limits=(-limit_units, limit_units),
            sample_rate_hz=sample_rate_hz,
            sign=sign,
        )

    return (
        LoopSpec(actuator_index=0, measurement="m_h", reference_index=0,
                 pid=cfg(corner_scales[0], signs[0])),
        LoopSpec(actuator_index=1, measurement="m_d", reference_index=0,
                 pid=cfg(corner_scales[1], signs[1])),
        LoopSpec(actuator_index=3, measurement="m_r", reference_index=1,
                 pid=cfg(corner_scales[2], signs[2])),
    )


def write_pid_log(path, timestamps, outputs) -> None:
    """CSV of controller outputs: timestamp plus one column per loop."""
    outputs = np.asarray(outputs, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s"] + [f"c{k}" for k in range(outputs.shape[1])])
        for t, row in zip(timestamps, outputs):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def write_event_log(path, events) -> None:
    """CSV of range-limit events: (timestamp, loop, actuator, commanded, limit)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "loop", "actuator", "commanded", "limit"])
        for t, ev in events:
            writer.writerow([repr(float(t)), ev.loop_index, ev.actuator_index,
                             repr(ev.commanded), repr(ev.limit)])
