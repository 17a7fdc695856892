"""Receiver calibration by back-propagated modulation nulling.

A probe launched backward from a measurement port retraces the polarizer,
wave-plates, and uncompensated fiber, then passes the correction stack in
reverse. A state sitting on a squeezer's axis is untouched by that
squeezer's retardance, so dithering one squeezer and turning the measurement
wave-plates until the observed power modulation vanishes aligns that
measurement with the squeezer's basis, fiber transformation included.

The four-step sequence: null the last squeezer's modulation from the
D-measurement port, set the quarter-wave bias element by maximizing the
second squeezer's modulation, re-null on the second squeezer, then null the
first squeezer from the H-measurement port. Each null is a coordinate
descent over the relevant wave-plate angles with a shrinking step schedule,
alternating between the plates whenever one stalls.

The observed modulation depth is the peak-to-peak transmitted power
fraction, maximized over an auxiliary polarization-controller orientation
ahead of the power meter; geometrically that equals half the diameter of
the swept arc on the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .control import CorrectionStack
from .heterodyne import MeasurementOptics
from .poincare import PolRotation, vwp_matrix

DEG = math.pi / 180.0


@dataclass(frozen=True)
class ModulationConfig:
    frequency_hz: float = 10.0
    amplitude_pkpk: float = 2.0  # retardance swing, radians peak-to-peak
    offset: float = 1.0          # retardance at the sweep midpoint
    samples_per_cycle: int = 48

    def sweep(self) -> np.ndarray:
        phase = np.linspace(0.0, 2 * math.pi, self.samples_per_cycle, endpoint=False)
        return self.offset + 0.5 * self.amplitude_pkpk * np.sin(phase)


@dataclass(frozen=True)
class DescentConfig:
    angle_steps_deg: tuple = (5.0, 1.0, 0.2, 0.05)
    bias_steps_rad: tuple = (0.1, 0.02, 0.005, 0.001)
    threshold: float = 1e-3      # converged when depth falls below this
    max_evaluations: int = 40000
    grid_points: int = 12        # coarse multi-start grid per angle


@dataclass(frozen=True)
class CalibrationPlan:
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    descent: DescentConfig = field(default_factory=DescentConfig)

    def __post_init__(self):
        if self.modulation.amplitude_pkpk <= 0:
            raise ValueError("modulation amplitude must be positive")
        if self.descent.threshold <= 0:
            raise ValueError("descent threshold must be positive")


@dataclass(frozen=True)
class CalibrationSystem:
    """What the procedure sees: the actuator stack, the unknown fiber between
    stack and measurement, the adjustable measurement optics, and meter noise."""

    stack: CorrectionStack
    pcm: PolRotation = field(default_factory=PolRotation.identity)
    optics: MeasurementOptics = field(default_factory=MeasurementOptics)
    power_meter_noise: float = 0.0
    noise_seed: int = 0


@dataclass(frozen=True)
class CalibrationResult:
    qwp1: float
    hwp1: float
    qwp2: float
    hwp2: float
    ch3_bias: float
    residuals: dict
    evaluations: int

    def to_dict(self) -> dict:
        return {
            "qwp1": self.qwp1,
            "hwp1": self.hwp1,
            "qwp2": self.qwp2,
            "hwp2": self.hwp2,
            "ch3_bias": self.ch3_bias,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "evaluations": self.evaluations,
        }

    def apply(self, system: CalibrationSystem) -> CalibrationSystem:
        optics = replace(system.optics, qwp1=self.qwp1, hwp1=self.hwp1,
                         qwp2=self.qwp2, hwp2=self.hwp2)
        elements = list(system.stack.elements)
        bias_index = system.stack.bias_index
        elements[bias_index] = elements[bias_index].with_retardance(self.ch3_bias)
        return replace(system, stack=replace(system.stack, elements=tuple(elements)),
                       optics=optics)


class CalibrationFailed(RuntimeError):
    def __init__(self, message, residuals: dict):
        super().__init__(message)
        self.residuals = residuals


def _backprop_probe(system: CalibrationSystem, port: int, down_to: int,
                    optics: Optional[MeasurementOptics] = None) -> np.ndarray:
    """Probe state arriving (backward) at element `down_to`, exclusive.

    Backward propagation transposes the forward chain: the probe leaves the
    measurement port as that port's analyzer state and passes the stack
    elements in reverse order until it reaches the modulated one.
    """
    optics = optics or system.optics
    state = optics.analyzer(port)
    elements = system.stack.elements
    for i in range(len(elements) - 1, down_to, -1):
        state = vwp_matrix(elements[i].axis_angle, elements[i].retardance).T @ state
    return state


def modulation_depth(system: CalibrationSystem, modulated_channel: int,
                     port: int, modulation: Optional[ModulationConfig] = None,
                     optics: Optional[MeasurementOptics] = None,
                     bias_override: Optional[float] = None,
                     rng: Optional[np.random.Generator] = None) -> float:
    """Peak-to-peak power-fraction modulation seen from a measurement port
    while one squeezer's retardance sweeps through a modulation cycle.

    The auxiliary analyzer ahead of the power meter is assumed optimally
    oriented, so the depth equals half the largest chord of the swept arc.
    """
    modulation = modulation or ModulationConfig()
    system_eff = system
    if bias_override is not None:
        elements = list(system.stack.elements)
        idx = system.stack.bias_index
        elements[idx] = elements[idx].with_retardance(bias_override)
        system_eff = replace(system, stack=replace(system.stack, elements=tuple(elements)))
    probe = _backprop_probe(system_eff, port, modulated_channel, optics)
    element = system_eff.stack.elements[modulated_channel]
    sweep = modulation.sweep()
    states = np.einsum(
        "kij,j->ki", vwp_matrix(element.axis_angle, sweep).transpose(0, 2, 1), probe
    )
    diff = states[:, None, :] - states[None, :, :]
    depth = 0.5 * math.sqrt(float(np.max(np.sum(diff * diff, axis=-1))))
    if rng is not None and system.power_meter_noise > 0:
        depth = abs(depth + rng.normal(0.0, system.power_meter_noise))
    return depth


class _Budget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    def tick(self):
        self.used += 1
        if self.used > self.limit:
            raise _BudgetExhausted()


class _BudgetExhausted(Exception):
    pass


def _pattern_search(objective, x0, steps, budget: _Budget, periods=None):
    """Greedy coordinate descent with a shrinking step schedule."""
    x = list(x0)
    best = objective(x)
    budget.tick()
    for step in steps:
        improved = True
        while improved:
            improved = False
            for i in range(len(x)):
                for delta in (step, -step):
                    cand = list(x)
                    cand[i] = cand[i] + delta
                    if periods is not None and periods[i]:
                        cand[i] %= periods[i]
                    v = objective(cand)
                    budget.tick()
                    if v < best - 1e-15:
                        x, best = cand, v
                        improved = True
                        break
    return x, best


def _null_step(system, channel, port, angle_names, plan, budget, rng):
    """Minimize modulation depth over a pair of wave-plate angles, multi-start."""
    mod = plan.modulation
    grid = plan.descent.grid_points

    def objective(angles):
        optics = replace(system.optics, **dict(zip(angle_names, angles)))
        return modulation_depth(system, channel, port, mod, optics=optics, rng=rng)

    starts = []
    for a in np.linspace(0, math.pi, grid, endpoint=False):
        for b in np.linspace(0, math.pi, grid, endpoint=False):
            starts.append(((a, b), objective((a, b))))
            budget.tick()
    starts.sort(key=lambda t: t[1])
    best_x, best_v = starts[0]
    for x0, _ in starts[:3]:
        x, v = _pattern_search(objective, x0,
                               [s * DEG for s in plan.descent.angle_steps_deg],
                               budget, periods=(math.pi, math.pi))
        if v < best_v:
            best_x, best_v = tuple(x), v
    return dict(zip(angle_names, best_x)), best_v


def calibrate(system: CalibrationSystem, plan: Optional[CalibrationPlan] = None
              ) -> CalibrationResult:
    """Run the four-step receiver calibration; returns the recovered angles.

    Raises CalibrationFailed with per-step residual depths when any nulling
    step cannot reach the descent threshold within the evaluation budget.
    """
    plan = plan or CalibrationPlan()
    budget = _Budget(plan.descent.max_evaluations)
    rng = (np.random.default_rng(system.noise_seed)
           if system.power_meter_noise > 0 else None)
    stack = system.stack
    residuals = {}
    try:
        # Step 1: null the last squeezer's modulation from the D port.
        angles, depth = _null_step(system, stack.rl_index, 2, ("qwp2", "hwp2"),
                                   plan, budget, rng)
        system = replace(system, optics=replace(system.optics, **angles))
        residuals["step1_ch4_null"] = depth

        # Step 2: set the quarter-wave bias by maximizing the D/A squeezer's
        # modulation; the probe reaches it through the bias element.
        def bias_objective(xs):
            return -modulation_depth(system, stack.da_index, 2, plan.modulation,
                                     bias_override=xs[0], rng=rng)

        nominal = system.stack.elements[stack.bias_index].retardance
        candidates = [nominal + d for d in np.linspace(-0.6, 0.6, 25)]
        scores = []
        for c in candidates:
            scores.append((bias_objective([c]), c))
            budget.tick()
        start = min(scores)[1]
        xs, neg_depth = _pattern_search(bias_objective, [start],
                                        plan.descent.bias_steps_rad, budget)
        bias = float(xs[0])
        residuals["step2_bias_peak"] = -neg_depth
        elements = list(system.stack.elements)
        elements[stack.bias_index] = elements[stack.bias_index].with_retardance(bias)
        system = replace(system, stack=replace(system.stack, elements=tuple(elements)))

        # Step 3: re-null the D port on the D/A squeezer (through the bias).
        angles, depth = _null_step(system, stack.da_index, 2, ("qwp2", "hwp2"),
                                   plan, budget, rng)
        system = replace(system, optics=replace(system.optics, **angles))
        residuals["step3_ch2_null"] = depth

        # Step 4: null the H port on the first squeezer.
        angles, depth = _null_step(system, stack.hv_index, 1, ("qwp1", "hwp1"),
                                   plan, budget, rng)
        system = replace(system, optics=replace(system.optics, **angles))
        residuals["step4_ch1_null"] = depth
    except _BudgetExhausted:
        raise CalibrationFailed(
            f"calibration exceeded {plan.descent.max_evaluations} evaluations",
            residuals,
        ) from None

    threshold = plan.descent.threshold
    failed = {k: v for k, v in residuals.items()
              if k.endswith("_null") and v > threshold}
    if failed:
        raise CalibrationFailed(
            f"nulling residuals above threshold {threshold}: {failed}", residuals
        )
    return CalibrationResult(
        qwp1=system.optics.qwp1,
        hwp1=system.optics.hwp1,
        qwp2=system.optics.qwp2,
        hwp2=system.optics.hwp2,
        ch3_bias=system.stack.elements[stack.bias_index].retardance,
        residuals=residuals,
        evaluations=budget.used,
    )


def control_axis_angles(stack: CorrectionStack, pcm: Optional[PolRotation] = None,
                        delta: float = 1e-5) -> dict:
    """Pairwise angles (radians) between the three control-circle axes at the
    operating point, from finite differences of the arrival rotation.

    Perfect calibration gives three mutually orthogonal axes; a bias element
    off quarter-wave tilts the R/L axis toward the D/A one.
    """
    pcm_m = (pcm or PolRotation.identity()).matrix
    base = stack.retardances

    def arrival(retardances):
        return pcm_m @ stack.matrix_from_retardances(retardances)

    axes = []
    m0 = arrival(base)
    for idx in stack.driven_indices:
        bumped = base.copy()
        bumped[idx] += delta
        g = (arrival(bumped) - m0) / delta @ m0.T
        # generator of a rotation is antisymmetric: extract its axis
        axis = np.array([g[2, 1] - g[1, 2], g[0, 2] - g[2, 0], g[1, 0] - g[0, 1]]) / 2
        axes.append(axis / np.linalg.norm(axis))
    out = {}
    names = ("hv", "da", "rl")
    for i in range(3):
        for j in range(i + 1, 3):
            # axis sign is immaterial, so fold with |dot|; orthogonal -> pi/2
            ang = math.acos(min(1.0, float(abs(axes[i] @ axes[j]))))
            out[f"{names[i]}-{names[j]}"] = ang
    return out
