"""Scenario configuration: JSON-file descriptions of closed-loop experiments.

A scenario wires a drifting channel, a measurement model (ideal projections
or the full heterodyne chain), and the three-loop controller into one seeded,
reproducible run. Built-in scenarios reproducing the reference experiments
ship as data files next to this module, so tests and users share them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .channel import DRIFT_VARIANTS, DriftModel, load_trace_csv
from .poincare import BASIS_STATES, BASIS_OF_STATE

LOOP_NAMES = ("hv", "da", "rl")


class ScenarioError(ValueError):
    """Configuration problem, reported before any iteration runs."""


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ChannelConfig:
    n_elements: int = 4
    reference_wavelength_nm: float = 1581.2
    initial_retardances: Optional[tuple] = None

    def validate(self):
        if self.n_elements < 1:
            raise ScenarioError("channel.n_elements must be >= 1")
        if self.initial_retardances is not None \
                and len(self.initial_retardances) != self.n_elements:
            raise ScenarioError("channel.initial_retardances length mismatch")


@dataclass(frozen=True)
class DriftConfig:
    variant: str = "random_walk"
    step_size: float = math.pi / 360
    bias: float = 0.0
    frequency_hz: float = 0.0
    amplitude: float = 0.0
    trace_csv: Optional[str] = None
    perturb_angles: bool = True
    sinusoid_elements: tuple = (0,)

    def validate(self):
        if self.variant not in DRIFT_VARIANTS:
            raise ScenarioError(f"drift.variant must be one of {DRIFT_VARIANTS}")
        if self.step_size < 0:
            raise ScenarioError("drift.step_size must be >= 0")
        if self.variant == "scripted" and not self.trace_csv:
            raise ScenarioError("drift.trace_csv required for scripted drift")

    def to_model(self, seed: int, base_dir: Optional[Path] = None) -> DriftModel:
        trace = None
        if self.variant == "scripted":
            path = Path(self.trace_csv)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            trace = load_trace_csv(path)
        return DriftModel(
            variant=self.variant,
            step_size=self.step_size,
            bias=self.bias,
            frequency_hz=self.frequency_hz,
            amplitude=self.amplitude,
            trace=trace,
            seed=seed,
            sinusoid_elements=tuple(self.sinusoid_elements),
            perturb_angles=self.perturb_angles,
        )


@dataclass(frozen=True)
class PmdConfig:
    enabled: bool = False
    dgd_axis: tuple = (1.0, 0.0, 0.0)
    dgd_magnitude: float = 0.02  # radians per 100-GHz channel offset

    def validate(self):
        if self.enabled:
            norm = math.sqrt(sum(x * x for x in self.dgd_axis))
            if abs(norm - 1.0) > 1e-6:
                raise ScenarioError("pmd.dgd_axis must be unit length when enabled")


@dataclass(frozen=True)
class LaunchConfig:
    reference1: str = "R"
    reference2: str = "V"
    test: str = "V"
    test_wavelength_nm: Optional[float] = None

    def validate(self):
        for name in (self.reference1, self.reference2, self.test):
            if name.upper() not in BASIS_STATES:
                raise ScenarioError(f"launch state {name!r} is not one of H,V,D,A,R,L")

    def reference_bases(self):
        return (BASIS_OF_STATE[self.reference1.upper()],
                BASIS_OF_STATE[self.reference2.upper()])


@dataclass(frozen=True)
class BranchConfig:
    reference: int = 1  # 1-based launched-reference index the branch observes
    analyzer: str = "V"

    def validate(self, name: str):
        if self.reference not in (1, 2):
            raise ScenarioError(f"measurement.branches.{name}.reference must be 1 or 2")
        if self.analyzer.upper() not in BASIS_STATES:
            raise ScenarioError(f"measurement.branches.{name}.analyzer must be a basis state")


def _default_branches():
    return {
        "m_d": BranchConfig(reference=1, analyzer="V"),
        "m_h": BranchConfig(reference=1, analyzer="D"),
        "m_r": BranchConfig(reference=2, analyzer="D"),
    }


@dataclass(frozen=True)
class MeasurementConfig:
    mode: str = "ideal"  # 'ideal' or 'heterodyne'
    branches: dict = field(default_factory=_default_branches)
    reading_noise_db: float = 0.0
    ref_power_dbm: float = -50.0
    lo_power_dbm: float = 6.0
    filter_order: int = 7
    frequency_jitter: bool = False
    lpf_corner_hz: float = 10e3

    def __post_init__(self):
        branches = {}
        for key, value in self.branches.items():
            if isinstance(value, BranchConfig):
                branches[key] = value
            else:
                branches[key] = _build(BranchConfig, value, f"measurement.branches.{key}")
        object.__setattr__(self, "branches", branches)

    def validate(self):
        if self.mode not in ("ideal", "heterodyne"):
            raise ScenarioError("measurement.mode must be 'ideal' or 'heterodyne'")
        if set(self.branches) != {"m_d", "m_h", "m_r"}:
            raise ScenarioError("measurement.branches must define m_d, m_h, m_r")
        for name, branch in self.branches.items():
            branch.validate(name)

    def measurement_bases(self):
        return {k: BASIS_OF_STATE[v.analyzer.upper()] for k, v in self.branches.items()}


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = "base_pid"
    enabled_loops: tuple = LOOP_NAMES
    proportional_gain_db: float = 1.0
    integrator_corner_hz: float = 50.0
    corner_scales: tuple = (1.0, 0.8, 0.6)
    signs: tuple = (1, 1, -1)
    output_limit: float = 5 * math.pi       # actuator retardance range, radians
    actuator_rad_per_unit: float = 0.04     # volts-equivalent PID output -> radians
    setpoint_offset_db: float = 0.0
    error_clamp_db: Optional[float] = 6.0   # detector dynamic-range clamp on errors

    def validate(self):
        if self.mode not in ("base_pid", "slope_sign"):
            raise ScenarioError("controller.mode must be 'base_pid' or 'slope_sign'")
        for loop in self.enabled_loops:
            if loop not in LOOP_NAMES:
                raise ScenarioError(f"controller.enabled_loops entry {loop!r} unknown")
        if len(self.corner_scales) != 3 or len(self.signs) != 3:
            raise ScenarioError("controller.corner_scales and signs need 3 entries")
        if self.integrator_corner_hz <= 0:
            raise ScenarioError("controller.integrator_corner_hz must be positive")
        if self.actuator_rad_per_unit <= 0:
            raise ScenarioError("controller.actuator_rad_per_unit must be positive")
        if any(s not in (-1, 1) for s in self.signs):
            raise ScenarioError("controller.signs entries must be +1 or -1")


@dataclass(frozen=True)
class MetricsConfig:
    settle_iterations: int = 0
    lock_threshold_deg: float = 30.0
    loss_window: int = 100

    def validate(self):
        if self.settle_iterations < 0:
            raise ScenarioError("metrics.settle_iterations must be >= 0")


@dataclass(frozen=True)
class TomographyConfig:
    count: int = 95
    pair_rate_cps: float = 2.3
    integration_s: float = 15.0
    source_werner: float = 0.97
    iterations_between: int = 400
    apc_enabled: bool = True
    background_rate_cps: float = 0.0

    def validate(self):
        if self.count < 2:
            raise ScenarioError("tomography.count must be >= 2")
        if self.pair_rate_cps <= 0 or self.integration_s <= 0:
            raise ScenarioError("tomography rates and times must be positive")
        if not 0 <= self.source_werner <= 1:
            raise ScenarioError("tomography.source_werner must be in [0, 1]")


@dataclass(frozen=True)
class CalibrationScenarioConfig:
    pcm_seed: int = 0
    power_meter_noise: float = 0.0
    modulation_amplitude_pkpk: float = 2.0
    modulation_offset: float = 1.0
    threshold: float = 1e-3
    initial_bias_error: float = 0.2

    def validate(self):
        if self.modulation_amplitude_pkpk <= 0:
            raise ScenarioError("calibration.modulation_amplitude_pkpk must be positive")


@dataclass(frozen=True)
class FrequencyLockConfig:
    duration_s: float = 120.0
    setpoint_mhz: float = 70.0
    sample_rate_hz: float = 50.0
    meas_noise_mhz: float = 4.0
    drift_std_mhz: float = 50.0
    drift_tau_s: float = 30.0
    ramp_mhz_per_s: float = 0.0

    def validate(self):
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ScenarioError("frequency_lock duration and rate must be positive")


SCENARIO_KINDS = ("control", "tomography", "calibration", "frequency_lock")


@dataclass(frozen=True)
class Scenario:
    name: str = "unnamed"
    kind: str = "control"
    seed: int = 0
    iterations: int = 10000
    loop_rate_hz: float = 1000.0
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    pmd: PmdConfig = field(default_factory=PmdConfig)
    launch: LaunchConfig = field(default_factory=LaunchConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    tomography: Optional[TomographyConfig] = None
    calibration: Optional[CalibrationScenarioConfig] = None
    frequency_lock: Optional[FrequencyLockConfig] = None
    outputs: tuple = ("trajectories", "readings", "pid", "events", "summary")
    base_dir: Optional[str] = None  # resolves relative trace paths; set on load

    def validate(self) -> "Scenario":
        if self.kind not in SCENARIO_KINDS:
            raise ScenarioError(f"kind must be one of {SCENARIO_KINDS}")
        if self.iterations < 1:
            raise ScenarioError("iterations must be >= 1")
        if self.loop_rate_hz <= 0:
            raise ScenarioError("loop_rate_hz must be positive")
        self.channel.validate()
        self.drift.validate()
        self.pmd.validate()
        self.launch.validate()
        self.measurement.validate()
        self.controller.validate()
        self.metrics.validate()
        if self.kind == "tomography" and self.tomography is None:
            raise ScenarioError("tomography scenarios need a tomography section")
        if self.kind == "calibration" and self.calibration is None:
            raise ScenarioError("calibration scenarios need a calibration section")
        if self.kind == "frequency_lock" and self.frequency_lock is None:
            raise ScenarioError("frequency_lock scenarios need a frequency_lock section")
        for section in (self.tomography, self.calibration, self.frequency_lock):
            if section is not None:
                section.validate()
        return self

    # --- serialization -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        kwargs = dict(data)
        for key, sub in (("channel", ChannelConfig), ("drift", DriftConfig),
                         ("pmd", PmdConfig), ("launch", LaunchConfig),
                         ("measurement", MeasurementConfig),
                         ("controller", ControllerConfig), ("metrics", MetricsConfig)):
            if key in kwargs and not isinstance(kwargs[key], sub):
                kwargs[key] = _build(sub, kwargs[key], key)
        for key, sub in (("tomography", TomographyConfig),
                         ("calibration", CalibrationScenarioConfig),
                         ("frequency_lock", FrequencyLockConfig)):
            if kwargs.get(key) is not None and not isinstance(kwargs[key], sub):
                kwargs[key] = _build(sub, kwargs[key], key)
        for key in ("outputs",):
            if key in kwargs and isinstance(kwargs[key], list):
                kwargs[key] = tuple(kwargs[key])
        for tuple_path in (("controller", "enabled_loops"), ("controller", "corner_scales"),
                           ("controller", "signs"), ("channel", "initial_retardances"),
                           ("pmd", "dgd_axis"), ("drift", "sinusoid_elements")):
            section, attr = tuple_path
            cfg = kwargs.get(section)
            if cfg is not None and isinstance(getattr(cfg, attr, None), list):
                kwargs[section] = replace(cfg, **{attr: tuple(getattr(cfg, attr))})
        if base_dir is not None:
            kwargs["base_dir"] = str(base_dir)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("base_dir")
        for key in ("tomography", "calibration", "frequency_lock"):
            if data[key] is None:
                data.pop(key)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonify)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    # --- overrides ----------------------------------------------------------

    def with_overrides(self, seed: Optional[int] = None,
                       iterations: Optional[int] = None) -> "Scenario":
        out = self
        if seed is not None:
            out = replace(out, seed=seed)
        if iterations is not None:
            out = replace(out, iterations=iterations)
        return out.validate()


def _jsonify(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def builtin_scenario_names() -> list:
    root = resources.files("polstab") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_builtin(name: str) -> Scenario:
    root = resources.files("polstab") / "scenarios"
    candidate = root / f"{name}.json"
    if not candidate.is_file():
        raise ScenarioError(
            f"no built-in scenario {name!r}; available: {builtin_scenario_names()}"
        )
    data = json.loads(candidate.read_text())
    return Scenario.from_dict(data)
