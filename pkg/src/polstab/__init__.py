"""polstab: complete polarization-channel stabilization, simulated end to end.

Subpackages by capability:

- poincare: Stokes/Jones states and wave-plate rotation algebra
- channel: drifting fiber-channel model with wavelength dependence
- heterodyne: beat-note measurement chain and frequency stabilization
- control: three-axis PID and the slope-sign extended-range variant
- calibration: modulation-nulling receiver calibration
- tomography: two-qubit state/process estimation and fidelity series
- driftspectrum: accumulate/decimate FFT drift analyzer
- scenarios, simulate: seeded closed-loop experiment runner
"""

from .poincare import (
    BASIS_STATES,
    JonesState,
    PolRotation,
    StokesState,
    WaveplateElement,
    angular_error,
    compose,
    project_power,
    vwp_rotation,
)
from .channel import ChannelState, DriftModel, DriftProcess, PmdModel, channel_rotation, drift_step
from .control import (
    CorrectionStack,
    LoopSpec,
    PidConfig,
    PidLoop,
    PidState,
    ThreeAxisController,
    controller_step,
    pid_step,
    slope_sign_error,
)
from .heterodyne import (
    FrequencyPlan,
    FrequencyStabilizer,
    MeasurementOptics,
    PartialStokesReading,
    PowerDetectorModel,
    RfChain,
    beat_powers,
    chain_and_detect,
)
from .calibration import (
    CalibrationPlan,
    CalibrationResult,
    CalibrationSystem,
    calibrate,
    modulation_depth,
)
from .tomography import (
    ChoiMatrix,
    DensityMatrix,
    TomographyRecord,
    choi_from_two_qubit,
    estimate_state,
    fidelity_series,
    simulate_tomography,
    uhlmann_fidelity,
)
from .driftspectrum import (
    DriftSpectrumAnalyzer,
    SamplePyramid,
    SpectrumResult,
    accumulate_and_fft,
    drift_report,
    normalize,
)
from .scenarios import Scenario, ScenarioError, load_builtin
from .simulate import compare, run, run_batch, run_frequency_lock, run_tomography_series

__version__ = "0.1.0"
