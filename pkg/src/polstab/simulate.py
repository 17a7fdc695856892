"""Closed-loop scenario runner: drift -> channel -> measurement -> control.

Each iteration advances the drifting channel, composes it with the correction
stack, derives the three measurement readings (ideal projections or the
heterodyne chain), and lets the three PID loops move their actuators. All
state carries a leading batch dimension so one run can advance many seeds in
lockstep; a single-seed run is the batch-of-one case.

Trajectories are logged in the corrected output frame (the constant
quarter-wave bias of the R/L composite actuator undone), which is the frame
where a perfectly held channel pins every launched state at its starting
point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import control as ctl
from . import heterodyne as het
from .channel import PmdModel, rotation_from_params, step_params
from .poincare import BASIS_STATES, vwp_matrix
from .scenarios import Scenario, ScenarioError
from .tomography import (fidelity_series, simulate_tomography, werner_state,
                         write_fidelity_series_csv)
from .poincare import su2_from_rotation

RAD2DEG = 180.0 / math.pi

_LOOP_TO_BRANCH = {"hv": "m_h", "da": "m_d", "rl": "m_r"}
_LOOP_TO_ACTUATOR = {"hv": 0, "da": 1, "rl": 3}
_NOISE_SEED_OFFSET = 0x9E3779B9


def _chain_matrices(axis_angles, retardances):
    """Compose a wave-plate chain, batched: inputs (..., n) -> (..., 3, 3)."""
    mats = vwp_matrix(axis_angles, retardances)  # (..., n, 3, 3)
    out = mats[..., 0, :, :]
    for i in range(1, mats.shape[-3]):
        out = mats[..., i, :, :] @ out
    return out


class _LoopState:
    """Lean per-loop PID state as flat arrays; semantics mirror control.pid_step
    and control.slope_sign_error exactly (pinned by an equivalence test)."""

    def __init__(self, batch: int):
        z = np.zeros(batch)
        self.integral = z.copy()
        self.m_prev = z.copy()
        self.c_prev = z.copy()
        self.c_prev2 = z.copy()
        self.slope_sign = np.ones(batch)
        self.steps = 0


def _loop_update(cfg, st: _LoopState, m, slope_mode: bool):
    """One vectorized PID iteration; returns the commanded output array."""
    t_db = cfg.setpoint_db
    err = m - t_db
    if slope_mode:
        if st.steps < 2:
            e = -err * st.slope_sign
        else:
            dc = st.c_prev - st.c_prev2
            derr = err - (st.m_prev - t_db)
            with np.errstate(divide="ignore", invalid="ignore"):
                upper = np.sign(derr / dc)
                lower = np.sign(-derr / (-dc))
            sg = np.where(dc > 0, upper, np.where(dc < 0, lower, st.slope_sign))
            e = -err * sg
            st.slope_sign = np.where(sg != 0, sg, st.slope_sign)
    else:
        e = cfg.sign * err
    if cfg.error_clamp_db is not None:
        e = np.clip(e, -cfg.error_clamp_db, cfg.error_clamp_db)
    dt = 1.0 / cfg.sample_rate_hz
    integral = st.integral + e * dt
    p = cfg.kp * e
    raw = p + cfg.ki * integral
    lo, hi = cfg.output_limits
    out = np.clip(raw, lo, hi)
    over = raw > hi
    under = raw < lo
    if over.any() or under.any():
        integral = np.where(over, (hi - p) / cfg.ki, integral)
        integral = np.where(under, (lo - p) / cfg.ki, integral)
    st.integral = integral
    st.m_prev = m
    st.c_prev2 = st.c_prev
    st.c_prev = out
    st.steps += 1
    return out


class _IdealMeasurement:
    """Readings straight from projection fractions, in dB."""

    def __init__(self, scenario: Scenario, rng: Optional[np.random.Generator]):
        m = scenario.measurement
        self.noise_db = m.reading_noise_db
        self.rng = rng
        self.branches = {
            key: (cfg.reference - 1, BASIS_STATES[cfg.analyzer.upper()])
            for key, cfg in m.branches.items()
        }
        self.floor = 1e-12

    def setpoint_db(self, branch: str) -> float:
        return 10.0 * math.log10(0.5)

    def readings(self, y_states: dict) -> dict:
        out = {}
        for branch, (ref_idx, analyzer) in self.branches.items():
            p = np.clip((1.0 + y_states[ref_idx] @ analyzer) / 2.0, self.floor, 1.0)
            m = 10.0 * np.log10(p)
            if self.rng is not None and self.noise_db > 0:
                m = m + self.rng.normal(0.0, self.noise_db, size=np.shape(m))
            out[branch] = m
        return out


class _HeterodyneMeasurement:
    """The full beat-note chain, vectorized over the batch dimension.

    Detector 1 carries the V measurement, detector 2 the D measurement; the
    unshifted reference beats at Y, the shifted one at X + Y. Relative laser
    frequency wander (optional) moves the tones across the filter skirts and
    the gain slope, turning frequency noise into reading noise.
    """

    def __init__(self, scenario: Scenario, rng: Optional[np.random.Generator]):
        m = scenario.measurement
        self._validate_branches(m)
        self.plan = het.FrequencyPlan()
        self.chain = het.RfChain.default(order=m.filter_order)
        self.det = het.PowerDetectorModel(
            reading_noise_db=m.reading_noise_db,
            lpf=het.DigitalLpf(corner_hz=m.lpf_corner_hz),
        )
        self.optics = het.MeasurementOptics.default_calibrated()
        self.ref_dbm = m.ref_power_dbm
        self.lo_dbm = m.lo_power_dbm
        self.rng = rng
        self.a1 = self.optics.analyzer(1)
        self.a2 = self.optics.analyzer(2)
        self.lpf = het.make_lpf_streams(self.det, scenario.loop_rate_hz)
        self.dt = 1.0 / scenario.loop_rate_hz
        self.jitter = None
        self.stab = None
        self._stab_every = 1
        self._tick = 0
        if m.frequency_jitter:
            self.jitter = het.LaserFrequencyDrift(seed=scenario.seed + 7)
            cfg = het.FreqStabConfig(setpoint_mhz=self.plan.y_mhz)
            self.stab = het.FrequencyStabilizer(cfg)
            self._stab_every = max(1, round(scenario.loop_rate_hz / cfg.sample_rate_hz))
            self._stab_rng = np.random.default_rng(scenario.seed + 11)
        self.floor_dbm = het.shot_noise_floor_dbm(self.lo_dbm)

    @staticmethod
    def _validate_branches(m):
        expect = {"m_d": (1, "H/V"), "m_h": (1, "D/A"), "m_r": (2, "D/A")}
        from .poincare import BASIS_OF_STATE
        for key, (ref, basis) in expect.items():
            cfg = m.branches[key]
            if cfg.reference != ref or BASIS_OF_STATE[cfg.analyzer.upper()] != basis:
                raise ScenarioError(
                    f"heterodyne mode fixes branch {key} to reference {ref} in the "
                    f"{basis} basis; adjust measurement.branches or use ideal mode"
                )

    def setpoint_db(self, branch: str) -> float:
        """Nominal reading with both tones at half projection."""
        y, xy = self.plan.y_mhz, self.plan.y_mhz + self.plan.x_mhz
        dom_f, con_f = (xy, y) if branch == "m_r" else (y, xy)
        base = het.TONE_CONVERSION_DB + self.ref_dbm + self.lo_dbm + 10 * math.log10(0.5)
        dom = base + self.chain.branch_response_db(branch, dom_f)
        con = base + self.chain.branch_response_db(branch, con_f)
        noise = self.floor_dbm + self.chain.branch_response_db(branch, dom_f)
        return 10.0 * math.log10(10 ** (dom / 10) + 10 ** (con / 10) + 10 ** (noise / 10))

    def readings(self, x_states: dict) -> dict:
        y_mhz = self.plan.y_mhz
        if self.jitter is not None:
            wander = self.jitter.step(self.dt)
            if self._tick % self._stab_every == 0:
                actual = self.plan.y_mhz + wander - self.stab.state.actuation_mhz
                measured = actual + self._stab_rng.normal(0.0, 4.0)
                self.stab.step(measured)
            y_mhz = self.plan.y_mhz + wander - self.stab.state.actuation_mhz
            self._tick += 1
        xy_mhz = y_mhz + self.plan.x_mhz

        base = het.TONE_CONVERSION_DB + self.ref_dbm + self.lo_dbm
        proj = {
            ("det1", 0): np.clip((1 + x_states[0] @ self.a1) / 2, 1e-30, 1.0),
            ("det1", 1): np.clip((1 + x_states[1] @ self.a1) / 2, 1e-30, 1.0),
            ("det2", 0): np.clip((1 + x_states[0] @ self.a2) / 2, 1e-30, 1.0),
            ("det2", 1): np.clip((1 + x_states[1] @ self.a2) / 2, 1e-30, 1.0),
        }
        tones = {k: np.maximum(base + 10 * np.log10(p), self.floor_dbm)
                 for k, p in proj.items()}
        branch_map = {
            "m_d": ("det1", 0, y_mhz, 1, xy_mhz),
            "m_h": ("det2", 0, y_mhz, 1, xy_mhz),
            "m_r": ("det2", 1, xy_mhz, 0, y_mhz),
        }
        out = {}
        for branch, (det, dom_ref, dom_f, con_ref, con_f) in branch_map.items():
            dom = tones[(det, dom_ref)] + self.chain.branch_response_db(branch, dom_f)
            con = tones[(det, con_ref)] + self.chain.branch_response_db(branch, con_f)
            noise = self.floor_dbm + self.chain.branch_response_db(branch, dom_f)
            linear = 10 ** (dom / 10) + 10 ** (con / 10) + 10 ** (noise / 10)
            reading = 10.0 * np.log10(linear)
            if self.rng is not None and self.det.reading_noise_db > 0:
                reading = reading + self.rng.normal(0.0, self.det.reading_noise_db,
                                                    size=np.shape(reading))
            reading = self.lpf[branch].push(reading)
            out[branch] = reading
        return out


@dataclass
class SimulationResult:
    """Raw arrays from one batched closed-loop run."""

    scenario: Scenario
    batch_size: int
    angular_errors_rad: dict        # state name -> (iterations, S)
    readings: np.ndarray            # (iterations, S, 3) for (m_d, m_h, m_r)
    pid_outputs: np.ndarray         # (iterations, S, 3) driven retardances
    event_counts: np.ndarray        # (S, 3) range-limit transitions per loop
    event_log: list                 # (time_s, RangeLimitEvent) for seed 0
    trajectories: Optional[dict]    # state name -> (iterations, 3), seed 0 only
    captured_rotations: Optional[list]  # periodic (3, 3) test-signal rotations
    setpoints_db: dict


def _summary_stats(err_rad: np.ndarray, settle: int, lock_threshold_deg: float,
                   loss_window: int) -> dict:
    """Per-seed angular-error statistics over the post-settle window."""
    window = err_rad[settle:]
    deg = window * RAD2DEG
    above = deg > lock_threshold_deg
    run = np.zeros(deg.shape[1], dtype=int)
    loss = np.zeros(deg.shape[1], dtype=bool)
    for t in range(above.shape[0]):
        run = (run + 1) * above[t]
        loss |= run >= loss_window
    return {
        "mean_deg": deg.mean(axis=0),
        "median_deg": np.median(deg, axis=0),
        "rms_deg": np.sqrt((deg ** 2).mean(axis=0)),
        "max_deg": deg.max(axis=0),
        "final_deg": deg[-1],
        "lock_fraction": 1.0 - above.mean(axis=0),
        "loss_of_lock": loss,
    }


def simulate(scenario: Scenario, batch_size: int = 1,
             capture_every: Optional[int] = None,
             test_unitary_probe: bool = False) -> SimulationResult:
    """Run the closed loop; batched over `batch_size` independent drifts."""
    sc = scenario.validate()
    S = batch_size
    dt = 1.0 / sc.loop_rate_hz
    n = sc.channel.n_elements

    element_axes = np.array([0.0 if i % 2 == 0 else math.pi / 4 for i in range(n)])
    init_ret = np.array(sc.channel.initial_retardances or [0.0] * n, dtype=float)
    params = np.zeros((S, n, 2))
    params[:, :, 0] = init_ret
    params[:, :, 1] = element_axes

    base_dir = Path(sc.base_dir) if sc.base_dir else None
    drift_model = sc.drift.to_model(sc.seed, base_dir)
    rng_drift = np.random.default_rng(sc.seed)
    rng_noise = np.random.default_rng(sc.seed + _NOISE_SEED_OFFSET)

    stack = ctl.CorrectionStack.default_squeezers()
    stack_axes = stack.axis_angles
    bias = stack.elements[stack.bias_index].retardance
    fs_ret = np.zeros((S, 4))
    fs_ret[:, stack.bias_index] = bias
    frame = stack.output_frame_correction().matrix
    limit_rad = min(sc.controller.output_limit,
                    stack.elements[0].retardance_limit)
    rad_per_unit = sc.controller.actuator_rad_per_unit
    limit_units = limit_rad / rad_per_unit

    launch = [BASIS_STATES[sc.launch.reference1.upper()],
              BASIS_STATES[sc.launch.reference2.upper()]]
    s_test = BASIS_STATES[sc.launch.test.upper()]

    noisy = (sc.measurement.reading_noise_db > 0) or sc.measurement.frequency_jitter
    meas_rng = rng_noise if noisy else None
    if sc.measurement.mode == "ideal":
        meas = _IdealMeasurement(sc, meas_rng)
    else:
        meas = _HeterodyneMeasurement(sc, meas_rng)

    # controller wiring: loop name -> branch and actuator, MUB-checked
    loop_names = [name for name in ("hv", "da", "rl")
                  if name in sc.controller.enabled_loops]
    loops = []
    for name in loop_names:
        k = ("hv", "da", "rl").index(name)
        branch = _LOOP_TO_BRANCH[name]
        cfg = ctl.PidConfig(
            proportional_gain_db=sc.controller.proportional_gain_db,
            integrator_corner_hz=sc.controller.integrator_corner_hz
            * sc.controller.corner_scales[k],
            setpoint_db=meas.setpoint_db(branch) + sc.controller.setpoint_offset_db,
            output_limits=(-limit_units, limit_units),
            sample_rate_hz=sc.loop_rate_hz,
            sign=sc.controller.signs[k],
            error_clamp_db=sc.controller.error_clamp_db,
        )
        loops.append(ctl.LoopSpec(
            actuator_index=_LOOP_TO_ACTUATOR[name],
            measurement=branch,
            reference_index=sc.measurement.branches[branch].reference - 1,
            pid=cfg,
        ))
    if loops:
        ctl.validate_mub_wiring(loops, stack, sc.measurement.measurement_bases(),
                                sc.launch.reference_bases())
    states = [_LoopState(S) for _ in loops]
    slope_mode = sc.controller.mode == "slope_sign"

    pmd = PmdModel(dgd_axis=np.asarray(sc.pmd.dgd_axis, dtype=float),
                   dgd_magnitude=sc.pmd.dgd_magnitude,
                   enabled=sc.pmd.enabled)
    test_wl = sc.launch.test_wavelength_nm
    test_distinct = (test_wl is not None
                     and (test_wl != sc.channel.reference_wavelength_nm or pmd.enabled))
    ref_wl = sc.channel.reference_wavelength_nm

    def arrival_frame(mat, vec):
        return np.einsum("sij,j->si", mat, vec)

    fs_axes = np.broadcast_to(stack_axes, (S, 4))

    # targets: the launch states as seen in the corrected frame at t=0
    fs_m0 = _chain_matrices(fs_axes, fs_ret)
    ch_m0 = rotation_from_params(params, ref_wl)
    net0 = fs_m0 @ ch_m0
    y0 = {i: (arrival_frame(net0, launch[i]) @ frame.T) for i in (0, 1)}
    if test_distinct:
        net_t0 = fs_m0 @ rotation_from_params(params, ref_wl, test_wl, pmd)
    else:
        net_t0 = net0
    y0["test"] = arrival_frame(net_t0, s_test) @ frame.T

    iters = sc.iterations
    err = {"ref1": np.empty((iters, S)), "ref2": np.empty((iters, S)),
           "test": np.empty((iters, S))}
    readings_log = np.empty((iters, S, 3))
    pid_log = np.empty((iters, S, 3))
    event_counts = np.zeros((S, 3), dtype=int)
    event_log = []
    saturated = [np.zeros(S, dtype=bool) for _ in loops]
    traj = {k: np.empty((iters, 3)) for k in ("ref1", "ref2", "test")} if S >= 1 else None
    captured = [] if capture_every else None

    for t in range(iters):
        params = step_params(params, drift_model, rng_drift, t, dt)
        ch_m = rotation_from_params(params, ref_wl)
        fs_m = _chain_matrices(np.broadcast_to(stack_axes, (S, 4)), fs_ret)
        net = fs_m @ ch_m
        x = {i: arrival_frame(net, launch[i]) for i in (0, 1)}
        y = {i: x[i] @ frame.T for i in (0, 1)}
        if test_distinct:
            net_t = fs_m @ rotation_from_params(params, ref_wl, test_wl, pmd)
        else:
            net_t = net
        y_test = arrival_frame(net_t, s_test) @ frame.T

        branch_states = y if sc.measurement.mode == "ideal" else x
        readings = meas.readings(branch_states)

        for k, loop in enumerate(loops):
            m_n = readings[loop.measurement]
            if slope_mode:
                st = states[k]
                if st.steps < 2:
                    e = -(np.asarray(m_n) - loop.pid.setpoint_db) * np.asarray(st.slope_sign)
                    new_sign = st.slope_sign
                else:
                    e, new_sign = ctl.slope_sign_error(st, m_n, loop.pid.setpoint_db)
                out, st2 = ctl.pid_step(loop.pid, st, m_n, error=e)
                states[k] = replace(st2, slope_sign=new_sign)
            else:
                out, states[k] = ctl.pid_step(loop.pid, states[k], m_n)
            cmd = np.asarray(out)
            at_limit = np.abs(cmd) >= limit_units - 1e-9
            fresh = at_limit & ~saturated[k]
            if fresh.any():
                event_counts[:, k] += fresh
                if fresh[0]:
                    event_log.append((t * dt, ctl.RangeLimitEvent(
                        k, loop.actuator_index,
                        float(np.asarray(cmd).flat[0]) * rad_per_unit, limit_rad)))
            saturated[k] = at_limit
            fs_ret[:, loop.actuator_index] = rad_per_unit * np.clip(
                cmd, -limit_units, limit_units)

        err["ref1"][t] = np.arccos(np.clip((y[0] * y0[0]).sum(-1), -1, 1))
        err["ref2"][t] = np.arccos(np.clip((y[1] * y0[1]).sum(-1), -1, 1))
        err["test"][t] = np.arccos(np.clip((y_test * y0["test"]).sum(-1), -1, 1))
        readings_log[t, :, 0] = readings["m_d"]
        readings_log[t, :, 1] = readings["m_h"]
        readings_log[t, :, 2] = readings["m_r"]
        pid_log[t] = fs_ret[:, [0, 1, 3]]
        if traj is not None:
            traj["ref1"][t] = y[0][0]
            traj["ref2"][t] = y[1][0]
            traj["test"][t] = y_test[0]
        if captured is not None and (t + 1) % capture_every == 0:
            captured.append((frame @ net_t[0]).copy())

    setpoints = {b: meas.setpoint_db(b) for b in ("m_d", "m_h", "m_r")}
    return SimulationResult(
        scenario=sc, batch_size=S, angular_errors_rad=err,
        readings=readings_log, pid_outputs=pid_log,
        event_counts=event_counts, event_log=event_log,
        trajectories=traj, captured_rotations=captured,
        setpoints_db=setpoints,
    )


# --- artifacts ---------------------------------------------------------------

@dataclass
class RunArtifacts:
    scenario: Scenario
    summary: dict
    result: SimulationResult
    out_dir: Optional[Path] = None
    files: dict = field(default_factory=dict)


def summarize(result: SimulationResult) -> dict:
    sc = result.scenario
    mcfg = sc.metrics
    states = {}
    for name, errs in result.angular_errors_rad.items():
        stats = _summary_stats(errs, mcfg.settle_iterations,
                               mcfg.lock_threshold_deg, mcfg.loss_window)
        states[name] = {k: (v.tolist() if result.batch_size > 1 else float(v[0]))
                        for k, v in stats.items()}
    events = result.event_counts
    return {
        "scenario": sc.name,
        "seed": sc.seed,
        "iterations": sc.iterations,
        "loop_rate_hz": sc.loop_rate_hz,
        "controller_mode": sc.controller.mode,
        "enabled_loops": list(sc.controller.enabled_loops),
        "setpoints_db": {k: float(v) for k, v in result.setpoints_db.items()},
        "states": states,
        "range_limit_events": (events.sum(axis=1).tolist()
                               if result.batch_size > 1 else int(events.sum())),
    }


def run(scenario: Scenario, out_dir=None) -> RunArtifacts:
    """Single-seed scenario run, optionally writing the CSV/JSON artifacts."""
    result = simulate(scenario, batch_size=1)
    summary = summarize(result)
    artifacts = RunArtifacts(scenario=scenario, summary=summary, result=result)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts.out_dir = out_dir
        files = artifacts.files
        dt = 1.0 / scenario.loop_rate_hz
        outputs = set(scenario.outputs)
        if "trajectories" in outputs:
            path = out_dir / "trajectories.csv"
            _write_trajectories(path, result, dt)
            files["trajectories"] = path
        if "readings" in outputs:
            path = out_dir / "readings.csv"
            readings = [
                het.PartialStokesReading(*result.readings[t, 0], timestamp_s=t * dt)
                for t in range(result.readings.shape[0])
            ]
            het.write_readings_csv(path, readings)
            files["readings"] = path
        if "pid" in outputs:
            path = out_dir / "pid.csv"
            ctl.write_pid_log(path, np.arange(result.pid_outputs.shape[0]) * dt,
                              result.pid_outputs[:, 0, :])
            files["pid"] = path
        if "events" in outputs:
            path = out_dir / "events.csv"
            ctl.write_event_log(path, result.event_log)
            files["events"] = path
        if "summary" in outputs:
            path = out_dir / "summary.json"
            path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            files["summary"] = path
        scenario.save(out_dir / "scenario.json")
        files["scenario"] = out_dir / "scenario.json"
    return artifacts


def _write_trajectories(path, result: SimulationResult, dt: float) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        names = ("ref1", "ref2", "test")
        header = ["timestamp_s"]
        for n in names:
            header += [f"{n}_s1", f"{n}_s2", f"{n}_s3", f"{n}_error_deg"]
        writer.writerow(header)
        iters = result.readings.shape[0]
        for t in range(iters):
            row = [repr(t * dt)]
            for n in names:
                v = result.trajectories[n][t]
                e = result.angular_errors_rad[n][t, 0] * RAD2DEG
                row += [repr(float(v[0])), repr(float(v[1])), repr(float(v[2])),
                        repr(float(e))]
            writer.writerow(row)


def run_batch(scenario: Scenario, batch_size: int) -> dict:
    """Many-seed run; returns per-seed statistics arrays keyed by state."""
    result = simulate(scenario, batch_size=batch_size)
    mcfg = scenario.metrics
    out = {"batch_size": batch_size, "scenario": scenario.name,
           "event_counts": result.event_counts}
    for name, errs in result.angular_errors_rad.items():
        out[name] = _summary_stats(errs, mcfg.settle_iterations,
                                   mcfg.lock_threshold_deg, mcfg.loss_window)
    return out


# --- tomography series --------------------------------------------------------

def run_tomography_series(scenario: Scenario, out_dir=None) -> dict:
    """Closed-loop link with periodic two-qubit tomographies of the test path.

    One qubit of a noisy Bell source traverses the simulated (stabilized or
    free-running) channel; every capture the accumulated polarization
    rotation is lifted to its SU(2) action and a Poisson coincidence record
    is drawn. Fidelity series are computed exactly as for measured data.
    """
    sc = scenario.validate()
    cfg = sc.tomography
    if cfg is None:
        raise ScenarioError("scenario has no tomography section")
    control_sc = sc
    if not cfg.apc_enabled:
        control_sc = replace(sc, controller=replace(sc.controller, enabled_loops=()))
    total_iters = cfg.count * cfg.iterations_between
    control_sc = replace(control_sc, iterations=total_iters)
    result = simulate(control_sc, batch_size=1, capture_every=cfg.iterations_between)
    rotations = result.captured_rotations
    source = werner_state(cfg.source_werner)
    records = []
    for i, rot in enumerate(rotations):
        u = su2_from_rotation(rot)
        u2 = np.kron(u, np.eye(2))
        rho = u2 @ source @ u2.conj().T
        records.append(simulate_tomography(
            rho, cfg.pair_rate_cps, cfg.integration_s,
            seed=sc.seed * 100003 + i,
            background_rate=cfg.background_rate_cps,
        ))
    series = fidelity_series(records)
    out = {
        "records": records,
        "series": series,
        "control_summary": summarize(result),
        "mean_total_counts": float(np.mean([r.total_counts for r in records])),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_fidelity_series_csv(out_dir / "fidelity_series.csv", series)
        summary = {
            "scenario": sc.name,
            "tomographies": cfg.count,
            "mean_total_counts": out["mean_total_counts"],
            "successive_mean": series["successive_mean"],
            "successive_std": series["successive_std"],
            "vs_first_mean": series["vs_first_mean"],
            "vs_first_std": series["vs_first_std"],
        }
        for key in ("process_successive_mean", "process_vs_first_mean"):
            if key in series:
                summary[key] = series[key]
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
        sc.save(out_dir / "scenario.json")
    return out


# --- frequency lock -------------------------------------------------------------

def run_frequency_lock(scenario: Scenario, out_dir=None) -> dict:
    sc = scenario.validate()
    cfg = sc.frequency_lock
    if cfg is None:
        raise ScenarioError("scenario has no frequency_lock section")
    stab_cfg = het.FreqStabConfig(setpoint_mhz=cfg.setpoint_mhz,
                                  sample_rate_hz=cfg.sample_rate_hz)
    drift = het.LaserFrequencyDrift(stationary_std_mhz=cfg.drift_std_mhz,
                                    tau_s=cfg.drift_tau_s, seed=sc.seed + 1)
    sim = het.simulate_frequency_lock(
        cfg.duration_s, stab_cfg, drift=drift,
        meas_noise_mhz=cfg.meas_noise_mhz, seed=sc.seed,
        drift_ramp_mhz_per_s=cfg.ramp_mhz_per_s,
    )
    settle = len(sim["y_mhz"]) // 5
    residual = sim["y_mhz"][settle:] - cfg.setpoint_mhz
    out = {
        "sim": sim,
        "residual_std_mhz": float(residual.std()),
        "residual_mean_mhz": float(residual.mean()),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        import csv as _csv

        with open(out_dir / "frequency_lock.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["time_s", "y_mhz", "measured_mhz", "actuation_mhz"])
            for row in zip(sim["time_s"], sim["y_mhz"], sim["measured_mhz"],
                           sim["actuation_mhz"]):
                writer.writerow([repr(float(v)) for v in row])
        (out_dir / "summary.json").write_text(json.dumps(
            {"scenario": sc.name, "residual_std_mhz": out["residual_std_mhz"],
             "residual_mean_mhz": out["residual_mean_mhz"]},
            indent=2, sort_keys=True) + "\n")
        sc.save(out_dir / "scenario.json")
    return out


# --- comparison -------------------------------------------------------------------

def compare(run_a: RunArtifacts, run_b: RunArtifacts) -> dict:
    """Paired comparison of two runs on identical iteration grids."""
    ra, rb = run_a.result, run_b.result
    if ra.readings.shape[0] != rb.readings.shape[0]:
        raise ValueError("runs have mismatched iteration grids")
    out = {"a": run_a.scenario.name, "b": run_b.scenario.name, "states": {}}
    for name in ra.angular_errors_rad:
        ea = ra.angular_errors_rad[name][:, 0] * RAD2DEG
        eb = rb.angular_errors_rad[name][:, 0] * RAD2DEG
        out["states"][name] = {
            "mean_a_deg": float(ea.mean()),
            "mean_b_deg": float(eb.mean()),
            "mean_diff_deg": float(ea.mean() - eb.mean()),
            "median_a_deg": float(np.median(ea)),
            "median_b_deg": float(np.median(eb)),
            "median_diff_deg": float(np.median(ea) - np.median(eb)),
            "max_abs_paired_diff_deg": float(np.abs(ea - eb).max()),
        }
    out["events_a"] = int(ra.event_counts.sum())
    out["events_b"] = int(rb.event_counts.sum())
    return out
