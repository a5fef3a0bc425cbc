"""The four experiments (single gate, dynamics, multi-gate, oracle) and sweeps."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (
    PopulationEstimate,
    WeightedStates,
    bell_fidelity,
    default_phis,
    estimate_populations,
    fit_exponential_decay,
    fit_gaussian_decay,
    fit_linear,
    fit_sinusoid,
    scan_parity,
    split_shots,
)
from .analytic import (
    CalibrationError,
    CalibrationResult,
    calibrate_gate,
    expected_sequence_populations,
    gate_time,
    ms_propagator,
    required_rabi,
    state_bell_fidelity,
)
from .config import RunConfig, ResolvedConfig
from .dynamics import DriveConfig, IntegratorConfig, PulseEnvelope, TrapParams, evolve, propagate
from .hilbert import bright_populations, make_basis_state, thermal_weights
from .noise import (
    NoiseConfig,
    ShotEngine,
    draw_batch,
    flip_event_probability,
    parity_decay_amplitude,
    simulate_noisy_shot,
)

BLOCK_SHOTS = 1024


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError("row length does not match columns")
        self.rows.append(list(values))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([row[i] for row in self.rows])


@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    tables: dict
    summary: dict
    started_at: str = ""
    finished_at: str = ""
    version: str = __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class Setup:
    trap: TrapParams
    envelope: PulseEnvelope
    integrator: IntegratorConfig
    noise: NoiseConfig
    cutoff: int
    res: ResolvedConfig

    @property
    def delta(self) -> float:
        return self.trap.nu - self.res.gap


def make_setup(cfg: RunConfig) -> Setup:
    res = cfg.resolve()
    trap = TrapParams(res.nu, res.eta)
    nominal = gate_time(res.nu, res.nu - res.gap)
    if res.envelope == "rectangular":
        envelope = PulseEnvelope.rectangular(nominal)
    else:
        envelope = PulseEnvelope(res.rise_time, nominal + res.rise_time, "sine_squared_ramp")
    integrator = IntegratorConfig(res.integrator, res.max_step, res.tolerance)
    noise = NoiseConfig(**res.noise)
    return Setup(trap, envelope, integrator, noise, res.fock_cutoff, res)


def gate_drive(setup: Setup, reference: Optional[CalibrationResult] = None) -> CalibrationResult:
    """Calibrated (or closed-form, if calibration is disabled) single-gate drive.

    With a ``reference`` calibration the drive strength and duration are kept
    and only the phases are taken from ``setup``; the reported fidelity is then
    that of the re-phased drive.
    """
    res = setup.res
    if reference is not None:
        drive = replace(reference.drive, zeta=res.zeta, phi=res.phi)
        start = make_basis_state("S", "S", 0, setup.cutoff)
        fidelity = state_bell_fidelity(evolve(start, setup.trap, drive, integrator=setup.integrator))
        return CalibrationResult(drive, fidelity, reference.rabi_shift, reference.duration_shift, 0)
    if res.calibrate:
        return calibrate_gate(setup.trap, res.gap, setup.envelope, zeta=res.zeta, phi=res.phi,
                              imbalance=res.imbalance, cutoff=setup.cutoff, integrator=setup.integrator)
    if setup.trap.eta <= 0:
        raise CalibrationError("no entangling interaction at eta = 0")
    drive = DriveConfig(required_rabi(setup.trap.nu, setup.delta, setup.trap.eta), setup.delta,
                        setup.envelope, phi=res.phi, zeta=res.zeta, imbalance=res.imbalance)
    return CalibrationResult(drive, float("nan"), 0.0, 0.0, 0)


@contextmanager
def _pool(workers: int):
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool.map


def _block_rng(seed: int, run: int, setting: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, setting, block)))


def _blocks(shots: int):
    start = 0
    block = 0
    while start < shots:
        size = min(BLOCK_SHOTS, shots - start)
        yield block, size
        start += size
        block += 1


def _exact_block(job) -> np.ndarray:
    """Reference-path shots for one block (used by the long schedule and Hamiltonian noise model)."""
    setup, drive, m, size, seed, run, setting, block, phi, schedule = job
    rng = _block_rng(seed, run, setting, block)
    p_event = flip_event_probability(setup.noise.effective_flip_probability(setup.res.gap, setup.trap.eta))
    batch = draw_batch(setup.noise, m, rng, size, p_event)
    return np.array([simulate_noisy_shot(batch.shot(i), setup.trap, drive, m, setup.cutoff, analysis_phi=phi,
                                         schedule=schedule, freq_noise_model=setup.noise.freq_noise_model,
                                         integrator=setup.integrator)
                     for i in range(size)], dtype=int)


class Sampler:
    """Draws seeded shots for (gate count, analysis phase) settings."""

    def __init__(self, setup: Setup, drive: DriveConfig, seed: int, run: int, mapper=map,
                 schedule: str = "concatenated"):
        self.setup, self.drive, self.seed, self.run = setup, drive, seed, run
        self.mapper, self.schedule = mapper, schedule
        self.fast = schedule == "concatenated" and setup.noise.freq_noise_model == "phase"
        self.engine = None
        if self.fast:
            self.engine = ShotEngine(setup.trap, drive, setup.noise, setup.cutoff, integrator=setup.integrator,
                                     rabi_nodes=setup.res.rabi_nodes).build(mapper)

    def outcomes(self, m: int, shots: int, setting: int, phi: Optional[float] = None) -> np.ndarray:
        if self.fast:
            parts = [self.engine.run(m, size, _block_rng(self.seed, self.run, setting, block), phi)
                     for block, size in _blocks(shots)]
        else:
            jobs = [(self.setup, self.drive, m, size, self.seed, self.run, setting, block, phi, self.schedule)
                    for block, size in _blocks(shots)]
            parts = list(self.mapper(_exact_block, jobs))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


def _bell_measurement(sampler: Sampler, m: int, exp: dict):
    """Population block plus parity scan at gate count ``m``."""
    setting = 1000 * m
    pops = estimate_populations(sampler.outcomes(m, exp["population_shots"], setting))
    phis = default_phis(exp["phase_points"])
    shots = split_shots(exp["parity_shots"], len(phis))
    index = {float(phi): i for i, phi in enumerate(phis)}

    def runner(phi, n):
        return sampler.outcomes(m, n, setting + 1 + index[phi], phi)

    scan = scan_parity(runner, phis, shots)
    fit = fit_sinusoid(scan)
    amplitude = min(fit["A"], 1.0)
    fidelity, fidelity_err = bell_fidelity(pops, amplitude, fit.errors["A"])
    return pops, scan, fit, fidelity, fidelity_err


def _calibration_summary(cal: CalibrationResult) -> dict:
    drive = cal.drive
    return {
        "omega_peak_over_2pi_hz": drive.omega_peak / (2 * math.pi),
        "pulse_duration_us": drive.duration * 1e6,
        "rise_time_us": drive.envelope.effective_rise * 1e6,
        "noiseless_bell_fidelity": cal.fidelity,
        "rabi_shift": cal.rabi_shift,
        "duration_shift": cal.duration_shift,
    }


def run_gate(cfg: RunConfig, run: int = 0, mapper=None,
             reference: Optional[CalibrationResult] = None) -> RunRecord:
    setup = make_setup(cfg)
    res = setup.res
    exp = res.experiment
    with _pool(res.workers if mapper is None else 1) as pool_map:
        mapper = mapper or pool_map
        cal = gate_drive(setup, reference)
        sampler = Sampler(setup, cal.drive, res.seed, run, mapper)
        pops, scan, fit, fidelity, fidelity_err = _bell_measurement(sampler, 1, exp)
    populations = Table(["p0", "p1", "p2", "p0_err", "p1_err", "p2_err", "shots"])
    populations.add(pops.p0, pops.p1, pops.p2, *pops.std_errors, pops.shots)
    parity_table = Table(["phi_rad", "parity", "parity_err"])
    for phi, value, err in scan.points:
        parity_table.add(phi, value, err)
    summary = {
        "p0_plus_p2": pops.even, "p0_plus_p2_err": pops.even_error,
        "parity_amplitude": fit["A"], "parity_amplitude_err": fit.errors["A"],
        "phi0_over_pi": fit["phi0"] / math.pi, "phi0_over_pi_err": fit.errors["phi0"] / math.pi,
        "bell_fidelity": fidelity, "bell_fidelity_err": fidelity_err,
        "calibration": _calibration_summary(cal),
    }
    return RunRecord("gate", cfg.to_dict(), res.seed, {"populations": populations, "parity_scan": parity_table},
                     summary)


def run_multigate(cfg: RunConfig, run: int = 0) -> RunRecord:
    setup = make_setup(cfg)
    res = setup.res
    exp = res.experiment
    counts = sorted(set(int(m) for m in exp["gate_counts"]))
    table = Table(["m", "p0", "p1", "p2", "p0_plus_p2", "p0_plus_p2_err", "parity_amplitude",
                   "parity_amplitude_err", "phi0_rad", "bell_fidelity", "bell_fidelity_err",
                   "closed_form_amplitude"])
    with _pool(res.workers) as mapper:
        cal = gate_drive(setup)
        sampler = Sampler(setup, cal.drive, res.seed, run, mapper, exp["schedule"])
        for m in counts:
            pops, _, fit, fidelity, fidelity_err = _bell_measurement(sampler, m, exp)
            closed = parity_decay_amplitude(m, setup.noise.freq_noise_fwhm, cal.drive.duration)
            table.add(m, pops.p0, pops.p1, pops.p2, pops.even, pops.even_error, fit["A"], fit.errors["A"],
                      fit["phi0"], fidelity, fidelity_err, closed)
    summary = {"calibration": _calibration_summary(cal), "schedule": exp["schedule"]}
    ms = table.column("m").astype(float)
    if len(counts) >= 2:
        even_err = np.maximum(table.column("p0_plus_p2_err"), 1e-6)
        line = fit_linear(ms, table.column("p0_plus_p2"), sigma=even_err)
        summary.update({"population_slope": -line["slope"], "population_slope_err": line.errors["slope"],
                        "population_intercept": line["intercept"], "population_r_squared": line["r_squared"]})
    if len(counts) >= 3:
        amps = table.column("parity_amplitude")
        amp_err = np.maximum(table.column("parity_amplitude_err"), 1e-6)
        gauss = fit_gaussian_decay(ms, amps, amp_err)
        expo = fit_exponential_decay(ms, amps, amp_err)
        summary.update({
            "gaussian_A0": gauss["A0"], "gaussian_m0": gauss["m0"], "gaussian_m0_err": gauss.errors["m0"],
            "gaussian_residual": gauss.residual_norm, "gaussian_flags": list(gauss.flags),
            "exponential_A0": expo["A0"], "exponential_m0": expo["m0"],
            "exponential_residual": expo.residual_norm,
            "gaussian_fits_better": gauss.residual_norm < expo.residual_norm,
        })
    last = table.rows[-1]
    summary.update({"final_m": int(last[0]), "final_bell_fidelity": last[9], "final_bell_fidelity_err": last[10]})
    return RunRecord("multigate", cfg.to_dict(), res.seed, {"multigate": table}, summary)


def _thermal_start(setup: Setup):
    ensemble = thermal_weights(setup.noise.nbar, setup.noise.thermal_tail)
    states = np.zeros((len(ensemble.entries), 4 * setup.cutoff), dtype=complex)
    states[np.arange(len(ensemble.entries)), ensemble.levels] = 1.0
    return states, ensemble.weights


def _mixture_bright(states: np.ndarray, weights: np.ndarray, cutoff: int) -> np.ndarray:
    labels = np.sum(np.abs(states.reshape(len(states), 4, cutoff)) ** 2, axis=2)
    return bright_populations(weights @ labels)


def run_dynamics(cfg: RunConfig, run: int = 0) -> RunRecord:
    """Thermally averaged populations versus pulse length (no Monte Carlo).

    The time axis is the plateau-equivalent time ``t``; a point at ``t`` is a
    separate shaped pulse of duration ``t + rise``, so that ``t = m * (T - rise)``
    coincides with ``m`` calibrated gates of duration ``T``.
    """
    setup = make_setup(cfg)
    res = setup.res
    exp = res.experiment
    cal = gate_drive(setup)
    drive = cal.drive
    rise = drive.envelope.effective_rise
    period = drive.duration - rise
    steps = int(exp["steps_per_gate"])
    count = int(math.floor(exp["max_gates"] * steps + 1e-9))
    times = np.arange(count + 1) * period / steps
    start, weights = _thermal_start(setup)
    table = Table(["t_us", "gates", "pulse_duration_us", "p0", "p1", "p2"])
    longest = times[-1] + rise
    plateau = replace(drive, envelope=drive.envelope.with_duration(max(longest, 2 * rise)))
    # ramp-down of every point starts from a snapshot of one long plateau pass
    branch_times = [t for t in times if t >= rise and t > 0]
    _, snaps = propagate(start, setup.trap, plateau, 0.0, plateau.duration, checkpoints=branch_times,
                         integrator=setup.integrator)
    snapshot = dict(zip(branch_times, snaps))
    for t in times:
        duration = t + rise if t > 0 else 0.0
        if t == 0:
            states = start
        elif t in snapshot:
            pulse = replace(drive, envelope=drive.envelope.with_duration(duration))
            states, _ = propagate(snapshot[t], setup.trap, pulse, t, duration, integrator=setup.integrator)
        else:
            env = PulseEnvelope(min(rise, duration / 2), duration, drive.envelope.shape)
            states, _ = propagate(start, setup.trap, replace(drive, envelope=env), integrator=setup.integrator)
        p = _mixture_bright(np.atleast_2d(states), weights, setup.cutoff)
        table.add(t * 1e6, t / period, duration * 1e6, *p.tolist())
    gate_rows = [row for row in table.rows if abs(row[1] - round(row[1])) < 1e-9 and round(row[1]) >= 1]
    deviation = max((max(abs(a - b) for a, b in zip(row[3:], expected_sequence_populations(int(round(row[1])))))
                     for row in gate_rows), default=0.0)
    odd_p1 = max((row[4] for row in gate_rows if int(round(row[1])) % 2), default=0.0)
    summary = {"calibration": _calibration_summary(cal), "points": len(table.rows),
               "max_deviation_at_gate_multiples": deviation, "max_p1_at_odd_multiples": odd_p1}
    return RunRecord("dynamics", cfg.to_dict(), res.seed, {"dynamics": table}, summary)


def oracle_comparison(setup: Setup, eta: Optional[float] = None) -> tuple:
    """Numerical versus closed-form evolution from |SS,0> under a constant drive.

    The drive is the one closing a gate at the configured Lamb-Dicke factor.
    An ``eta`` override scales it by ``eta / configured eta``, probing the
    closed form deeper in (or further out of) the Lamb-Dicke regime.
    """
    res = setup.res
    trap = setup.trap if eta is None else TrapParams(setup.trap.nu, eta)
    nominal = gate_time(trap.nu, setup.delta)
    omega = required_rabi(setup.trap.nu, setup.delta, setup.trap.eta)
    if eta is not None:
        omega *= eta / setup.trap.eta
    steps = int(res.experiment["steps_per_gate"])
    count = int(math.floor(res.experiment["oracle_gates"] * steps + 1e-9))
    times = np.arange(count + 1) * nominal / steps
    total = float(times[-1])
    drive = DriveConfig(omega, setup.delta,
                        PulseEnvelope.rectangular(max(total, nominal)), phi=res.phi, zeta=res.zeta)
    start = np.zeros(4 * setup.cutoff, dtype=complex)
    start[0] = 1.0
    checkpoints = [t for t in times[1:]]
    _, snaps = propagate(start, trap, drive, 0.0, drive.duration, checkpoints=checkpoints,
                         integrator=setup.integrator)
    numeric = [start] + list(snaps)
    table = Table(["t_us", "numeric_p0", "numeric_p1", "numeric_p2", "analytic_p0", "analytic_p1",
                   "analytic_p2", "overlap"])
    deficits = []
    for t, psi in zip(times, numeric):
        analytic = ms_propagator(float(t), trap, drive, setup.cutoff) @ start
        overlap = float(abs(np.vdot(analytic, psi)) ** 2)
        deficits.append(1 - overlap)
        pn = _mixture_bright(psi[None, :], np.ones(1), setup.cutoff)
        pa = _mixture_bright(analytic[None, :], np.ones(1), setup.cutoff)
        table.add(float(t) * 1e6, *pn.tolist(), *pa.tolist(), overlap)
    return table, max(deficits), drive, trap


def run_oracle(cfg: RunConfig, run: int = 0) -> RunRecord:
    setup = make_setup(cfg)
    table, deficit, drive, trap = oracle_comparison(setup)
    # truncation check: the same evolution with five more Fock levels
    bigger = setup.cutoff + 5
    psi_small = np.zeros(4 * setup.cutoff, dtype=complex)
    psi_small[0] = 1
    psi_big = np.zeros(4 * bigger, dtype=complex)
    psi_big[0] = 1
    small, _ = propagate(psi_small, trap, drive, integrator=setup.integrator)
    big, _ = propagate(psi_big, trap, drive, integrator=setup.integrator)
    embedded = np.zeros((4, bigger), dtype=complex)
    embedded[:, :setup.cutoff] = small.reshape(4, setup.cutoff)
    cutoff_overlap = float(abs(np.vdot(embedded.reshape(-1), big)) ** 2)
    summary = {"max_overlap_deficit": deficit, "min_overlap": 1 - deficit,
               "cutoff_overlap_n_vs_n_plus_5": cutoff_overlap,
               "omega_over_2pi_hz": drive.omega_peak / (2 * math.pi), "duration_us": drive.duration * 1e6}
    return RunRecord("oracle", cfg.to_dict(), setup.res.seed, {"oracle": table}, summary)


# phases the calibration cannot track: sweeping them keeps the base calibration
FIXED_CALIBRATION_PATHS = ("drive.zeta", "drive.phi")


def _sweep_point(job):
    cfg_doc, run, reference = job
    record = run_gate(RunConfig(cfg_doc), run=run, mapper=map, reference=reference)
    return record.summary


def run_sweep(cfg: RunConfig, run: int = 0) -> RunRecord:
    res = cfg.resolve()
    exp = res.experiment
    path = exp["parameter"]
    docs = []
    for value in exp["values"]:
        point = cfg.set_path(path, value).with_overrides(experiment={"kind": "gate", "values": [],
                                                                     "parameter": None})
        docs.append(point.to_dict())
    # every point reuses the same random streams so that differences reflect the parameter, not shot noise
    reference = None
    if path in FIXED_CALIBRATION_PATHS:
        base = cfg.with_overrides(experiment={"kind": "gate", "values": [], "parameter": None})
        reference = gate_drive(make_setup(base))
    jobs = [(doc, run, reference) for doc in docs]
    with _pool(res.workers) as mapper:
        summaries = list(mapper(_sweep_point, jobs))
    table = Table(["index", "value", "bell_fidelity", "bell_fidelity_err", "p0_plus_p2", "parity_amplitude",
                   "parity_amplitude_err", "noiseless_bell_fidelity"])
    for i, (value, summ) in enumerate(zip(exp["values"], summaries)):
        table.add(i, value, summ["bell_fidelity"], summ["bell_fidelity_err"], summ["p0_plus_p2"],
                  summ["parity_amplitude"], summ["parity_amplitude_err"],
                  summ["calibration"]["noiseless_bell_fidelity"])
    fid = table.column("bell_fidelity").astype(float)
    summary = {"parameter": path, "points": len(fid), "max_fidelity": float(fid.max()),
               "min_fidelity": float(fid.min()), "fidelity_spread": float(fid.max() - fid.min())}
    return RunRecord("sweep", cfg.to_dict(), res.seed, {"sweep": table}, summary)


COMMANDS = {"gate": run_gate, "dynamics": run_dynamics, "multigate": run_multigate, "oracle": run_oracle,
            "sweep": run_sweep}


def run_experiment(cfg: RunConfig) -> RunRecord:
    kind = cfg.resolve().experiment["kind"]
    started = _now()
    record = COMMANDS[kind](cfg)
    record.started_at, record.finished_at = started, _now()
    return record
