"""Bichromatic drive Hamiltonian and numerical Schrodinger evolution.

The Hamiltonian (hbar = 1, interaction frame) is

    H(t) = Omega(t) exp(-i phi) S_+ (sqrt(r) e^{-i(delta t + zeta)}
           + e^{i(delta t + zeta)} / sqrt(r)) M(t) + h.c.,
    M(t) = exp(i eta (a e^{-i nu t} + a^dag e^{i nu t})),

where ``r`` is the blue/red Rabi-frequency ratio and the two tones keep the
geometric mean ``Omega(t)``. ``M(t)`` equals ``R D(eta) R^dag`` with
``R = exp(i (nu t + pi/2) a^dag a)``, so the motional exponential is computed
once per cutoff and rotated by phases at each time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.integrate import solve_ivp

from .hilbert import (
    SystemState,
    displacement_matrix,
    on_qubits,
    qubit_spin,
    single_ion_operator,
    _SIGMA_X,
    _SIGMA_Y,
)

ENVELOPE_SHAPES = ("rectangular", "sine_squared_ramp")
_SHAPE_CODES = {"rectangular": 0, "sine_squared_ramp": 1}
# S_z eigenvalue of each two-qubit label SS, SD, DS, DD
_SZ_DIAGONAL = np.array([-2.0, 0.0, 0.0, 2.0])


class NonConvergenceError(RuntimeError):
    """Raised when an evolution drifts beyond the requested tolerance."""

    def __init__(self, message: str, steps: int, residual: float):
        super().__init__(f"{message} (steps={steps}, residual={residual:.3e})")
        self.steps = steps
        self.residual = residual


@dataclass(frozen=True)
class TrapParams:
    """Axial centre-of-mass mode.

    ``eta = 0`` is accepted so that a drive without sideband coupling can be
    represented (calibration then reports failure).
    """

    nu: float
    eta: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("trap frequency nu must be > 0")
        if not 0 <= self.eta < 0.3:
            raise ValueError("Lamb-Dicke factor must satisfy 0 <= eta < 0.3")

    @property
    def period(self) -> float:
        return 2 * math.pi / self.nu


@dataclass(frozen=True)
class PulseEnvelope:
    rise_time: float
    total_duration: float
    shape: str = "sine_squared_ramp"

    def __post_init__(self):
        if self.shape not in ENVELOPE_SHAPES:
            raise ValueError(f"unknown envelope shape {self.shape!r}")
        if self.rise_time < 0 or 2 * self.rise_time > self.total_duration:
            raise ValueError("envelope requires 0 <= 2*rise_time <= total_duration")

    @classmethod
    def rectangular(cls, duration: float) -> "PulseEnvelope":
        return cls(0.0, duration, "rectangular")

    @property
    def effective_rise(self) -> float:
        return self.rise_time if self.shape == "sine_squared_ramp" else 0.0

    def breakpoints(self) -> list:
        """Times where the envelope is not smooth."""
        r = self.effective_rise
        pts = {0.0, self.total_duration}
        if r > 0:
            pts.update((r, self.total_duration - r))
        return sorted(pts)

    def with_duration(self, duration: float) -> "PulseEnvelope":
        return replace(self, total_duration=duration)


@dataclass(frozen=True)
class DriveConfig:
    """Bichromatic drive parameters; frequencies are angular (rad/s).

    ``carrier_detuning`` is a static offset of the laser from the qubit
    resonance and enters as ``-(detuning / 2) S_z``.
    """

    omega_peak: float
    delta: float
    envelope: PulseEnvelope
    phi: float = 0.0
    zeta: float = 0.0
    imbalance: float = 1.0
    carrier_detuning: float = 0.0

    def __post_init__(self):
        if self.omega_peak < 0:
            raise ValueError("omega_peak must be >= 0")
        if not self.imbalance > 0:
            raise ValueError("imbalance must be > 0")

    @property
    def duration(self) -> float:
        return self.envelope.total_duration


@dataclass(frozen=True)
class IntegratorConfig:
    """Numerical integration settings.

    ``method`` is 'rk4' (fixed step, compiled) or 'dop853' (adaptive, scipy).
    ``max_step`` defaults to one hundredth of the trap period, shortened for
    drives strong enough that the Rabi time scale dominates.
    """

    method: str = "rk4"
    max_step: Optional[float] = None
    tolerance: float = 1e-7

    def __post_init__(self):
        if self.method not in ("rk4", "dop853"):
            raise ValueError(f"unknown integrator method {self.method!r}")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")

    def step_for(self, trap: TrapParams, rabi_rate: float = 0.0) -> float:
        """Fixed RK4 step: the explicit ``max_step`` or the shorter of the trap and Rabi time scales."""
        if self.max_step is not None:
            return self.max_step
        if rabi_rate > 0:
            return min(trap.period / 100, 2 * math.pi / (1000 * rabi_rate))
        return trap.period / 100


def rabi_envelope(t, env: PulseEnvelope, omega_peak: float):
    """Instantaneous Rabi frequency; zero outside ``[0, total_duration]``."""
    t = np.asarray(t, dtype=float)
    inside = (t >= 0) & (t <= env.total_duration)
    out = np.where(inside, omega_peak, 0.0)
    rise = env.effective_rise
    if rise > 0:
        ramp_up = np.sin(0.5 * np.pi * t / rise) ** 2
        ramp_down = np.sin(0.5 * np.pi * (env.total_duration - t) / rise) ** 2
        out = np.where(inside & (t < rise), omega_peak * ramp_up, out)
        out = np.where(inside & (t > env.total_duration - rise), omega_peak * ramp_down, out)
    return out if out.ndim else float(out)


def tone_amplitudes(omega: float, imbalance: float) -> tuple:
    """(blue, red) Rabi frequencies with ratio ``imbalance`` and geometric mean ``omega``."""
    root = math.sqrt(imbalance)
    return omega * root, omega / root


@lru_cache(maxsize=32)
def _lamb_dicke_matrix(eta: float, cutoff: int) -> np.ndarray:
    mat = displacement_matrix(eta, cutoff).real.copy()
    mat.setflags(write=False)
    return mat


def motional_coupling(t: float, trap: TrapParams, cutoff: int) -> np.ndarray:
    """exp(i eta (a e^{-i nu t} + a^dag e^{i nu t})) on the truncated Fock space."""
    phases = np.exp(1j * (trap.nu * t + 0.5 * np.pi) * np.arange(cutoff))
    return phases[:, None] * _lamb_dicke_matrix(trap.eta, cutoff) * phases.conj()[None, :]


def _drive_coefficient(t: float, drive: DriveConfig) -> complex:
    omega = rabi_envelope(t, drive.envelope, drive.omega_peak)
    arg = drive.delta * t + drive.zeta
    root = math.sqrt(drive.imbalance)
    tones = root * np.exp(-1j * arg) + np.exp(1j * arg) / root
    return complex(omega * tones * np.exp(-1j * drive.phi))


def hamiltonian_at(t: float, trap: TrapParams, drive: DriveConfig, cutoff: int) -> np.ndarray:
    """Dense Hamiltonian matrix (rad/s) at time ``t``."""
    coupling = _drive_coefficient(t, drive) * np.kron(qubit_spin("plus"), motional_coupling(t, trap, cutoff))
    ham = coupling + coupling.conj().T
    if drive.carrier_detuning:
        ham = ham - 0.5 * drive.carrier_detuning * on_qubits(qubit_spin("z"), cutoff)
    return ham


# ---------------------------------------------------------------------------
# compiled fixed-step integrator

@numba.njit(cache=True)
def _envelope_value(t, shape, rise, total):
    # slack keeps the final RK stage inside the pulse despite rounding of t0 + n*h
    slack = 1e-12 * total
    if t < -slack or t > total + slack:
        return 0.0
    if shape == 0 or rise <= 0.0:
        return 1.0
    if t < rise:
        return math.sin(0.5 * math.pi * t / rise) ** 2
    if t > total - rise:
        return math.sin(0.5 * math.pi * (total - t) / rise) ** 2
    return 1.0


@numba.njit(cache=True)
def _rhs(t, psi, out, nu, lamb_dicke, omega_peak, delta, phi, zeta, root_r,
         shape, rise, total, scales, detunings, u, fwd, bwd):
    n_states, _, cutoff = psi.shape
    omega = omega_peak * _envelope_value(t, shape, rise, total)
    arg = delta * t + zeta
    tones = root_r * complex(math.cos(arg), -math.sin(arg)) + complex(math.cos(arg), math.sin(arg)) / root_r
    base = omega * tones * complex(math.cos(phi), -math.sin(phi))
    theta = nu * t + 0.5 * math.pi
    phase = np.empty(cutoff, dtype=np.complex128)
    for n in range(cutoff):
        phase[n] = complex(math.cos(theta * n), math.sin(theta * n))
    for k in range(n_states):
        g = base * scales[k]
        gc = g.conjugate()
        half_det = 0.5 * detunings[k]
        for q in range(4):
            for n in range(cutoff):
                u[q, n] = psi[k, q, n] * phase[n].conjugate()
        # fwd = M psi (rows of D), bwd = M^dag psi (columns of D), before the output phase
        for q in range(4):
            for m in range(cutoff):
                acc_f = 0j
                acc_b = 0j
                for n in range(cutoff):
                    acc_f += lamb_dicke[m, n] * u[q, n]
                    acc_b += lamb_dicke[n, m] * u[q, n]
                fwd[q, m] = acc_f * phase[m]
                bwd[q, m] = acc_b * phase[m]
        for m in range(cutoff):
            # S_+ raises SS -> SD, DS and SD, DS -> DD; S_- is its transpose
            h0 = gc * (bwd[1, m] + bwd[2, m]) + 2.0 * half_det * psi[k, 0, m]
            h1 = g * fwd[0, m] + gc * bwd[3, m]
            h2 = g * fwd[0, m] + gc * bwd[3, m]
            h3 = g * (fwd[1, m] + fwd[2, m]) - 2.0 * half_det * psi[k, 3, m]
            out[k, 0, m] = -1j * h0
            out[k, 1, m] = -1j * h1
            out[k, 2, m] = -1j * h2
            out[k, 3, m] = -1j * h3


@numba.njit(cache=True)
def _rk4_segment(psi, t0, h, n_steps, nu, lamb_dicke, omega_peak, delta, phi, zeta,
                 root_r, shape, rise, total, scales, detunings):
    cutoff = psi.shape[2]
    u = np.empty((4, cutoff), dtype=np.complex128)
    fwd = np.empty((4, cutoff), dtype=np.complex128)
    bwd = np.empty((4, cutoff), dtype=np.complex128)
    k1 = np.empty_like(psi)
    k2 = np.empty_like(psi)
    k3 = np.empty_like(psi)
    k4 = np.empty_like(psi)
    tmp = np.empty_like(psi)
    for step in range(n_steps):
        t = t0 + step * h
        _rhs(t, psi, k1, nu, lamb_dicke, omega_peak, delta, phi, zeta, root_r,
             shape, rise, total, scales, detunings, u, fwd, bwd)
        tmp[:] = psi + 0.5 * h * k1
        _rhs(t + 0.5 * h, tmp, k2, nu, lamb_dicke, omega_peak, delta, phi, zeta, root_r,
             shape, rise, total, scales, detunings, u, fwd, bwd)
        tmp[:] = psi + 0.5 * h * k2
        _rhs(t + 0.5 * h, tmp, k3, nu, lamb_dicke, omega_peak, delta, phi, zeta, root_r,
             shape, rise, total, scales, detunings, u, fwd, bwd)
        tmp[:] = psi + h * k3
        _rhs(t + h, tmp, k4, nu, lamb_dicke, omega_peak, delta, phi, zeta, root_r,
             shape, rise, total, scales, detunings, u, fwd, bwd)
        psi += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _per_state(values, n_states: int, default: float) -> np.ndarray:
    if values is None:
        return np.full(n_states, default)
    arr = np.broadcast_to(np.asarray(values, dtype=float), (n_states,))
    return np.ascontiguousarray(arr)


def propagate(
    states: np.ndarray,
    trap: TrapParams,
    drive: DriveConfig,
    t_start: float = 0.0,
    t_end: Optional[float] = None,
    *,
    checkpoints: Sequence[float] = (),
    rabi_scales=None,
    detunings=None,
    integrator: IntegratorConfig = IntegratorConfig(),
):
    """Integrate a batch of state vectors.

    Parameters
    ----------
    states : ndarray, shape (K, 4N) or (4N,)
        Initial amplitudes.
    t_start, t_end : float
        Integration window; ``t_end`` defaults to the pulse duration.
    checkpoints : sequence of float
        Times inside the window at which snapshots are returned.
    rabi_scales, detunings : array_like, optional
        Per-state multiplier of the Rabi frequency and additional carrier
        detuning (rad/s).

    Returns
    -------
    final : ndarray
        Amplitudes at ``t_end`` with the input shape.
    snapshots : list of ndarray
        One array per checkpoint (same shape as ``final``).
    """
    states = np.asarray(states, dtype=complex)
    single = states.ndim == 1
    batch = np.atleast_2d(states)
    n_states, dim = batch.shape
    if dim % 4:
        raise ValueError("state dimension must be a multiple of 4")
    cutoff = dim // 4
    if t_end is None:
        t_end = drive.duration
    scales = _per_state(rabi_scales, n_states, 1.0)
    dets = _per_state(detunings, n_states, 0.0) + drive.carrier_detuning

    checkpoints = sorted(float(c) for c in checkpoints)
    if any(c < t_start or c > t_end for c in checkpoints):
        raise ValueError("checkpoints must lie inside the integration window")
    breaks = [b for b in drive.envelope.breakpoints() if t_start < b < t_end]
    nodes = sorted(set([t_start, t_end] + breaks + checkpoints))
    tone = max(math.sqrt(drive.imbalance), 1 / math.sqrt(drive.imbalance))
    step = integrator.step_for(trap, drive.omega_peak * float(np.max(scales, initial=1.0)) * tone)
    psi = batch.reshape(n_states, 4, cutoff).copy()
    initial_norms = np.linalg.norm(batch, axis=1)
    snapshots = {}
    total_steps = 0

    if integrator.method == "rk4":
        lamb_dicke = np.ascontiguousarray(_lamb_dicke_matrix(trap.eta, cutoff))
        env = drive.envelope
        args = (trap.nu, lamb_dicke, drive.omega_peak, drive.delta, drive.phi, drive.zeta,
                math.sqrt(drive.imbalance), _SHAPE_CODES[env.shape], env.rise_time,
                env.total_duration, scales, dets)
        for a, b in zip(nodes[:-1], nodes[1:]):
            n_steps = max(1, math.ceil((b - a) / step - 1e-9))
            _rk4_segment(psi, a, (b - a) / n_steps, n_steps, *args)
            total_steps += n_steps
            snapshots[b] = psi.reshape(n_states, dim).copy()
    else:
        def rhs(t, y):
            vec = y.view(complex).reshape(n_states, dim)
            out = np.empty_like(vec)
            for k in range(n_states):
                local = replace(drive, omega_peak=drive.omega_peak * scales[k],
                                carrier_detuning=dets[k])
                out[k] = -1j * (hamiltonian_at(t, trap, local, cutoff) @ vec[k])
            return out.reshape(-1).view(float)

        y = psi.reshape(-1).copy()
        for a, b in zip(nodes[:-1], nodes[1:]):
            sol = solve_ivp(rhs, (a, b), y.view(float), method="DOP853", max_step=step,
                            rtol=integrator.tolerance, atol=integrator.tolerance * 1e-2)
            if not sol.success:
                raise NonConvergenceError(sol.message, int(sol.nfev), float("nan"))
            total_steps += int(sol.nfev)
            y = sol.y[:, -1].copy().view(complex)
            snapshots[b] = y.reshape(n_states, dim).copy()
        psi = y.reshape(n_states, 4, cutoff)

    final = psi.reshape(n_states, dim)
    residual = float(np.max(np.abs(np.linalg.norm(final, axis=1) - initial_norms)))
    if residual > integrator.tolerance * 10 or not np.all(np.isfinite(final)):
        raise NonConvergenceError("norm drift exceeds tolerance", total_steps, residual)

    def shaped(arr):
        return arr[0] if single else arr

    if not checkpoints:
        return shaped(final.copy()), []
    return shaped(final.copy()), [shaped(snapshots.get(c, batch) if c > t_start else batch.copy())
                                  for c in checkpoints]


def evolve(initial: SystemState, trap: TrapParams, drive: DriveConfig,
           integrator: IntegratorConfig = IntegratorConfig()) -> SystemState:
    """Solve the Schrodinger equation over the full pulse."""
    final, _ = propagate(initial.amplitudes, trap, drive, integrator=integrator)
    return SystemState(final, initial.fock_cutoff)


def pulse_propagator(trap: TrapParams, drive: DriveConfig, cutoff: int, *,
                     checkpoints: Sequence[float] = (), rabi_scale: float = 1.0,
                     detuning: float = 0.0,
                     integrator: IntegratorConfig = IntegratorConfig()):
    """Full 4N x 4N propagator of the pulse, plus propagators to each checkpoint."""
    dim = 4 * cutoff
    final, snaps = propagate(np.eye(dim, dtype=complex), trap, drive, checkpoints=checkpoints,
                             rabi_scales=rabi_scale, detunings=detuning, integrator=integrator)
    # rows of the batch are images of basis vectors, so transpose to columns
    return final.T.copy(), [s.T.copy() for s in snaps]


def carrier_rotation(theta: float, phi: float) -> np.ndarray:
    """4x4 qubit operator exp(-i theta/2 (sigma_phi^(1) + sigma_phi^(2)))."""
    sigma = _SIGMA_X * math.cos(phi) + _SIGMA_Y * math.sin(phi)
    single = math.cos(theta / 2) * np.eye(2) - 1j * math.sin(theta / 2) * sigma
    return np.kron(single, single)


def carrier_pulse(state: SystemState, theta: float, phi: float) -> SystemState:
    """Ideal instantaneous carrier rotation on both ions; motion untouched."""
    mat = carrier_rotation(theta, phi) @ state.as_matrix()
    return SystemState(mat.reshape(-1), state.fock_cutoff)


def single_ion_flip(ion: int) -> np.ndarray:
    """4x4 operator sigma_x on one ion."""
    return single_ion_operator(_SIGMA_X, ion)


def coupling_imbalance_error(ratio: float) -> float:
    """Relative excess of the SD<->DS coupling over SS<->DD for a tone ratio."""
    if not ratio > 0:
        raise ValueError("tone ratio must be > 0")
    r = ratio ** 2
    return (r + 1) / (2 * math.sqrt(r)) - 1
