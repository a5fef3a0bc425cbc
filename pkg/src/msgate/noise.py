"""Monte Carlo error models for the entangling gate.

Noise sources and how they enter a simulated shot:

* quasi-static laser/field frequency offset, Gaussian, constant per shot;
* quasi-static relative Rabi-frequency error, Gaussian, constant per shot;
* thermal initial Fock state;
* incoherent spin flips: an instantaneous sigma_x on a random ion at a random
  time bin inside a gate, with a fixed probability per gate;
* metastable decay and detection error as classical outcome perturbations.

By default the frequency offset is applied as free precession
``exp(-i offset * T * S_z / 2)`` accumulated over the total pulse duration
``T``. The alternative ``"hamiltonian"`` model adds the offset as a carrier
detuning inside the drive Hamiltonian; the bichromatic drive then locks the
two-ion coherence and suppresses most of the dephasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .dynamics import (
    DriveConfig,
    IntegratorConfig,
    TrapParams,
    carrier_rotation,
    pulse_propagator,
    propagate,
    single_ion_flip,
)
from .hilbert import BRIGHT_COUNT, thermal_weights

FREQ_NOISE_MODELS = ("phase", "hamiltonian")
SCHEDULES = ("concatenated", "long")
FWHM_TO_SIGMA = 1 / math.sqrt(8 * math.log(2))
# Mean population moved out of {SS, DD} by one flip event, averaged over ions
# and the flip time bins of a calibrated shaped gate at the default parameters
# (see flip_leakage_factor). A flip near the start or end of a gate leaks all
# of the population; in mid-gate the spin-dependent displacement and carrier
# terms return part of it to the even subspace.
FLIP_LEAKAGE_FACTOR = 0.744
# Rabi-scale draws are clipped to this many standard deviations so that the
# interpolation in the scale never extrapolates.
RABI_CLIP_SIGMAS = 7.0


@dataclass(frozen=True)
class NoiseConfig:
    """Error-model parameters.

    Frequencies are in Hz. ``flip_probability`` is the effective per-gate
    error probability (the per-gate loss of p0 + p2) and overrides the value
    derived from ``gamma`` and ``bandwidth_B`` when set. Flip events are drawn
    with probability ``flip_probability / FLIP_LEAKAGE_FACTOR`` per gate.
    """

    gamma: float = 0.0
    bandwidth_B: float = 20e3
    freq_noise_fwhm: float = 0.0
    rabi_rel_sigma: float = 0.0
    nbar: float = 0.0
    decay_per_gate: float = 5e-5
    detection_error: float = 0.0
    flip_probability: Optional[float] = None
    flip_time_bins: int = 16
    freq_noise_model: str = "phase"
    thermal_tail: float = 1e-6

    def __post_init__(self):
        for name in ("gamma", "bandwidth_B", "freq_noise_fwhm", "rabi_rel_sigma", "nbar"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("decay_per_gate", "detection_error"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if self.flip_probability is not None and not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must be a probability")
        if self.flip_time_bins < 1:
            raise ValueError("flip_time_bins must be >= 1")
        if self.freq_noise_model not in FREQ_NOISE_MODELS:
            raise ValueError(f"freq_noise_model must be one of {FREQ_NOISE_MODELS}")

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(decay_per_gate=0.0)

    @property
    def detuning_sigma(self) -> float:
        """Angular standard deviation of the frequency offset (rad/s)."""
        return 2 * math.pi * self.freq_noise_fwhm * FWHM_TO_SIGMA

    def effective_flip_probability(self, gap: Optional[float] = None,
                                   eta: Optional[float] = None) -> float:
        if self.flip_probability is not None:
            return self.flip_probability
        if self.gamma == 0:
            return 0.0
        if gap is None or eta is None:
            raise ValueError("gap and eta are needed to derive the flip probability")
        return spin_flip_probability(self.gamma, gap, eta, self.bandwidth_B)


def flip_event_probability(p_flip_effective: float) -> float:
    """Per-gate probability of a flip event that yields the given effective error."""
    return min(1.0, p_flip_effective / FLIP_LEAKAGE_FACTOR)


def spin_flip_probability(gamma: float, nu_minus_delta: float, eta: float,
                          bandwidth_B: float) -> float:
    """Per-gate flip probability pi gamma |nu - delta| / (2 eta^2 B).

    ``nu_minus_delta`` is angular (rad/s) and is converted to Hz so that it
    carries the same unit as ``bandwidth_B``.
    """
    if not eta > 0:
        raise ValueError("eta must be > 0")
    if not bandwidth_B > 0:
        raise ValueError("bandwidth_B must be > 0")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    gap_hz = abs(nu_minus_delta) / (2 * math.pi)
    return math.pi * gamma * gap_hz / (2 * eta ** 2 * bandwidth_B)


@dataclass(frozen=True)
class ShotDraw:
    """Random realization of all noise sources for one shot.

    ``flip_events`` holds ``(position, ion)`` with ``position`` in units of gates
    (``2.5`` is the middle of the third gate).
    """

    detuning_offset: float
    rabi_scale: float
    initial_fock_n: int
    flip_events: tuple = ()
    decay_ions: tuple = (False, False)
    misread_ions: tuple = (False, False)
    measurement_u: float = 0.5
    lineage: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class ShotBatch:
    """Vectorized draws for a block of shots; see :class:`ShotDraw`."""

    detuning_offset: np.ndarray
    rabi_scale: np.ndarray
    initial_fock_n: np.ndarray
    flip_mask: np.ndarray  # (shots, gates)
    flip_bin: np.ndarray
    flip_ion: np.ndarray
    decay_ions: np.ndarray  # (shots, 2)
    misread_ions: np.ndarray
    measurement_u: np.ndarray
    flip_time_bins: int

    def __len__(self):
        return len(self.measurement_u)

    def shot(self, index: int) -> ShotDraw:
        gates = np.nonzero(self.flip_mask[index])[0]
        events = tuple(
            (float(g + (self.flip_bin[index, g] + 0.5) / self.flip_time_bins), int(self.flip_ion[index, g]))
            for g in gates)
        return ShotDraw(float(self.detuning_offset[index]), float(self.rabi_scale[index]),
                        int(self.initial_fock_n[index]), events,
                        tuple(bool(x) for x in self.decay_ions[index]),
                        tuple(bool(x) for x in self.misread_ions[index]),
                        float(self.measurement_u[index]))


def draw_batch(config: NoiseConfig, gate_count: int, rng: np.random.Generator, shots: int,
               flip_probability: float = 0.0) -> ShotBatch:
    """Draw ``shots`` noise realizations with a fixed consumption of ``rng``.

    ``flip_probability`` is the per-gate probability of a flip event.
    """
    if gate_count < 0:
        raise ValueError("gate count must be >= 0")
    ensemble = thermal_weights(config.nbar, config.thermal_tail)
    detuning = config.detuning_sigma * rng.standard_normal(shots)
    sigma = config.rabi_rel_sigma
    scale = 1 + sigma * np.clip(rng.standard_normal(shots), -RABI_CLIP_SIGMAS, RABI_CLIP_SIGMAS)
    cumulative = np.cumsum(ensemble.weights)
    fock = ensemble.levels[np.minimum(np.searchsorted(cumulative, rng.random(shots), side="right"),
                                      len(cumulative) - 1)]
    flip_mask = rng.random((shots, gate_count)) < flip_probability
    flip_bin = rng.integers(0, config.flip_time_bins, (shots, gate_count))
    flip_ion = rng.integers(0, 2, (shots, gate_count))
    decay_prob = 1 - (1 - config.decay_per_gate / 2) ** gate_count
    decay = rng.random((shots, 2)) < decay_prob
    misread = rng.random((shots, 2)) < config.detection_error
    measurement = rng.random(shots)
    return ShotBatch(detuning, scale, fock, flip_mask, flip_bin, flip_ion, decay, misread,
                     measurement, config.flip_time_bins)


def draw_shot(config: NoiseConfig, gate_count: int, rng: np.random.Generator,
              flip_probability: float = 0.0) -> ShotDraw:
    """Single-shot version of :func:`draw_batch`."""
    return draw_batch(config, gate_count, rng, 1, flip_probability).shot(0)


def _outcome(label_probabilities: np.ndarray, draw: ShotDraw) -> int:
    """Sample the two-ion label, then apply decay and misreads per ion."""
    cumulative = np.cumsum(label_probabilities / label_probabilities.sum())
    label = min(int(np.searchsorted(cumulative, draw.measurement_u, side="right")), 3)
    bright = [label // 2 == 0, label % 2 == 0]
    for ion in range(2):
        if draw.decay_ions[ion]:
            bright[ion] = True
        if draw.misread_ions[ion]:
            bright[ion] = not bright[ion]
    return int(sum(bright))


def frequency_phase(state: np.ndarray, offset_phase) -> np.ndarray:
    """Apply exp(-i offset_phase S_z / 2) to amplitudes of shape (..., 4N)."""
    offset_phase = np.asarray(offset_phase, dtype=float)
    batch = np.array(state, dtype=complex)
    shaped = batch.reshape(batch.shape[:-1] + (4, -1))
    factor = np.exp(1j * offset_phase)[..., None]
    shaped[..., 0, :] *= factor
    shaped[..., 3, :] *= np.conj(factor)
    return shaped.reshape(batch.shape)


def long_pulse_drive(drive: DriveConfig, gate_count: int) -> DriveConfig:
    """One pulse with the plateau area of ``gate_count`` shaped gates."""
    rise = drive.envelope.effective_rise
    plateau_area = drive.duration - rise
    return replace(drive, envelope=drive.envelope.with_duration(gate_count * plateau_area + rise))


def total_pulse_duration(drive: DriveConfig, gate_count: int, schedule: str = "concatenated") -> float:
    if schedule == "long":
        return long_pulse_drive(drive, gate_count).duration if gate_count else 0.0
    return gate_count * drive.duration


def simulate_noisy_state(draw: ShotDraw, trap: TrapParams, drive: DriveConfig, gate_count: int,
                         cutoff: int, *, analysis_phi: Optional[float] = None,
                         schedule: str = "concatenated", freq_noise_model: str = "phase",
                         integrator: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Final amplitudes of one shot by direct integration (reference path)."""
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}")
    psi = np.zeros(4 * cutoff, dtype=complex)
    psi[draw.initial_fock_n] = 1.0
    in_hamiltonian = draw.detuning_offset if freq_noise_model == "hamiltonian" else 0.0
    kwargs = dict(rabi_scales=draw.rabi_scale, detunings=in_hamiltonian, integrator=integrator)
    flip_ops = {ion: np.kron(single_ion_flip(ion), np.eye(cutoff)) for ion in (0, 1)}
    events = sorted(draw.flip_events)

    if schedule == "long" and gate_count:
        pulse = long_pulse_drive(drive, gate_count)
        # flip positions are spread uniformly over the whole pulse
        times = [pos / gate_count * pulse.duration for pos, _ in events]
        start = 0.0
        for t, (_, ion) in zip(times, events):
            psi, _ = propagate(psi, trap, pulse, start, t, **kwargs)
            psi = flip_ops[ion] @ psi
            start = t
        psi, _ = propagate(psi, trap, pulse, start, pulse.duration, **kwargs)
    else:
        for gate in range(gate_count):
            start = 0.0
            for pos, ion in events:
                if int(pos) == gate:
                    t = (pos - gate) * drive.duration
                    psi, _ = propagate(psi, trap, drive, start, t, **kwargs)
                    psi = flip_ops[ion] @ psi
                    start = t
            psi, _ = propagate(psi, trap, drive, start, drive.duration, **kwargs)

    if freq_noise_model == "phase":
        psi = frequency_phase(psi, draw.detuning_offset * total_pulse_duration(drive, gate_count, schedule))
    if analysis_phi is not None:
        psi = (np.kron(carrier_rotation(math.pi / 2, analysis_phi), np.eye(cutoff)) @ psi)
    return psi


def simulate_noisy_shot(draw: ShotDraw, trap: TrapParams, drive: DriveConfig, gate_count: int,
                        cutoff: int = 15, **kwargs) -> int:
    """Number of ions found bright in one simulated shot."""
    psi = simulate_noisy_state(draw, trap, drive, gate_count, cutoff, **kwargs)
    label_probs = np.sum(np.abs(psi.reshape(4, cutoff)) ** 2, axis=1)
    return _outcome(label_probs, draw)


def parity_decay_amplitude(m: int, freq_noise_fwhm: float, tau_gate: float) -> float:
    """Ensemble-averaged parity amplitude exp(-2 sigma^2 (m tau)^2) under Gaussian frequency noise."""
    if m < 0:
        raise ValueError("gate count must be >= 0")
    sigma = 2 * math.pi * freq_noise_fwhm * FWHM_TO_SIGMA
    return math.exp(-2 * (sigma * m * tau_gate) ** 2)


def population_leakage_slope(p_flip_event: float) -> float:
    """Predicted per-gate decrease of p0 + p2 for a per-gate flip-event probability."""
    if not 0 <= p_flip_event <= 1:
        raise ValueError("flip probability must be in [0, 1]")
    return FLIP_LEAKAGE_FACTOR * p_flip_event


def flip_leakage_factor(trap: TrapParams, drive: DriveConfig, cutoff: int = 15, bins: int = 16,
                        integrator: IntegratorConfig = IntegratorConfig()) -> float:
    """Odd-parity population after one gate with a single flip, averaged over bins and ions."""
    engine = ShotEngine(trap, drive, replace(NoiseConfig.noiseless(), flip_time_bins=bins), cutoff,
                        integrator=integrator, flip_probability=1.0).build()
    leaked = []
    for b in range(bins):
        for ion in (0, 1):
            psi = engine._flip_states(0, 1, {0: [(b, ion)]})[0].reshape(4, cutoff)
            pops = np.sum(np.abs(psi) ** 2, axis=1)
            leaked.append(pops[1] + pops[2])
    return float(np.mean(leaked))


def _chebyshev_nodes(centre: float, half_width: float, count: int) -> np.ndarray:
    k = np.arange(count)
    return centre + half_width * np.cos((2 * k + 1) * np.pi / (2 * count))


def _barycentric_weights(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Lagrange basis values L_j(x) for Chebyshev nodes of the first kind, shape (points, nodes)."""
    count = len(nodes)
    if count == 1:
        return np.ones((len(points), 1))
    k = np.arange(count)
    bary = (-1.0) ** k * np.sin((2 * k + 1) * np.pi / (2 * count))
    diff = points[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, rtol=0, atol=1e-15)
    diff = np.where(exact, 1.0, diff)
    terms = bary / diff
    out = terms / terms.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    out[hit] = exact[hit].astype(float)
    return out


@lru_cache(maxsize=256)
def _cached_node(job):
    trap, drive, cutoff, checkpoints, scale, integrator = job
    gate, parts = pulse_propagator(trap, drive, cutoff, checkpoints=checkpoints, rabi_scale=scale,
                                   integrator=integrator)
    return gate, tuple(parts)


def node_propagators(job):
    """Gate propagator and flip-bin propagators for one Rabi scale."""
    return _cached_node(job)


class ShotEngine:
    """Fast Monte Carlo for concatenated gates with the phase noise model.

    Full propagators of one gate (and of each flip time bin) are computed at
    Chebyshev nodes of the Rabi scale. A shot's final state is the Lagrange
    interpolation of the exact node states, so the only approximation is the
    polynomial dependence on the Rabi scale.
    """

    def __init__(self, trap: TrapParams, drive: DriveConfig, noise: NoiseConfig, cutoff: int = 15,
                 *, integrator: IntegratorConfig = IntegratorConfig(), rabi_nodes: int = 12,
                 flip_probability: Optional[float] = None):
        if noise.freq_noise_model != "phase":
            raise ValueError("ShotEngine supports the phase frequency-noise model only")
        self.trap, self.drive, self.noise, self.cutoff = trap, drive, noise, cutoff
        self.integrator = integrator
        gap = trap.nu - drive.delta
        effective = (noise.effective_flip_probability(gap, trap.eta)
                     if flip_probability is None else flip_probability)
        self.flip_probability = effective
        self.event_probability = flip_event_probability(effective)
        sigma = noise.rabi_rel_sigma
        count = rabi_nodes if sigma > 0 else 1
        self.nodes = _chebyshev_nodes(1.0, RABI_CLIP_SIGMAS * sigma, count)
        self.levels = thermal_weights(noise.nbar, noise.thermal_tail).levels
        if self.levels.max() >= cutoff:
            raise ValueError("Fock cutoff too small for the thermal ensemble")
        bins = noise.flip_time_bins
        self._bin_times = [(b + 0.5) / bins * drive.duration for b in range(bins)]
        self._gates = []
        self._bins = []
        self._flips = [np.kron(single_ion_flip(ion), np.eye(cutoff)) for ion in (0, 1)]
        self._powers = {}
        self._built = False

    def node_jobs(self) -> list:
        checkpoints = tuple(self._bin_times) if self.event_probability > 0 else ()
        return [(self.trap, self.drive, self.cutoff, checkpoints, float(scale), self.integrator)
                for scale in self.nodes]

    def build(self, mapper=map):
        """Compute node propagators; ``mapper`` may be a pool's ``map``.

        Results are cached per process, and each node is an independent job,
        so the outcome does not depend on how jobs are scheduled.
        """
        if self._built:
            return self
        for gate, parts in mapper(node_propagators, self.node_jobs()):
            self._gates.append(gate)
            self._bins.append(list(parts))
        self._built = True
        return self

    def _plain_states(self, gate_count: int) -> np.ndarray:
        """Node states U_j^m |levels>, shape (nodes, levels, 4N)."""
        if gate_count not in self._powers:
            known = [m for m in self._powers if m < gate_count]
            start = max(known) if known else 0
            if start:
                states = self._powers[start].copy()
            else:
                states = np.zeros((len(self.nodes), len(self.levels), 4 * self.cutoff), dtype=complex)
                states[:, np.arange(len(self.levels)), self.levels] = 1.0
            for _ in range(gate_count - start):
                states = np.einsum("jab,jkb->jka", np.stack(self._gates), states)
            self._powers[gate_count] = states
        return self._powers[gate_count]

    def _flip_states(self, level: int, gate_count: int, events: Sequence) -> np.ndarray:
        out = []
        for j in range(len(self.nodes)):
            psi = np.zeros(4 * self.cutoff, dtype=complex)
            psi[level] = 1.0
            gate, parts = self._gates[j], self._bins[j]
            for g in range(gate_count):
                prev = None
                for b, ion in events.get(g, ()):
                    step = parts[b] if prev is None else parts[b] @ prev.conj().T
                    psi = self._flips[ion] @ (step @ psi)
                    prev = parts[b]
                psi = gate @ psi if prev is None else gate @ (prev.conj().T @ psi)
            out.append(psi)
        return np.array(out)

    def final_states(self, batch: ShotBatch, gate_count: int,
                     analysis_phi: Optional[float] = None) -> np.ndarray:
        """Amplitudes after the sequence (and analysis pulse) for every shot."""
        self.build()
        weights = _barycentric_weights(self.nodes, np.asarray(batch.rabi_scale, dtype=float))
        level_index = {int(n): i for i, n in enumerate(self.levels)}
        plain = self._plain_states(gate_count)
        states = np.empty((len(batch), 4 * self.cutoff), dtype=complex)
        has_flip = batch.flip_mask.any(axis=1) if gate_count else np.zeros(len(batch), bool)
        idx = np.array([level_index[int(n)] for n in batch.initial_fock_n])
        clean = ~has_flip
        states[clean] = np.einsum("sj,sja->sa", weights[clean], plain[:, idx[clean], :].transpose(1, 0, 2))
        for s in np.nonzero(has_flip)[0]:
            events = {}
            for g in np.nonzero(batch.flip_mask[s])[0]:
                events.setdefault(int(g), []).append((int(batch.flip_bin[s, g]), int(batch.flip_ion[s, g])))
            node_states = self._flip_states(int(batch.initial_fock_n[s]), gate_count, events)
            states[s] = weights[s] @ node_states
        phase = batch.detuning_offset * total_pulse_duration(self.drive, gate_count)
        states = frequency_phase(states, phase)
        if analysis_phi is not None:
            rot = carrier_rotation(math.pi / 2, analysis_phi)
            shaped = states.reshape(len(batch), 4, self.cutoff)
            states = np.einsum("pq,sqn->spn", rot, shaped).reshape(len(batch), -1)
        return states

    def outcomes(self, batch: ShotBatch, gate_count: int,
                 analysis_phi: Optional[float] = None) -> np.ndarray:
        """Bright-ion count per shot."""
        states = self.final_states(batch, gate_count, analysis_phi)
        probs = np.sum(np.abs(states.reshape(len(batch), 4, self.cutoff)) ** 2, axis=2)
        probs /= probs.sum(axis=1, keepdims=True)
        cumulative = np.cumsum(probs, axis=1)
        labels = np.minimum((cumulative <= batch.measurement_u[:, None]).sum(axis=1), 3)
        bright = np.stack([labels // 2 == 0, labels % 2 == 0], axis=1)
        bright = np.where(batch.decay_ions, True, bright)
        bright = np.where(batch.misread_ions, ~bright, bright)
        return bright.sum(axis=1)

    def run(self, gate_count: int, shots: int, rng: np.random.Generator,
            analysis_phi: Optional[float] = None) -> np.ndarray:
        batch = draw_batch(self.noise, gate_count, rng, shots, self.event_probability)
        return self.outcomes(batch, gate_count, analysis_phi)
