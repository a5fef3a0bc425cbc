import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import CUTOFF, ETA, GAP, NU, RISE, TAU_GATE
from msgate.analytic import (
    CalibrationError,
    bell_state,
    calibrate_gate,
    expected_sequence_populations,
    gate_time,
    ideal_gate,
    ideal_gate_qubits,
    ms_propagator,
    propagator_params,
    required_rabi,
    state_bell_fidelity,
)
from msgate.dynamics import DriveConfig, PulseEnvelope, TrapParams, evolve
from msgate.hilbert import SystemState, make_basis_state, on_qubits, qubit_spin, state_from_qubits

SQ2 = 1 / math.sqrt(2)
ORACLE_TIMES = [TAU_GATE / 4, TAU_GATE / 2, TAU_GATE, 2 * TAU_GATE]


def qubit_state(amplitudes, cutoff=4):
    return state_from_qubits(np.asarray(amplitudes, dtype=complex), 0, cutoff)


class TestGateTime:
    def test_reference_gap(self):
        assert gate_time(NU, NU - GAP) == pytest.approx(50e-6, rel=1e-14)

    def test_double_gap(self):
        assert gate_time(NU, NU - 2 * GAP) == pytest.approx(25e-6, rel=1e-14)

    def test_no_closure(self):
        with pytest.raises(ValueError):
            gate_time(NU, NU)


class TestRequiredRabi:
    def test_reference_values(self):
        omega = required_rabi(NU, NU - GAP, ETA)
        assert omega / (2 * math.pi) == pytest.approx(113.636e3, rel=1e-4)
        assert omega / (2 * math.pi) == pytest.approx(110e3, rel=0.05)

    def test_eta_scaling(self):
        assert required_rabi(NU, NU - GAP, 2 * ETA) == pytest.approx(required_rabi(NU, NU - GAP, ETA) / 2)

    def test_zero_gap(self):
        assert required_rabi(NU, NU, ETA) == 0.0

    def test_eta_domain(self):
        with pytest.raises(ValueError):
            required_rabi(NU, NU - GAP, 0.0)


class TestPropagatorParams:
    def test_axis_tilt_follows_sine_of_modulation_phase(self, trap, constant_drive):
        assert propagator_params(trap, replace(constant_drive, zeta=math.pi)).psi == pytest.approx(0, abs=1e-12)
        assert propagator_params(trap, replace(constant_drive, zeta=math.pi / 2)).psi == pytest.approx(
            4 * constant_drive.omega_peak / constant_drive.delta)
        assert propagator_params(trap, constant_drive).psi == 0.0

    def test_signs_follow_detuning(self, trap, constant_drive):
        above = propagator_params(trap, replace(constant_drive, delta=NU + GAP))
        below = propagator_params(trap, constant_drive)
        assert below.lambda_rate > 0 and below.chi > 0
        assert above.lambda_rate < 0

    def test_gate_phase_is_eighth_turn(self, trap, constant_drive):
        p = propagator_params(trap, constant_drive)
        assert p.lambda_rate * TAU_GATE == pytest.approx(math.pi / 8)

    def test_alpha_closes(self, trap, constant_drive):
        p = propagator_params(trap, constant_drive)
        assert abs(p.alpha(gate_time(NU, constant_drive.delta))) < 1e-12


class TestMsPropagator:
    def test_identity_at_zero(self, trap, constant_drive):
        u = ms_propagator(0.0, trap, constant_drive, CUTOFF)
        np.testing.assert_allclose(u, np.eye(4 * CUTOFF), atol=1e-10)

    @pytest.mark.parametrize("t", ORACLE_TIMES + [13.7e-6])
    def test_unitary(self, trap, constant_drive, t):
        u = ms_propagator(t, trap, replace(constant_drive, zeta=0.6, phi=0.4), CUTOFF)
        assert np.abs(u.conj().T @ u - np.eye(4 * CUTOFF)).max() < 1e-8

    def test_motion_disentangled_at_gate_time(self, trap, constant_drive):
        u = ms_propagator(TAU_GATE, trap, constant_drive, CUTOFF)
        blocks = u.reshape(4, CUTOFF, 4, CUTOFF)
        for q in range(4):
            for p in range(4):
                np.testing.assert_allclose(blocks[q, :, p, :], blocks[q, 0, p, 0] * np.eye(CUTOFF), atol=1e-12)

    def test_rejects_shaped_envelope(self, trap, shaped_calibration):
        with pytest.raises(ValueError):
            ms_propagator(1e-6, trap, shaped_calibration.drive, CUTOFF)

    @pytest.mark.parametrize("zeta,phi", [(0.0, 0.0), (math.pi / 3, 0.0), (1.0, 0.8)])
    def test_matches_numerical_evolution(self, trap, constant_drive, zeta, phi):
        start = make_basis_state("S", "S", 0, CUTOFF)
        for t in ORACLE_TIMES:
            drive = replace(constant_drive, zeta=zeta, phi=phi, envelope=PulseEnvelope.rectangular(t))
            analytic = SystemState(ms_propagator(t, trap, drive, CUTOFF) @ start.amplitudes, CUTOFF)
            assert analytic.fidelity(evolve(start, trap, drive)) >= 0.995

    @pytest.mark.parametrize("order", [("spin_phase", "displacement", "carrier"),
                                       ("displacement", "carrier", "spin_phase")])
    def test_permuted_factor_order_fails_oracle(self, trap, constant_drive, order):
        start = make_basis_state("S", "S", 0, CUTOFF)
        worst = 1.0
        for t in ORACLE_TIMES:
            drive = replace(constant_drive, envelope=PulseEnvelope.rectangular(t))
            permuted = SystemState(ms_propagator(t, trap, drive, CUTOFF, order=order) @ start.amplitudes, CUTOFF)
            worst = min(worst, permuted.fidelity(evolve(start, trap, drive)))
        assert worst < 0.995

    def test_excursion_prefactor_matches_numerics(self, trap, constant_drive):
        """Half-way through the gate the motional excursion is 2 |alpha0| per unit spin eigenvalue."""
        t = TAU_GATE / 2
        drive = replace(constant_drive, envelope=PulseEnvelope.rectangular(t))
        out = evolve(make_basis_state("S", "S", 0, CUTOFF), trap, drive)
        n = np.arange(CUTOFF)
        mean_n = float(np.sum(np.abs(out.as_matrix()) ** 2 * n))
        p = propagator_params(trap, drive)
        # |SS> has weight 1/4 on each of the S_y eigenvalues +2 and -2
        predicted = abs(p.alpha(t)) ** 2 * (4 * 0.25 + 4 * 0.25)
        assert mean_n == pytest.approx(predicted, rel=0.1)

    def test_agrees_with_ideal_gate_at_zero_tilt(self, trap, constant_drive):
        """With psi = 0 the closed form is the ideal gate followed by the carrier rotation.

        The drive sits below the sideband (delta < nu), which selects the
        conjugate rotation sense.
        """
        drive = replace(constant_drive, zeta=0.0)
        assert propagator_params(trap, drive).psi == 0.0
        u = ms_propagator(TAU_GATE, trap, drive, CUTOFF)
        carrier = on_qubits(expm(-1j * propagator_params(trap, drive).carrier_angle(TAU_GATE) * qubit_spin("x")),
                            CUTOFF)
        start = make_basis_state("S", "S", 0, CUTOFF).amplitudes
        reference = carrier @ ideal_gate(CUTOFF, sense=-1) @ start
        assert abs(np.vdot(reference, u @ start)) ** 2 >= 0.99


class TestIdealGate:
    def test_cycle(self):
        states = [[1, 0, 0, 0], [SQ2, 0, 0, 1j * SQ2], [0, 0, 0, 1], [1j * SQ2, 0, 0, SQ2], [1, 0, 0, 0]]
        gate = ideal_gate(4)
        psi = qubit_state(states[0])
        for expected in states[1:]:
            psi = psi.apply(gate)
            assert psi.fidelity(qubit_state(expected)) >= 1 - 1e-10

    def test_sd_becomes_maximally_entangled(self):
        psi = qubit_state([0, 1, 0, 0], cutoff=1).apply(ideal_gate(1))
        m = psi.as_matrix()[:, 0].reshape(2, 2)
        reduced = m @ m.conj().T
        assert np.trace(reduced @ reduced).real == pytest.approx(0.5, abs=1e-10)
        assert abs(m[0, 0]) < 1e-12 and abs(m[1, 1]) < 1e-12

    def test_commutes_with_sy(self):
        u, sy = ideal_gate_qubits(), qubit_spin("y")
        assert np.abs(u @ sy - sy @ u).max() < 1e-12

    def test_conjugate_sense(self):
        np.testing.assert_allclose(ideal_gate_qubits(-1), ideal_gate_qubits(1).conj())

    def test_bell_state_fidelity_of_target(self):
        assert state_bell_fidelity(bell_state(5)) == pytest.approx(1.0)
        assert state_bell_fidelity(make_basis_state("S", "S", 0, 5)) == pytest.approx(0.5)


class TestSequencePopulations:
    @pytest.mark.parametrize("m,expected", [(0, (0, 0, 1)), (1, (0.5, 0, 0.5)), (2, (1, 0, 0)), (4, (0, 0, 1))])
    def test_values(self, m, expected):
        assert expected_sequence_populations(m) == pytest.approx(expected)

    @given(st.integers(0, 400))
    def test_period_four(self, m):
        assert expected_sequence_populations(m) == expected_sequence_populations(m + 4)

    @pytest.mark.parametrize("m", range(9))
    def test_matches_ideal_gate(self, m):
        psi = qubit_state([1, 0, 0, 0], cutoff=1)
        for _ in range(m):
            psi = psi.apply(ideal_gate(1))
        np.testing.assert_allclose(psi.bright_populations(), expected_sequence_populations(m), atol=1e-12)

    def test_negative(self):
        with pytest.raises(ValueError):
            expected_sequence_populations(-1)


class TestCalibration:
    def test_rectangular_starts_close(self, trap, rectangular_calibration):
        start = make_basis_state("S", "S", 0, CUTOFF)
        drive = DriveConfig(required_rabi(NU, NU - GAP, ETA), NU - GAP, PulseEnvelope.rectangular(TAU_GATE))
        assert state_bell_fidelity(evolve(start, trap, drive)) >= 0.995
        assert abs(rectangular_calibration.duration_shift) < 0.02
        assert rectangular_calibration.fidelity >= 0.999

    def test_shaped_pulse_lengthens_gate(self, shaped_calibration):
        assert shaped_calibration.drive.duration > TAU_GATE
        assert shaped_calibration.fidelity >= 0.999

    def test_achieved_fidelity_is_reproducible(self, trap, shaped_calibration):
        out = evolve(make_basis_state("S", "S", 0, CUTOFF), trap, shaped_calibration.drive)
        assert state_bell_fidelity(out) == pytest.approx(shaped_calibration.fidelity, abs=1e-12)

    def test_no_sideband_coupling_fails(self):
        with pytest.raises(CalibrationError):
            calibrate_gate(TrapParams(NU, 0.0), GAP, PulseEnvelope(RISE, TAU_GATE + RISE))
