import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CUTOFF, ETA, GAP, TAU_GATE
from msgate.analysis import coherence_amplitude, default_phis, fit_exponential_decay, fit_gaussian_decay
from msgate.analysis import fit_linear, fit_sinusoid, scan_parity, split_shots
from msgate.analytic import state_bell_fidelity
from msgate.dynamics import evolve
from msgate.hilbert import SystemState, make_basis_state, thermal_weights
from msgate.noise import (
    FLIP_LEAKAGE_FACTOR,
    NoiseConfig,
    ShotDraw,
    ShotEngine,
    draw_batch,
    draw_shot,
    flip_event_probability,
    flip_leakage_factor,
    parity_decay_amplitude,
    population_leakage_slope,
    simulate_noisy_shot,
    simulate_noisy_state,
    spin_flip_probability,
)

NOISELESS = NoiseConfig.noiseless()


@pytest.fixture(scope="module")
def noiseless_engine(trap, shaped_calibration):
    return ShotEngine(trap, shaped_calibration.drive, NOISELESS, CUTOFF).build()


class TestNoiseConfig:
    def test_defaults(self):
        cfg = NoiseConfig()
        assert cfg.decay_per_gate == 5e-5
        assert cfg.detection_error == 0.0
        assert cfg.freq_noise_model == "phase"

    @pytest.mark.parametrize("field,value", [("gamma", -1), ("decay_per_gate", 1.5), ("detection_error", -0.1),
                                             ("flip_probability", 2.0), ("freq_noise_model", "white")])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            NoiseConfig(**{field: value})

    def test_sigma_from_fwhm(self):
        sigma = NoiseConfig(freq_noise_fwhm=180).detuning_sigma
        assert sigma == pytest.approx(2 * math.pi * 76.43, rel=1e-3)

    def test_flip_probability_override(self):
        assert NoiseConfig(gamma=2e-7, flip_probability=2e-3).effective_flip_probability(GAP, ETA) == 2e-3
        derived = NoiseConfig(gamma=2e-7).effective_flip_probability(GAP, ETA)
        assert derived == pytest.approx(spin_flip_probability(2e-7, GAP, ETA, 20e3))


class TestSpinFlipProbability:
    def test_no_impurity(self):
        assert spin_flip_probability(0.0, GAP, ETA, 20e3) == 0.0

    def test_eta_scaling(self):
        p = spin_flip_probability(2e-7, GAP, ETA, 20e3)
        assert spin_flip_probability(2e-7, GAP, 2 * ETA, 20e3) == pytest.approx(p / 4)

    def test_reported_inputs_in_hertz(self):
        # both frequencies in Hz: pi * 2e-7 * 20e3 / (2 * 0.044**2 * 20e3)
        assert spin_flip_probability(2e-7, GAP, ETA, 20e3) == pytest.approx(1.623e-4, rel=1e-3)

    @pytest.mark.parametrize("eta,bandwidth", [(0.0, 20e3), (ETA, 0.0)])
    def test_domain(self, eta, bandwidth):
        with pytest.raises(ValueError):
            spin_flip_probability(2e-7, GAP, eta, bandwidth)


class TestDrawShot:
    def test_noiseless(self, rng):
        draw = draw_shot(NOISELESS, 5, rng)
        assert draw.detuning_offset == 0.0
        assert draw.rabi_scale == 1.0
        assert draw.initial_fock_n == 0
        assert draw.flip_events == ()
        assert draw.decay_ions == (False, False)

    def test_frequency_spread(self, rng):
        batch = draw_batch(NoiseConfig(freq_noise_fwhm=180), 1, rng, 100_000)
        assert np.std(batch.detuning_offset) == pytest.approx(2 * math.pi * 76.43, rel=0.02)

    def test_rabi_spread(self, rng):
        batch = draw_batch(NoiseConfig(rabi_rel_sigma=7e-3), 1, rng, 100_000)
        assert np.mean(batch.rabi_scale) == pytest.approx(1.0, abs=1e-4)
        assert np.std(batch.rabi_scale) == pytest.approx(7e-3, rel=0.02)
        assert np.all(batch.rabi_scale > 0)

    def test_thermal_levels(self, rng):
        batch = draw_batch(NoiseConfig(nbar=0.05), 1, rng, 100_000)
        assert np.mean(batch.initial_fock_n == 0) == pytest.approx(1 / 1.05, abs=0.003)

    def test_flip_rate_and_bins(self, rng):
        batch = draw_batch(NoiseConfig(), 10, rng, 20_000, flip_probability=0.01)
        assert batch.flip_mask.mean() == pytest.approx(0.01, rel=0.05)
        events = [e for i in range(200) for e in batch.shot(i).flip_events]
        for position, ion in events:
            assert 0 < position < 10 and ion in (0, 1)
            assert ((position % 1) * 16 - 0.5) == pytest.approx(round((position % 1) * 16 - 0.5))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32))
    def test_same_seed_same_draw(self, seed):
        cfg = NoiseConfig(freq_noise_fwhm=180, rabi_rel_sigma=7e-3, nbar=0.05, detection_error=0.01)
        a = draw_shot(cfg, 7, np.random.default_rng(seed), 0.1)
        b = draw_shot(cfg, 7, np.random.default_rng(seed), 0.1)
        assert a == b


class TestNoisyShot:
    def test_noiseless_single_gate_statistics(self, noiseless_engine, rng):
        outcomes = noiseless_engine.run(1, 10_000, rng)
        n = len(outcomes)
        for k, expected in ((0, 0.5), (2, 0.5)):
            frac = np.mean(outcomes == k)
            assert abs(frac - expected) < 3 * math.sqrt(0.25 / n) + 0.005
        assert np.mean(outcomes == 1) < 0.01

    def test_noiseless_double_gate(self, noiseless_engine, rng):
        assert np.mean(noiseless_engine.run(2, 10_000, rng) == 0) > 0.98

    def test_full_misread(self, trap, shaped_calibration, rng):
        cfg = replace(NOISELESS, detection_error=1.0)
        for _ in range(10):
            draw = draw_shot(cfg, 0, rng)
            assert simulate_noisy_shot(draw, trap, shaped_calibration.drive, 0, CUTOFF) == 0

    def test_decay_reads_bright(self, trap, shaped_calibration):
        draw = ShotDraw(0.0, 1.0, 0, decay_ions=(True, True), measurement_u=0.99)
        assert simulate_noisy_shot(draw, trap, shaped_calibration.drive, 0, CUTOFF) == 2

    def test_engine_matches_direct_integration(self, trap, shaped_calibration, rng):
        cfg = NoiseConfig(freq_noise_fwhm=180, rabi_rel_sigma=7e-3, nbar=0.05, flip_probability=0.2)
        engine = ShotEngine(trap, shaped_calibration.drive, cfg, CUTOFF).build()
        batch = draw_batch(cfg, 3, rng, 5, engine.event_probability)
        fast = engine.final_states(batch, 3, analysis_phi=0.7)
        for i in range(len(batch)):
            exact = simulate_noisy_state(batch.shot(i), trap, shaped_calibration.drive, 3, CUTOFF, analysis_phi=0.7)
            assert np.abs(fast[i] - exact).max() < 1e-6
        outcomes = engine.outcomes(batch, 3, analysis_phi=0.7)
        direct = [simulate_noisy_shot(batch.shot(i), trap, shaped_calibration.drive, 3, CUTOFF, analysis_phi=0.7)
                  for i in range(len(batch))]
        assert outcomes.tolist() == direct

    def test_engine_rejects_hamiltonian_model(self, trap, shaped_calibration):
        with pytest.raises(ValueError):
            ShotEngine(trap, shaped_calibration.drive, NoiseConfig(freq_noise_model="hamiltonian"))

    def test_long_schedule_single_gate_equals_concatenated(self, trap, shaped_calibration):
        draw = ShotDraw(300.0, 1.003, 0)
        kw = dict(analysis_phi=0.2)
        a = simulate_noisy_state(draw, trap, shaped_calibration.drive, 1, CUTOFF, schedule="long", **kw)
        b = simulate_noisy_state(draw, trap, shaped_calibration.drive, 1, CUTOFF, **kw)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_long_schedule_three_gates(self, trap, shaped_calibration):
        psi = simulate_noisy_state(ShotDraw(0.0, 1.0, 0), trap, shaped_calibration.drive, 3, CUTOFF,
                                   schedule="long")
        assert state_bell_fidelity(SystemState(psi, CUTOFF)) > 0.99

    def test_drive_locks_coherence_against_static_detuning(self, trap, shaped_calibration):
        """Inside the Hamiltonian the offset barely moves the coherence phase."""
        m, offset = 9, 2 * NoiseConfig(freq_noise_fwhm=180).detuning_sigma
        drive = shaped_calibration.drive

        def coherence(model, detuning):
            psi = simulate_noisy_state(ShotDraw(detuning, 1.0, 0), trap, drive, m, CUTOFF, freq_noise_model=model)
            return SystemState(psi, CUTOFF).qubit_density_matrix()[3, 0]

        reference = coherence("phase", 0.0)
        free = np.angle(coherence("phase", offset) / reference)
        locked = np.angle(coherence("hamiltonian", offset) / reference)
        assert abs(free) == pytest.approx(2 * offset * m * drive.duration, rel=1e-6)
        assert abs(locked) < 0.1 * abs(free)


class TestDephasing:
    def test_no_gates(self):
        assert parity_decay_amplitude(0, 180, TAU_GATE) == 1.0

    def test_single_gate_loss(self):
        loss_amplitude = 1 - parity_decay_amplitude(1, 180, TAU_GATE)
        assert loss_amplitude == pytest.approx(1e-3, abs=5e-4)
        assert loss_amplitude / 2 == pytest.approx(1e-3, abs=5e-4)

    def test_negative_gate_count(self):
        with pytest.raises(ValueError):
            parity_decay_amplitude(-1, 180, TAU_GATE)

    def test_gaussian_shape_from_frequency_noise_alone(self, trap, shaped_calibration):
        cfg = replace(NOISELESS, freq_noise_fwhm=180)
        engine = ShotEngine(trap, shaped_calibration.drive, cfg, CUTOFF).build()
        ms = np.arange(1, 22, 2)
        phis = default_phis()
        amplitudes, errors = [], []
        for m in ms:
            rng = np.random.default_rng(int(m))
            scan = scan_parity(lambda phi, n: engine.run(int(m), n, rng, phi), phis, split_shots(10_000, len(phis)))
            fit = fit_sinusoid(scan)
            amplitudes.append(fit["A"])
            errors.append(fit.errors["A"])
        gauss = fit_gaussian_decay(ms, amplitudes, errors)
        expo = fit_exponential_decay(ms, amplitudes, errors)
        assert gauss.residual_norm < expo.residual_norm
        closed_form_m0 = 1 / (math.sqrt(2) * cfg.detuning_sigma * shaped_calibration.drive.duration)
        assert gauss["m0"] == pytest.approx(closed_form_m0, rel=0.05)


class TestLeakage:
    def test_zero(self):
        assert population_leakage_slope(0.0) == 0.0

    @given(st.floats(0, 0.5), st.floats(0, 0.5))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert population_leakage_slope(lo) <= population_leakage_slope(hi)

    def test_factor_matches_simulation(self, trap, shaped_calibration):
        assert flip_leakage_factor(trap, shaped_calibration.drive, CUTOFF) == pytest.approx(FLIP_LEAKAGE_FACTOR,
                                                                                            abs=2e-3)

    def test_event_probability_inverts_factor(self):
        assert population_leakage_slope(flip_event_probability(2e-3)) == pytest.approx(2e-3)

    def test_linear_population_decay_from_flips(self, trap, shaped_calibration):
        cfg = replace(NOISELESS, flip_probability=2e-3)
        engine = ShotEngine(trap, shaped_calibration.drive, cfg, CUTOFF).build()
        ms = np.arange(1, 22, 2)
        even = []
        for m in ms:
            outcomes = engine.run(int(m), 100_000, np.random.default_rng(100 + int(m)))
            even.append(np.mean(outcomes != 1))
        line = fit_linear(ms, even)
        assert line["r_squared"] > 0.99
        # saturation of the even-flip fraction makes the fitted slope slightly smaller than p
        assert -line["slope"] == pytest.approx(2e-3, rel=0.1)


class TestThermalOccupation:
    def test_lamb_dicke_insensitivity(self, trap, shaped_calibration):
        ensemble = thermal_weights(0.05)
        fidelities = [state_bell_fidelity(evolve(make_basis_state("S", "S", int(n), CUTOFF), trap,
                                                 shaped_calibration.drive)) for n in ensemble.levels]
        thermal = float(np.dot(ensemble.weights, fidelities))
        assert fidelities[0] - thermal < 0.005
