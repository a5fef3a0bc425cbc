import json

import numpy as np
import pytest
import yaml

from msgate.cli import EXIT_CALIBRATION, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_OK, main
from msgate.config import RunConfig
from msgate.analytic import expected_sequence_populations
from msgate.experiments import make_setup, oracle_comparison, run_experiment


def write_config(path, doc):
    path.write_text(yaml.safe_dump({"schema_version": 1, **doc}))
    return str(path)


def read_summary(out_dir, command):
    return json.loads((out_dir / f"{command}_summary.json").read_text())


class TestExitCodes:
    def test_success_writes_outputs(self, tmp_path):
        config = write_config(tmp_path / "c.yaml", {"experiment": {"oracle_gates": 0.5, "steps_per_gate": 4}})
        assert main(["oracle", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_OK
        record = read_summary(tmp_path / "out", "oracle")
        assert record["schema_version"] == 1 and record["command"] == "oracle"
        assert record["config"]["experiment"]["kind"] == "oracle"
        assert record["started_at"] and record["finished_at"]
        csv_text = (tmp_path / "out" / "oracle_oracle.csv").read_text()
        assert csv_text.splitlines()[0].startswith("t_us,numeric_p0")
        assert len(csv_text.splitlines()) == 1 + 3

    @pytest.mark.parametrize("argv", [
        ["gate", "--shots", "0"],
        ["sweep", "--parameter", "drive.zeta_offset", "--values", "0 rad"],
        ["sweep", "--parameter", "drive.zeta", "--values", ""],
        ["multigate", "--gates", "1,x"],
        ["gate", "--seed", "-3"],
        ["gate", "--config", "/nonexistent/run.yaml"],
    ])
    def test_config_errors(self, argv, tmp_path, capsys):
        assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unknown_field_in_file(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.yaml", {"noise": {"colour": "pink"}})
        assert main(["gate", "--config", config, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "colour" in capsys.readouterr().err

    def test_calibration_failure(self, tmp_path):
        # without motional levels the gate cannot entangle
        config = write_config(tmp_path / "c.yaml", {"simulation": {"fock_cutoff": 1}})
        assert main(["gate", "--config", config, "--out", str(tmp_path)]) == EXIT_CALIBRATION

    def test_non_convergence(self, tmp_path):
        config = write_config(tmp_path / "c.yaml", {"simulation": {"max_step": "5 us", "calibrate": False}})
        assert main(["gate", "--config", config, "--out", str(tmp_path)]) == EXIT_NONCONVERGENCE


class TestExperiments:
    def test_noiseless_gate(self, tmp_path):
        assert main(["gate", "--profile", "noiseless", "--out", str(tmp_path)]) == EXIT_OK
        summary = read_summary(tmp_path, "gate")["summary"]
        assert summary["bell_fidelity"] >= 0.999

    def test_noiseless_five_gates(self):
        cfg = RunConfig.from_dict({"experiment": {"kind": "multigate", "gate_counts": [5]}}, "noiseless")
        assert run_experiment(cfg).summary["final_bell_fidelity"] >= 0.995

    def test_noiseless_dynamics(self):
        record = run_experiment(RunConfig.from_dict({"experiment": {"kind": "dynamics"}}, "noiseless"))
        table = record.tables["dynamics"]
        assert table.rows[0][3:] == [0.0, 0.0, 1.0]
        assert table.columns[-3:] == ["p0", "p1", "p2"]
        gates = table.column("gates")
        assert gates.max() == pytest.approx(17)
        for row in table.rows:
            m = row[1]
            if m >= 1 and abs(m - round(m)) < 1e-9:
                np.testing.assert_allclose(row[3:], expected_sequence_populations(int(round(m))), atol=0.01)
                if round(m) % 2:
                    assert row[4] < 0.01

    def test_oracle_deficit_shrinks_deeper_in_lamb_dicke_regime(self):
        setup = make_setup(RunConfig.from_dict({"experiment": {"kind": "oracle", "steps_per_gate": 10}}))
        table, deficit, _, _ = oracle_comparison(setup)
        _, deep_deficit, _, _ = oracle_comparison(setup, eta=0.01)
        assert table.rows[0][-1] == pytest.approx(1.0, abs=1e-12)
        assert deep_deficit < deficit

    def test_sweep_frequency_noise_degrades_fidelity(self, tmp_path):
        argv = ["sweep", "--profile", "noiseless", "--parameter", "noise.freq_noise_fwhm",
                "--values", "0 Hz,90 Hz,180 Hz,360 Hz", "--out", str(tmp_path)]
        assert main(argv) == EXIT_OK
        fidelity = np.loadtxt(tmp_path / "sweep_sweep.csv", delimiter=",", skiprows=1, usecols=2)
        assert np.all(np.diff(fidelity) < 0)

    @pytest.mark.parametrize("envelope,bound", [("sine_squared_ramp", 1e-3), ("rectangular", None)])
    def test_sweep_modulation_phase(self, envelope, bound):
        """One calibration serves every zeta only if the pulse is switched on adiabatically."""
        values = [f"{k / 4!r} pi" for k in range(8)]
        cfg = RunConfig.from_dict({"drive": {"envelope": envelope},
                                   "experiment": {"kind": "sweep", "parameter": "drive.zeta", "values": values,
                                                  "population_shots": 2000, "parity_shots": 3200}},
                                  "noiseless")
        record = run_experiment(cfg)
        noiseless = record.tables["sweep"].column("noiseless_bell_fidelity").astype(float)
        if bound is None:
            assert record.summary["fidelity_spread"] > 1e-2
            assert noiseless.max() - noiseless.min() > 1e-2
        else:
            assert record.summary["fidelity_spread"] < bound
            assert noiseless.max() - noiseless.min() < bound


class TestReproducibility:
    DOC = {"experiment": {"population_shots": 1500, "parity_shots": 1600},
           "noise": {"rabi_rel_sigma": 0.0}, "simulation": {"rabi_nodes": 4}}

    def run(self, tmp_path, name, workers):
        config = write_config(tmp_path / f"{name}.yaml", self.DOC)
        out = tmp_path / name
        argv = ["gate", "--config", config, "--profile", "paper2008", "--workers", str(workers), "--out", str(out)]
        assert main(argv) == EXIT_OK
        return out

    def test_byte_identical_tables_across_worker_counts(self, tmp_path):
        serial = self.run(tmp_path, "serial", 1)
        parallel = self.run(tmp_path, "parallel", 2)
        for name in ("gate_populations.csv", "gate_parity_scan.csv"):
            assert (serial / name).read_bytes() == (parallel / name).read_bytes()
        a, b = read_summary(serial, "gate"), read_summary(parallel, "gate")
        assert a["summary"] == b["summary"] and a["config"] != {}

    def test_seed_changes_results(self, tmp_path):
        first = run_experiment(RunConfig.from_dict({**self.DOC, "seed": 1}, "paper2008"))
        second = run_experiment(RunConfig.from_dict({**self.DOC, "seed": 2}, "paper2008"))
        assert first.tables["populations"].rows != second.tables["populations"].rows
