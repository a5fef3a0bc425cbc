"""Run configuration: YAML documents with explicit physical units.

Quantities are written as strings such as ``"1.23 MHz"`` or ``"2 us"`` and kept
verbatim inside :class:`RunConfig`, so that parse -> emit -> parse is the
identity. Conversion to SI angular units happens once, in :meth:`RunConfig.resolve`.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from typing import Any, Optional

import yaml

SCHEMA_VERSION = 1

_FREQUENCY_UNITS = {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9}
_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "μs": 1e-6, "ns": 1e-9}
_ANGLE_UNITS = {"rad": 1.0, "deg": math.pi / 180, "pi": math.pi}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-zµμ]+)\s*$")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _parse_quantity(text, units: dict, where: str) -> float:
    """Value in the base unit (Hz, s or rad) of a quantity string."""
    if isinstance(text, bool) or not isinstance(text, (str, int, float)):
        raise ConfigError(f"{where}: expected a quantity with unit, got {text!r}")
    if not isinstance(text, str):
        if text == 0:
            return 0.0
        raise ConfigError(f"{where}: {text!r} needs an explicit unit ({', '.join(units)})")
    match = _QUANTITY.match(text)
    if not match or match.group(2) not in units:
        raise ConfigError(f"{where}: cannot parse {text!r}; expected a number and one of {', '.join(units)}")
    return float(match.group(1)) * units[match.group(2)]


def frequency_hz(text, where: str = "value") -> float:
    return _parse_quantity(text, _FREQUENCY_UNITS, where)


def time_s(text, where: str = "value") -> float:
    return _parse_quantity(text, _TIME_UNITS, where)


def angle_rad(text, where: str = "value") -> float:
    return _parse_quantity(text, _ANGLE_UNITS, where)


# field kinds: "frequency", "time", "angle", "float", "int", "str", "list", "optional_*"
SCHEMA = {
    "trap": {"axial_frequency": "frequency", "lamb_dicke": "float"},
    "drive": {
        "detuning_gap": "frequency",
        "rise_time": "time",
        "envelope": "str",
        "zeta": "angle",
        "phi": "angle",
        "imbalance": "float",
    },
    "noise": {
        "gamma": "float",
        "bandwidth_B": "frequency",
        "freq_noise_fwhm": "frequency",
        "rabi_rel_sigma": "float",
        "nbar": "float",
        "decay_per_gate": "float",
        "detection_error": "float",
        "flip_probability": "optional_float",
        "flip_time_bins": "int",
        "freq_noise_model": "str",
    },
    "simulation": {
        "fock_cutoff": "int",
        "integrator": "str",
        "max_step": "optional_time",
        "tolerance": "float",
        "rabi_nodes": "int",
        "calibrate": "bool",
    },
    "experiment": {
        "kind": "str",
        "population_shots": "int",
        "parity_shots": "int",
        "phase_points": "int",
        "gate_counts": "list",
        "schedule": "str",
        "steps_per_gate": "int",
        "max_gates": "float",
        "max_gates_limit": "float",
        "oracle_gates": "float",
        "parameter": "optional_str",
        "values": "list",
        "base_kind": "str",
    },
}
TOP_LEVEL = {"schema_version", "profile", "seed", "workers", "output", *SCHEMA}
EXPERIMENT_KINDS = ("gate", "dynamics", "multigate", "oracle", "sweep")

_BASE_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "workers": 1,
    "output": "results",
    "trap": {"axial_frequency": "1.23 MHz", "lamb_dicke": 0.044},
    "drive": {"detuning_gap": "20 kHz", "rise_time": "2 us", "envelope": "sine_squared_ramp",
              "zeta": "0 rad", "phi": "0 rad", "imbalance": 1.0},
    "noise": {"gamma": 0.0, "bandwidth_B": "20 kHz", "freq_noise_fwhm": "0 Hz", "rabi_rel_sigma": 0.0,
              "nbar": 0.0, "decay_per_gate": 0.0, "detection_error": 0.0, "flip_probability": None,
              "flip_time_bins": 16, "freq_noise_model": "phase"},
    "simulation": {"fock_cutoff": 15, "integrator": "rk4", "max_step": None, "tolerance": 1e-7,
                   "rabi_nodes": 12, "calibrate": True},
    "experiment": {"kind": "gate", "population_shots": 13000, "parity_shots": 29400, "phase_points": 16,
                   "gate_counts": list(range(1, 22, 2)), "schedule": "concatenated", "steps_per_gate": 25,
                   "max_gates": 17, "max_gates_limit": 50, "oracle_gates": 2.0, "parameter": None, "values": [],
                   "base_kind": "gate"},
}

PROFILES = {
    "default": {},
    "noiseless": {},
    "paper2008": {
        "seed": 2008,
        "noise": {"gamma": 2.0e-7, "bandwidth_B": "20 kHz", "freq_noise_fwhm": "180 Hz",
                  "rabi_rel_sigma": 7.0e-3, "nbar": 0.05, "decay_per_gate": 5.0e-5,
                  "detection_error": 1.5e-3, "flip_probability": 2.0e-3},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_fields(doc: dict):
    for key in doc:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown field {key!r}")
    for section, fields in SCHEMA.items():
        value = doc.get(section, {})
        if value is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in value:
            if key not in fields:
                raise ConfigError(f"unknown field {section}.{key!r}")


@dataclass(frozen=True)
class ResolvedConfig:
    """SI angular quantities (rad/s, s, rad) ready for the simulation layer."""

    nu: float
    eta: float
    gap: float
    rise_time: float
    envelope: str
    zeta: float
    phi: float
    imbalance: float
    noise: dict
    fock_cutoff: int
    integrator: str
    max_step: Optional[float]
    tolerance: float
    rabi_nodes: int
    calibrate: bool
    experiment: dict
    seed: int
    workers: int
    output: str


class RunConfig:
    """Validated configuration document (defaults expanded)."""

    def __init__(self, document: dict):
        self.document = document
        # validation happens eagerly so that errors surface at parse time
        self.resolved = self._resolve()

    @classmethod
    def from_dict(cls, doc: Optional[dict], profile: Optional[str] = None) -> "RunConfig":
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        _check_fields(doc)
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        name = profile or doc.get("profile") or "default"
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; available: {', '.join(PROFILES)}")
        merged = _merge(_merge(_BASE_DEFAULTS, PROFILES[name]), doc)
        merged["profile"] = name
        return cls(merged)

    @classmethod
    def from_yaml(cls, text: str, profile: Optional[str] = None) -> "RunConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        return cls.from_dict(doc, profile)

    @classmethod
    def load(cls, path, profile: Optional[str] = None) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_yaml(text, profile)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.document, sort_keys=True, allow_unicode=True)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.document)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.document == other.document

    def with_overrides(self, **sections) -> "RunConfig":
        """New config with nested fields replaced, e.g. ``noise={"nbar": 0.0}``."""
        return RunConfig(_merge(self.document, sections))

    def set_path(self, path: str, value: Any) -> "RunConfig":
        section, key = split_path(path)
        return RunConfig(_merge(self.document, {section: {key: value}}))

    def _resolve(self) -> ResolvedConfig:
        d = self.document
        trap, drive, noise, sim, exp = (d[k] for k in ("trap", "drive", "noise", "simulation", "experiment"))

        def number(section, key, value, kind=float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
            if kind is int and int(value) != value:
                raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
            return kind(value)

        nu_hz = frequency_hz(trap["axial_frequency"], "trap.axial_frequency")
        gap_hz = frequency_hz(drive["detuning_gap"], "drive.detuning_gap")
        if nu_hz <= 0:
            raise ConfigError("trap.axial_frequency must be > 0")
        if gap_hz == 0:
            raise ConfigError("drive.detuning_gap must be nonzero")
        if drive["envelope"] not in ("rectangular", "sine_squared_ramp"):
            raise ConfigError(f"drive.envelope must be rectangular or sine_squared_ramp, got {drive['envelope']!r}")
        if noise["freq_noise_model"] not in ("phase", "hamiltonian"):
            raise ConfigError("noise.freq_noise_model must be 'phase' or 'hamiltonian'")
        if sim["integrator"] not in ("rk4", "dop853"):
            raise ConfigError("simulation.integrator must be 'rk4' or 'dop853'")
        if exp["kind"] not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment.kind must be one of {', '.join(EXPERIMENT_KINDS)}")
        if exp["base_kind"] != "gate":
            raise ConfigError("experiment.base_kind: only 'gate' can be swept")
        if exp["schedule"] not in ("concatenated", "long"):
            raise ConfigError("experiment.schedule must be 'concatenated' or 'long'")
        if not isinstance(sim["calibrate"], bool):
            raise ConfigError("simulation.calibrate must be true or false")
        noise_values = {
            "gamma": number("noise", "gamma", noise["gamma"]),
            "bandwidth_B": frequency_hz(noise["bandwidth_B"], "noise.bandwidth_B"),
            "freq_noise_fwhm": frequency_hz(noise["freq_noise_fwhm"], "noise.freq_noise_fwhm"),
            "rabi_rel_sigma": number("noise", "rabi_rel_sigma", noise["rabi_rel_sigma"]),
            "nbar": number("noise", "nbar", noise["nbar"]),
            "decay_per_gate": number("noise", "decay_per_gate", noise["decay_per_gate"]),
            "detection_error": number("noise", "detection_error", noise["detection_error"]),
            "flip_probability": (None if noise["flip_probability"] is None
                                 else number("noise", "flip_probability", noise["flip_probability"])),
            "flip_time_bins": number("noise", "flip_time_bins", noise["flip_time_bins"], int),
            "freq_noise_model": noise["freq_noise_model"],
        }
        for key in ("population_shots", "parity_shots", "phase_points", "steps_per_gate"):
            value = number("experiment", key, exp[key], int)
            if value < 1:
                raise ConfigError(f"experiment.{key} must be >= 1")
        counts = exp["gate_counts"]
        if not isinstance(counts, list) or not counts or any(
                isinstance(m, bool) or not isinstance(m, int) or m < 1 for m in counts):
            raise ConfigError("experiment.gate_counts must be a nonempty list of integers >= 1")
        max_gates = number("experiment", "max_gates", exp["max_gates"])
        if max_gates <= 0 or max_gates > number("experiment", "max_gates_limit", exp["max_gates_limit"]):
            raise ConfigError("experiment.max_gates must be in (0, max_gates_limit]")
        oracle_gates = number("experiment", "oracle_gates", exp["oracle_gates"])
        if oracle_gates <= 0 or oracle_gates > number("experiment", "max_gates_limit", exp["max_gates_limit"]):
            raise ConfigError("experiment.oracle_gates must be in (0, max_gates_limit]")
        if exp["kind"] == "sweep":
            if exp["parameter"] is None:
                raise ConfigError("sweep needs experiment.parameter")
            split_path(exp["parameter"])
            if not isinstance(exp["values"], list) or not exp["values"]:
                raise ConfigError("sweep needs a nonempty experiment.values list")
            for value in exp["values"]:
                self.set_path_check(exp["parameter"], value)
        seed = number("top", "seed", d["seed"], int)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        workers = number("top", "workers", d["workers"], int)
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        max_step = sim["max_step"]
        return ResolvedConfig(
            nu=2 * math.pi * nu_hz,
            eta=number("trap", "lamb_dicke", trap["lamb_dicke"]),
            gap=2 * math.pi * gap_hz,
            rise_time=time_s(drive["rise_time"], "drive.rise_time"),
            envelope=drive["envelope"],
            zeta=angle_rad(drive["zeta"], "drive.zeta"),
            phi=angle_rad(drive["phi"], "drive.phi"),
            imbalance=number("drive", "imbalance", drive["imbalance"]),
            noise=noise_values,
            fock_cutoff=number("simulation", "fock_cutoff", sim["fock_cutoff"], int),
            integrator=sim["integrator"],
            max_step=None if max_step is None else time_s(max_step, "simulation.max_step"),
            tolerance=number("simulation", "tolerance", sim["tolerance"]),
            rabi_nodes=number("simulation", "rabi_nodes", sim["rabi_nodes"], int),
            calibrate=sim["calibrate"],
            experiment=copy.deepcopy(exp),
            seed=seed,
            workers=workers,
            output=str(d["output"]),
        )

    def set_path_check(self, path: str, value):
        section, key = split_path(path)
        probe = _merge(self.document, {section: {key: value}})
        probe["experiment"] = dict(probe["experiment"], kind="gate")
        RunConfig(probe)

    def resolve(self) -> ResolvedConfig:
        return self.resolved


def scalar_paths() -> list:
    """Dotted names of every scalar field that a sweep may vary."""
    skip = {"experiment"}
    return [f"{section}.{key}" for section, fields in SCHEMA.items() if section not in skip
            for key, kind in fields.items() if kind != "list"]


def split_path(path: str) -> tuple:
    if not isinstance(path, str) or path not in scalar_paths():
        raise ConfigError(f"unknown parameter path {path!r}; valid paths: {', '.join(scalar_paths())}")
    section, key = path.split(".")
    return section, key
