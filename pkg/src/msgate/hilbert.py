"""Joint qubit-motion Hilbert space for two ions sharing one vibrational mode.

State vectors are indexed as ``q * N + n`` with the two-qubit label
``q = 2 * q1 + q2`` (``S = 0``, ``D = 1``) and the Fock index ``n < N``.

Sign convention, used everywhere in the package: ``sigma_z = |D><D| - |S><S|``
and ``sigma_+ = |D><S|``, so that ``sigma_+ |S> = |D>``. With this choice
``sigma_y = -i (sigma_+ - sigma_-)`` and ``[S_x, S_y] = 2i S_z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import expm

QUBIT_LABELS = ("S", "D")
TWO_QUBIT_LABELS = ("SS", "SD", "DS", "DD")
DEFAULT_CUTOFF = 15

_SIGMA_PLUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
_SIGMA_MINUS = _SIGMA_PLUS.T.copy()
_SIGMA_X = _SIGMA_PLUS + _SIGMA_MINUS
_SIGMA_Y = -1j * (_SIGMA_PLUS - _SIGMA_MINUS)
_SIGMA_Z = np.diag([-1.0, 1.0]).astype(complex)
_I2 = np.eye(2, dtype=complex)

# number of ions in |S> (bright) for each two-qubit label SS, SD, DS, DD
BRIGHT_COUNT = np.array([2, 1, 1, 0])


def qubit_index(label: str) -> int:
    try:
        return QUBIT_LABELS.index(label.upper())
    except (ValueError, AttributeError):
        raise ValueError(f"qubit label must be 'S' or 'D', got {label!r}") from None


@dataclass(frozen=True, eq=False)
class SystemState:
    """Pure state of the two qubits and the motional mode.

    ``amplitudes`` is stored as a read-only complex vector of length ``4 * N``.
    """

    amplitudes: np.ndarray
    fock_cutoff: int

    def __post_init__(self):
        if self.fock_cutoff < 1:
            raise ValueError("fock_cutoff must be >= 1")
        amps = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amps.size != 4 * self.fock_cutoff:
            raise ValueError(
                f"expected {4 * self.fock_cutoff} amplitudes, got {amps.size}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def as_matrix(self) -> np.ndarray:
        """Amplitudes reshaped to (4 qubit labels, N Fock levels)."""
        return self.amplitudes.reshape(4, self.fock_cutoff)

    def apply(self, operator: np.ndarray) -> "SystemState":
        return SystemState(operator @ self.amplitudes, self.fock_cutoff)

    def overlap(self, other: "SystemState") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def fidelity(self, other: "SystemState") -> float:
        """|<self|other>|^2; insensitive to global phase."""
        return abs(self.overlap(other)) ** 2

    def qubit_density_matrix(self) -> np.ndarray:
        """Reduced 4x4 density matrix of the qubits (motion traced out)."""
        m = self.as_matrix()
        return m @ m.conj().T

    def populations(self) -> np.ndarray:
        """Probabilities of SS, SD, DS, DD."""
        return np.sum(np.abs(self.as_matrix()) ** 2, axis=1)

    def bright_populations(self) -> np.ndarray:
        """(p0, p1, p2): probability of finding k ions in |S>."""
        return bright_populations(self.populations())

    def mean_phonon_number(self) -> float:
        n = np.arange(self.fock_cutoff)
        return float(np.sum(np.abs(self.as_matrix()) ** 2 * n))


def bright_populations(label_probabilities) -> np.ndarray:
    """Collapse SS/SD/DS/DD probabilities to (p0, p1, p2)."""
    p = np.asarray(label_probabilities, dtype=float)
    return np.stack([p[..., 3], p[..., 1] + p[..., 2], p[..., 0]], axis=-1)


def make_basis_state(q1: str, q2: str, n: int, cutoff: int = DEFAULT_CUTOFF) -> SystemState:
    if not 0 <= n < cutoff:
        raise IndexError(f"Fock index {n} outside 0..{cutoff - 1}")
    amps = np.zeros(4 * cutoff, dtype=complex)
    q = 2 * qubit_index(q1) + qubit_index(q2)
    amps[q * cutoff + n] = 1.0
    return SystemState(amps, cutoff)


def state_from_qubits(qubit_amplitudes, n: int = 0, cutoff: int = DEFAULT_CUTOFF) -> SystemState:
    """Product of a two-qubit state (SS, SD, DS, DD amplitudes) with Fock state |n>."""
    if not 0 <= n < cutoff:
        raise IndexError(f"Fock index {n} outside 0..{cutoff - 1}")
    q = np.asarray(qubit_amplitudes, dtype=complex)
    amps = np.zeros((4, cutoff), dtype=complex)
    amps[:, n] = q
    return SystemState(amps.reshape(-1), cutoff)


@dataclass(frozen=True)
class SpinKind:
    """Which collective spin operator to build.

    ``name`` is one of x, y, z, plus, minus, y_psi; ``psi`` only matters for
    y_psi, where ``S_{y,psi} = S_y cos(psi) + S_z sin(psi)``.
    """

    name: str
    psi: float = 0.0

    _NAMES = ("x", "y", "z", "plus", "minus", "y_psi")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise ValueError(f"unknown spin kind {self.name!r}")

    @classmethod
    def y_psi(cls, psi: float) -> "SpinKind":
        return cls("y_psi", float(psi))


SpinKind.X = SpinKind("x")
SpinKind.Y = SpinKind("y")
SpinKind.Z = SpinKind("z")
SpinKind.PLUS = SpinKind("plus")
SpinKind.MINUS = SpinKind("minus")


def _single_ion(kind: SpinKind) -> np.ndarray:
    if kind.name == "x":
        return _SIGMA_X
    if kind.name == "y":
        return _SIGMA_Y
    if kind.name == "z":
        return _SIGMA_Z
    if kind.name == "plus":
        return _SIGMA_PLUS
    if kind.name == "minus":
        return _SIGMA_MINUS
    return _SIGMA_Y * math.cos(kind.psi) + _SIGMA_Z * math.sin(kind.psi)


def single_ion_operator(op: np.ndarray, ion: int) -> np.ndarray:
    """Embed a 2x2 operator acting on ion 0 or 1 into the 4-dim qubit space."""
    if ion == 0:
        return np.kron(op, _I2)
    if ion == 1:
        return np.kron(_I2, op)
    raise ValueError("ion index must be 0 or 1")


def qubit_spin(kind: Union[SpinKind, str]) -> np.ndarray:
    """Collective operator sigma^(1) + sigma^(2) on the 4-dim qubit factor."""
    if isinstance(kind, str):
        kind = SpinKind(kind)
    s = _single_ion(kind)
    return np.kron(s, _I2) + np.kron(_I2, s)


def on_qubits(op: np.ndarray, cutoff: int) -> np.ndarray:
    return np.kron(op, np.eye(cutoff))


def on_motion(op: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(4), op)


def collective_spin(kind: Union[SpinKind, str], cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """Collective spin operator on the full space (identity on motion)."""
    return on_qubits(qubit_spin(kind), cutoff)


def annihilation(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff, dtype=float)), 1).astype(complex)


def displacement_matrix(beta: complex, cutoff: int) -> np.ndarray:
    """exp(beta a^dag - beta^* a) on the truncated Fock space (N x N)."""
    if beta == 0:
        return np.eye(cutoff, dtype=complex)
    a = annihilation(cutoff)
    return expm(beta * a.conj().T - np.conj(beta) * a)


def displacement(beta: complex, cutoff: int = DEFAULT_CUTOFF) -> np.ndarray:
    """Displacement operator on the motional factor, identity on the qubits."""
    return on_motion(displacement_matrix(beta, cutoff))


@dataclass(frozen=True)
class ThermalEnsemble:
    entries: tuple = field(default_factory=tuple)

    @property
    def levels(self) -> np.ndarray:
        return np.array([n for n, _ in self.entries], dtype=int)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries], dtype=float)

    @property
    def max_level(self) -> int:
        return int(self.entries[-1][0])


def thermal_weights(nbar: float, tail_tolerance: float = 1e-6) -> ThermalEnsemble:
    """Truncated, renormalized geometric occupation distribution.

    Levels are added until the remaining tail mass drops below
    ``tail_tolerance``.
    """
    if nbar < 0 or not math.isfinite(nbar):
        raise ValueError(f"mean occupation must be >= 0, got {nbar}")
    if nbar == 0:
        return ThermalEnsemble(((0, 1.0),))
    if not 0 < tail_tolerance < 1:
        raise ValueError("tail_tolerance must be in (0, 1)")
    ratio = nbar / (1.0 + nbar)
    weights = []
    n = 0
    while True:
        weights.append(ratio ** n / (1.0 + nbar))
        # mass of levels > n is ratio**(n+1)
        if ratio ** (n + 1) < tail_tolerance:
            break
        n += 1
    w = np.array(weights)
    w /= w.sum()
    return ThermalEnsemble(tuple((k, float(x)) for k, x in enumerate(w)))
