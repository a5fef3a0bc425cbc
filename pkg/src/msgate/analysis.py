"""Population estimation, parity scans, fits and Bell-state fidelity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import curve_fit

from .dynamics import carrier_pulse
from .hilbert import SystemState, bright_populations

DEFAULT_SCAN_POINTS = 16


class FitDegeneracyError(ValueError):
    """The sampling grid does not determine the model parameters."""


@dataclass(frozen=True)
class PopulationEstimate:
    """Probabilities of finding 0, 1 or 2 ions bright, with binomial errors."""

    p0: float
    p1: float
    p2: float
    shots: int
    std_errors: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def exact(cls, probabilities) -> "PopulationEstimate":
        """Population estimate without sampling noise (``shots = 0``)."""
        p = np.clip(np.asarray(probabilities, dtype=float), 0, None)
        p = p / p.sum()
        return cls(float(p[0]), float(p[1]), float(p[2]), 0, (0.0, 0.0, 0.0))

    @property
    def as_array(self) -> np.ndarray:
        return np.array([self.p0, self.p1, self.p2])

    @property
    def even(self) -> float:
        """p0 + p2."""
        return self.p0 + self.p2

    @property
    def even_error(self) -> float:
        if not self.shots:
            return 0.0
        return math.sqrt(max(self.even * (1 - self.even), 0.0) / self.shots)


def estimate_populations(outcomes: Sequence[int]) -> PopulationEstimate:
    """Relative frequencies of bright-ion counts."""
    counts_in = np.asarray(outcomes, dtype=int).reshape(-1)
    if counts_in.size == 0:
        raise ValueError("no outcomes to estimate from")
    if counts_in.min() < 0 or counts_in.max() > 2:
        raise ValueError("outcomes must be bright-ion counts in {0, 1, 2}")
    counts = np.bincount(counts_in, minlength=3)
    n = counts_in.size
    p = counts / n
    p = p / p.sum()
    errors = tuple(float(math.sqrt(x * (1 - x) / n)) for x in p)
    return PopulationEstimate(float(p[0]), float(p[1]), float(p[2]), n, errors)


def parity(est: PopulationEstimate) -> tuple:
    """(p0 + p2 - p1, standard error); the error is that of 1 - 2 p1."""
    value = est.p0 + est.p2 - est.p1
    error = 2 * math.sqrt(est.p1 * (1 - est.p1) / est.shots) if est.shots else 0.0
    return value, error


def state_populations(state: SystemState) -> PopulationEstimate:
    return PopulationEstimate.exact(state.bright_populations())


@dataclass(frozen=True)
class WeightedStates:
    """Incoherent mixture of pure states, e.g. a thermal ensemble."""

    states: tuple
    weights: tuple

    def __post_init__(self):
        if len(self.states) != len(self.weights) or not self.states:
            raise ValueError("need one weight per state")


@dataclass(frozen=True)
class ParityScan:
    phis: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    shots: int = 0

    @property
    def points(self) -> list:
        return list(zip(self.phis.tolist(), self.values.tolist(), self.std_errors.tolist()))


def default_phis(count: int = DEFAULT_SCAN_POINTS) -> np.ndarray:
    """Equally spaced analysis phases on [0, pi)."""
    return np.arange(count) * np.pi / count


def _mixture_parity(source, phi: float) -> float:
    if isinstance(source, SystemState):
        source = WeightedStates((source,), (1.0,))
    total = 0.0
    for state, weight in zip(source.states, source.weights):
        p = carrier_pulse(state, math.pi / 2, phi).bright_populations()
        total += weight * (p[0] + p[2] - p[1])
    return total / sum(source.weights)


def scan_parity(source: Union[SystemState, WeightedStates, Callable], phis: Sequence[float],
                shots: Optional[Union[int, Sequence[int]]] = None) -> ParityScan:
    """Parity after a (pi/2)_phi analysis pulse for each phase.

    ``source`` is either a state (or weighted mixture), evaluated exactly, or a
    callable ``runner(phi, shots) -> outcomes`` that returns sampled bright-ion
    counts. Sampling order follows ``phis``, so a seeded runner is
    deterministic.
    """
    phis = np.asarray(phis, dtype=float)
    if phis.size == 0:
        raise ValueError("phis must be nonempty")
    if not callable(source):
        values = np.array([_mixture_parity(source, phi) for phi in phis])
        return ParityScan(phis, values, np.zeros_like(values), 0)
    if shots is None:
        raise ValueError("a sampling runner needs a shot count")
    per_point = np.broadcast_to(np.asarray(shots, dtype=int), phis.shape)
    if per_point.min() < 1:
        raise ValueError("shots per point must be >= 1")
    values, errors = [], []
    for phi, n in zip(phis, per_point):
        value, error = parity(estimate_populations(source(float(phi), int(n))))
        values.append(value)
        errors.append(error)
    return ParityScan(phis, np.array(values), np.array(errors), int(per_point.sum()))


def split_shots(total: int, points: int) -> list:
    """Distribute ``total`` shots over ``points`` as evenly as possible."""
    if points < 1:
        raise ValueError("need at least one point")
    base, extra = divmod(int(total), points)
    return [base + (1 if i < extra else 0) for i in range(points)]


@dataclass(frozen=True)
class FitResult:
    """Fitted parameters with 1-sigma uncertainties."""

    model: str
    params: dict
    errors: dict
    residual_norm: float
    flags: tuple = field(default=())

    def __getitem__(self, key):
        return self.params[key]


def fit_sinusoid(scan: ParityScan) -> FitResult:
    """Fit ``P(phi) = A sin(2 phi + phi0)`` by weighted linear least squares.

    The model equals ``a sin(2 phi) + b cos(2 phi)`` with ``a = A cos(phi0)``
    and ``b = A sin(phi0)``, so the fit is exact. Points with zero error use a
    floor (one over the shot count) as weight; a scan without any errors is
    fitted unweighted with the covariance scaled by the residual variance.
    """
    phis = np.asarray(scan.phis, dtype=float)
    y = np.asarray(scan.values, dtype=float)
    if phis.size < 2:
        raise FitDegeneracyError("need at least two phases")
    design = np.stack([np.sin(2 * phis), np.cos(2 * phis)], axis=1)
    if np.linalg.matrix_rank(design, tol=1e-9) < 2:
        raise FitDegeneracyError("all phases coincide modulo pi")
    errors = np.asarray(scan.std_errors, dtype=float)
    weighted = bool(np.any(errors > 0))
    if weighted:
        floor = 1.0 / max(scan.shots, 1) if scan.shots else float(np.min(errors[errors > 0]))
        sigma = np.where(errors > 0, errors, floor)
    else:
        sigma = np.ones_like(y)
    a_mat = design / sigma[:, None]
    coef, *_ = np.linalg.lstsq(a_mat, y / sigma, rcond=None)
    resid = y - design @ coef
    cov = np.linalg.inv(a_mat.T @ a_mat)
    if not weighted:
        dof = max(len(y) - 2, 1)
        cov = cov * float(resid @ resid) / dof
    a, b = coef
    amplitude = math.hypot(a, b)
    phase = math.atan2(b, a)
    if amplitude > 0:
        grad_a = np.array([a, b]) / amplitude
        grad_p = np.array([-b, a]) / amplitude ** 2
        amp_err = math.sqrt(max(grad_a @ cov @ grad_a, 0.0))
        phase_err = math.sqrt(max(grad_p @ cov @ grad_p, 0.0))
    else:
        amp_err = math.sqrt(max(np.trace(cov) / 2, 0.0))
        phase_err = math.inf
    return FitResult("sinusoid", {"A": amplitude, "phi0": phase},
                     {"A": amp_err, "phi0": phase_err}, float(np.linalg.norm(resid)))


def bell_fidelity(pops: PopulationEstimate, amplitude: float, amplitude_error: float = 0.0) -> tuple:
    """(F, std_error) with F = (p0 + p2) / 2 + A / 2.

    Identifies Im rho_DD,SS with A / 2, i.e. assumes the coherence phase is
    rotated onto the target Bell state.
    """
    if not 0 <= amplitude <= 1 + 1e-9:
        raise ValueError("parity amplitude must be in [0, 1]")
    fidelity = 0.5 * pops.even + 0.5 * amplitude
    error = 0.5 * math.hypot(pops.even_error, amplitude_error)
    return fidelity, error


def coherence_amplitude(state: Union[SystemState, WeightedStates]) -> float:
    """Exact 2 |rho_DD,SS| of the qubit reduced state."""
    if isinstance(state, SystemState):
        state = WeightedStates((state,), (1.0,))
    total = sum(w * s.qubit_density_matrix()[3, 0] for s, w in zip(state.states, state.weights))
    return float(2 * abs(total / sum(state.weights)))


def _gaussian(m, a0, m0):
    return a0 * np.exp(-(m / m0) ** 2)


def _exponential(m, a0, m0):
    return a0 * np.exp(-m / m0)


def _decay_fit(model: str, func, m, y, sigma) -> FitResult:
    m = np.asarray(m, dtype=float)
    y = np.asarray(y, dtype=float)
    if m.size < 3:
        raise ValueError("need at least three points")
    if np.any(m < 0):
        raise ValueError("gate counts must be >= 0")
    if np.unique(m).size < 2:
        raise FitDegeneracyError("all gate counts identical")
    a0_guess = float(y[np.argmin(m)])
    positive = y > 0
    # initial decay scale from a log-linear fit; non-decaying data is flagged
    slope = 0.0
    if positive.sum() >= 2 and a0_guess > 0:
        x = m[positive] ** 2 if model == "gaussian_decay" else m[positive]
        slope = np.polyfit(x, np.log(y[positive]), 1)[0]
    if not slope < -1e-12:
        mean = float(np.mean(y))
        return FitResult(model, {"A0": mean, "m0": math.inf}, {"A0": float(np.std(y)), "m0": math.inf},
                         float(np.linalg.norm(y - mean)), ("non_decaying",))
    m0_guess = 1 / math.sqrt(-slope) if model == "gaussian_decay" else -1 / slope
    popt, pcov = curve_fit(func, m, y, p0=[a0_guess, m0_guess], sigma=sigma,
                           absolute_sigma=sigma is not None, maxfev=20000)
    perr = np.sqrt(np.clip(np.diag(pcov), 0, None))
    resid = y - func(m, *popt)
    flags = ()
    if abs(popt[1]) > 1e6 * max(m.max(), 1):
        flags = ("non_decaying",)
    return FitResult(model, {"A0": float(popt[0]), "m0": float(abs(popt[1]))},
                     {"A0": float(perr[0]), "m0": float(perr[1])}, float(np.linalg.norm(resid)), flags)


def fit_gaussian_decay(m, values, sigma=None) -> FitResult:
    """Least-squares fit of ``A(m) = A0 exp(-(m / m0)^2)``."""
    return _decay_fit("gaussian_decay", _gaussian, m, values, sigma)


def fit_exponential_decay(m, values, sigma=None) -> FitResult:
    """Least-squares fit of ``A(m) = A0 exp(-m / m0)``."""
    return _decay_fit("exponential_decay", _exponential, m, values, sigma)


def fit_linear(x, y, sigma=None) -> FitResult:
    """Least-squares line ``y = intercept + slope * x``.

    With ``sigma`` the fit is weighted and the covariance uses the given
    errors; otherwise it is scaled by the residual variance. Two points give
    an exact interpolation with infinite uncertainty.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.unique(x).size < 2:
        raise FitDegeneracyError("need at least two distinct abscissae")
    w = np.ones_like(y) if sigma is None else 1 / np.asarray(sigma, dtype=float)
    design = np.stack([np.ones_like(x), x], axis=1)
    a_mat = design * w[:, None]
    coef, *_ = np.linalg.lstsq(a_mat, y * w, rcond=None)
    resid = y - design @ coef
    cov = np.linalg.inv(a_mat.T @ a_mat)
    dof = x.size - 2
    if sigma is None:
        cov = cov * (float(resid @ resid) / dof if dof > 0 else math.inf)
    errs = np.sqrt(np.clip(np.diag(cov), 0, None)) if np.all(np.isfinite(cov)) else np.array([math.inf, math.inf])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return FitResult("linear", {"intercept": float(coef[0]), "slope": float(coef[1]), "r_squared": r_squared},
                     {"intercept": float(errs[0]), "slope": float(errs[1])}, float(np.linalg.norm(resid)))
