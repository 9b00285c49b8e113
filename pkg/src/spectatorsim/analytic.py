"""Closed-form single-spectator model and least-squares fitting.

After N entanglement attempts the memory-qubit phase is Gaussian with
standard deviation sigma = sqrt(N) * a_par_te, where a_par_te is the
effective per-attempt phase step (the product of the parallel hyperfine
coupling and the per-attempt wait, treated as a single dimensionless
parameter).  Measuring one spectator with hyperfine ratio g in the basis
perpendicular to its predicted Bloch vector and compensating per outcome
restores the syndrome-averaged best-axis fidelity to

    F(g, sigma) = 1/2 + 1/2 * sqrt(exp(-sigma^2)
                                   + sinh(g sigma^2)^2 exp(-(g^2+1) sigma^2)),

which reduces to 1/2 + 1/2 exp(-sigma^2/2) for g = 0 and saturates at 3/4
for g = 1 as sigma -> inf.  SPAM-augmented fit functions scale the
coherent part by (1 - A_SPAM); Z-basis data decays exponentially toward
1/2.

Units: hyperfine couplings are configured in kHz (ordinary frequencies)
and waits in seconds; phases are 2*pi*f*t.  This module is the single
conversion site for the rephasing-time formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

_EXP_CLIP = 700.0  # exp() overflow guard; arctan of the result is saturated anyway


@dataclass(frozen=True)
class DephasingModel:
    """Effective per-attempt phase step and spectator hyperfine ratio."""

    a_par_te: float
    g: float = 0.0

    def __post_init__(self):
        if not self.a_par_te > 0.0:
            raise ValueError("a_par_te must be positive")


@dataclass(frozen=True)
class SpamParams:
    """SPAM amplitudes and Z-decay constant used by the fit functions."""

    a_spam: float = 0.0
    a_spam_z: float = 0.0
    n_1e: float = math.inf
    offset_a: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.a_spam <= 1.0 or not 0.0 <= self.a_spam_z <= 1.0:
            raise ValueError("SPAM amplitudes must lie in [0, 1]")
        if not self.n_1e > 0.0:
            raise ValueError("n_1e must be positive")


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    values: np.ndarray
    uncertainties: np.ndarray
    chi_squared: float
    reduced_chi_squared: float
    n_points: int
    converged: bool
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.names) != len(self.values) or len(self.names) != len(self.uncertainties):
            raise ValueError("names, values, uncertainties lengths must match")
        if self.chi_squared < 0.0:
            raise ValueError("chi_squared must be nonnegative")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def uncertainty(self, name: str) -> float:
        return float(self.uncertainties[self.names.index(name)])


def sigma_of_n(model: DephasingModel, n_rea) -> float | np.ndarray:
    """Phase standard deviation after n_rea attempts: sqrt(n) * a_par_te."""
    n = np.asarray(n_rea, dtype=float)
    if np.any(n < 0):
        raise ValueError("n_rea must be nonnegative")
    out = np.sqrt(n) * model.a_par_te
    return float(out) if out.ndim == 0 else out


def mean_phase_after_outcome(model: DephasingModel, sigma, outcome: int = 0):
    """Expected memory phase conditioned on one spectator outcome.

    (-1)^outcome * arctan( exp(-g(g+2) sigma^2 / 2) (exp(2 g sigma^2) - 1) / 2 ),
    evaluated in an overflow-safe split so |g| sigma^2 may be large.
    """
    if outcome not in (0, 1):
        raise ValueError("outcome must be 0 or 1")
    g = model.g
    s2 = np.asarray(sigma, dtype=float) ** 2
    e1 = np.clip(0.5 * g * (2.0 - g) * s2, None, _EXP_CLIP)
    e2 = np.clip(-0.5 * g * (g + 2.0) * s2, None, _EXP_CLIP)
    arg = 0.5 * (np.exp(e1) - np.exp(e2))
    out = (-1) ** outcome * np.arctan(arg)
    return float(out) if out.ndim == 0 else out


def _coherence_boost(g, s2):
    """sinh(g s2)^2 * exp(-(g^2+1) s2), written without overflow."""
    x = np.abs(g) * s2
    return 0.25 * np.exp(-((np.abs(g) - 1.0) ** 2) * s2) * np.expm1(-2.0 * x) ** 2


def fidelity_one_spectator(model: DephasingModel, sigma):
    """Syndrome-averaged best-axis fidelity with one spectator readout."""
    s2 = np.asarray(sigma, dtype=float) ** 2
    if np.any(s2 < 0):
        raise ValueError("sigma must be real")
    boost = _coherence_boost(model.g, s2)
    spectatorless = 0.5 + 0.5 * np.exp(-0.5 * s2)
    general = 0.5 + 0.5 * np.sqrt(np.exp(-s2) + boost)
    out = np.where(boost == 0.0, spectatorless, general)
    return float(out) if out.ndim == 0 else out


def improvement_term(model: DephasingModel, sigma):
    """Spectator gain term 4 sinh(g s2)^2 exp(-(g^2+1) s2) added under the sqrt."""
    s2 = np.asarray(sigma, dtype=float) ** 2
    out = 4.0 * _coherence_boost(model.g, s2)
    return float(out) if out.ndim == 0 else out


def compensation_angle_gaussian(sigma):
    """Optimal outcome-0 feedforward angle for a Gaussian phase distribution.

    arctan(-exp(-sigma^2/2) sinh(sigma^2)); tends to -pi/2 as the state
    dephases completely (the posterior mean saturates at +pi/2).
    """
    s2 = np.asarray(sigma, dtype=float) ** 2
    if np.any(s2 < 0):
        raise ValueError("sigma must be real")
    # exp(-s2/2) sinh(s2) = exp(s2/2) (1 - exp(-2 s2)) / 2
    val = 0.5 * np.exp(np.clip(0.5 * s2, None, _EXP_CLIP)) * (-np.expm1(-2.0 * s2))
    out = np.arctan(-val)
    return float(out) if out.ndim == 0 else out


def optimal_rephasing_time(model: DephasingModel, n_rea, a_par_mem_khz: float):
    """Electron-conditioned wait (seconds) that best rephases the register.

    Twice the outcome-conditioned mean phase, converted to time through the
    memory qubit's parallel coupling: the two spectator branches sit a full
    phase gap apart and the wait must close it.
    """
    if a_par_mem_khz == 0.0:
        raise ValueError("a_par_mem_khz must be nonzero")
    sigma = sigma_of_n(model, n_rea)
    gap = 2.0 * mean_phase_after_outcome(model, sigma, 0)
    out = gap / (2.0 * math.pi * a_par_mem_khz * 1e3)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Weighted least squares (damped Gauss-Newton via scipy's trust-region LM).

def _parse_data(data):
    rows = [tuple(row) for row in data]
    if len(rows) < 3:
        raise ValueError("need at least 3 data points")
    n = np.array([r[0] for r in rows], dtype=float)
    f = np.array([r[1] for r in rows], dtype=float)
    unweighted = any(len(r) < 3 or r[2] is None for r in rows)
    if unweighted:
        err = np.ones_like(f)
    else:
        err = np.array([r[2] for r in rows], dtype=float)
        if np.any(err <= 0):
            raise ValueError("errors must be positive")
    return n, f, err, unweighted


def _run_fit(model_fn, names, x0, bounds, n, f, err, unweighted, max_nfev=2000):
    def residuals(params):
        return (model_fn(n, params) - f) / err

    res = least_squares(residuals, x0, bounds=bounds, max_nfev=max_nfev)
    chi2 = float(np.sum(res.fun ** 2))
    dof = max(len(f) - len(x0), 1)
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    if unweighted:
        cov = cov * chi2 / dof
    sigmas = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    flags = ("unweighted",) if unweighted else ()
    converged = bool(res.success)
    if not converged:
        flags = flags + ("max-iterations",)
    return FitResult(names=tuple(names), values=res.x.copy(), uncertainties=sigmas,
                     chi_squared=chi2, reduced_chi_squared=chi2 / dof,
                     n_points=len(f), converged=converged, flags=flags)


def fit_custom(model_fn, names, x0, bounds, data) -> FitResult:
    """Weighted least squares of an arbitrary model(n, params) against data."""
    n, f, err, unweighted = _parse_data(data)
    return _run_fit(model_fn, names, list(x0), bounds, n, f, err, unweighted)


def xy_fit_model(n, a_par_te, a_spam, g):
    """SPAM-scaled one-spectator fidelity as a function of attempt number."""
    sigma = np.sqrt(np.asarray(n, dtype=float)) * a_par_te
    raw = fidelity_one_spectator(DephasingModel(a_par_te=a_par_te, g=g), sigma)
    return 0.5 + (1.0 - a_spam) * (raw - 0.5)


def fit_fidelity_xy(data, *, g: float = 0.0, vary_g: bool = False,
                    a_spam: float | None = None, x0=None) -> FitResult:
    """Weighted fit of XY-basis fidelity vs attempt number.

    Free parameters: a_par_te, plus A_SPAM when ``a_spam`` is None, plus g
    when ``vary_g``.  Follow the usual convention: g fixed to 0 with no
    spectator, to the spectator's ratio with one, free with two or more.
    """
    n, f, err, unweighted = _parse_data(data)
    names = ["a_par_te"]
    lo, hi = [1e-8], [10.0]
    start = [0.03]
    if a_spam is None:
        names.append("a_spam")
        lo.append(0.0)
        hi.append(1.0)
        start.append(0.05)
    if vary_g:
        names.append("g")
        lo.append(-10.0)
        hi.append(10.0)
        start.append(g if g != 0.0 else 1.0)
    if x0 is not None:
        start = list(x0)
    fixed_spam = 0.0 if a_spam is None else a_spam

    def model_fn(nn, params):
        p = dict(zip(names, params))
        return xy_fit_model(nn, p["a_par_te"], p.get("a_spam", fixed_spam),
                            p.get("g", g))

    return _run_fit(model_fn, names, start, (lo, hi), n, f, err, unweighted)


def z_fit_model(n, a_spam_z, n_1e):
    return (1.0 - a_spam_z) * np.exp(-np.asarray(n, dtype=float) / n_1e) + 0.5


_N1E_BOUND = 1e12


def fit_fidelity_z(data, *, x0=None) -> FitResult:
    """Exponential-decay fit of Z-basis fidelity, offset fixed to 1/2."""
    n, f, err, unweighted = _parse_data(data)
    names = ["a_spam_z", "n_1e"]
    start = list(x0) if x0 is not None else [0.1, max(float(np.max(n)), 1.0)]
    result = _run_fit(lambda nn, p: z_fit_model(nn, p[0], p[1]),
                      names, start, ([0.0, 1e-3], [1.0, _N1E_BOUND]), n, f, err, unweighted)
    if result["n_1e"] > 1e-2 * _N1E_BOUND:
        result = FitResult(names=result.names, values=result.values,
                           uncertainties=result.uncertainties,
                           chi_squared=result.chi_squared,
                           reduced_chi_squared=result.reduced_chi_squared,
                           n_points=result.n_points, converged=result.converged,
                           flags=result.flags + ("unbounded-parameter",))
    return result


def fit_report(result: FitResult, title: str = "fit") -> str:
    """Plain-text report: one parameter per line plus chi-squared."""
    lines = [f"{title}: {'converged' if result.converged else 'NOT CONVERGED'}"]
    for name, value, sig in zip(result.names, result.values, result.uncertainties):
        lines.append(f"  {name:12s} = {value!r} +- {sig!r}")
    lines.append(f"  chi2         = {result.chi_squared!r}")
    lines.append(f"  chi2/dof     = {result.reduced_chi_squared!r}  (n={result.n_points})")
    if result.flags:
        lines.append(f"  flags        = {', '.join(result.flags)}")
    return "\n".join(lines)
