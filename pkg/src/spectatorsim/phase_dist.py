"""Grid-based engine for cyclic-phase probability distributions.

The random phase a memory qubit picks up during repeated entanglement
attempts is a 2*pi-cyclic variable, so all distributions here live on a
uniform periodic grid over [-pi, pi).  The module provides Bayesian updates
from spectator-qubit measurements, circular statistics (sharpness / Holevo
variance), readout-angle and feedforward-angle optimization, and the
posterior produced by the gate-based (measurement-free) spectator scheme.

Conventions
-----------
* A qubit with phase ``phi`` is ``(|0> + exp(i*phi)|1>)/sqrt(2)``, so
  ``<X> = cos(phi)`` and ``<Y> = sin(phi)``.
* ``phi`` always denotes the *memory* qubit phase.  A spectator whose
  parallel hyperfine coupling is ``g`` times the memory's carries phase
  ``g*phi``.
* Measuring a spectator along the XY axis at angle ``theta`` yields
  outcome 0 ("bright") with probability ``(1 + cos(g*phi - theta))/2``.
* Densities are in 1/radian and integrate to 1 under the periodic
  rectangle rule, which is spectrally accurate for smooth periodic
  integrands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

DEFAULT_N_POINTS = 4096

# Below this sharpness the circular mean is numerically meaningless and is
# reported as None so that feedforward consumers cannot use a garbage angle.
SHARPNESS_FLOOR = 1e-12

_MASS_TOL = 1e-9
_IMPOSSIBLE_MASS = 1e-15


class ResourceLimitError(RuntimeError):
    """Exhaustive enumeration would be too large; use Monte-Carlo sampling."""


class ImpossibleOutcomeError(ValueError):
    """A Bayesian update was requested for an outcome of probability ~0."""


@dataclass(frozen=True)
class PhaseGrid:
    """Probability density of a cyclic phase, sampled at n uniform points.

    Point ``j`` sits at ``phi_j = -pi + 2*pi*j/n``.  Construct through
    :func:`make_grid` (or the factory helpers), which normalizes; the raw
    constructor validates only.
    """

    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.ndim != 1 or d.size < 8:
            raise ValueError("density must be a 1-D array with at least 8 points")
        if np.any(d < 0.0):
            raise ValueError("density values must be nonnegative")
        mass = d.sum() * (TWO_PI / d.size)
        if abs(mass - 1.0) > _MASS_TOL:
            raise ValueError(f"density not normalized: mass = {mass!r}")
        object.__setattr__(self, "density", d)

    @property
    def n_points(self) -> int:
        return self.density.size

    @property
    def step(self) -> float:
        return TWO_PI / self.n_points

    @property
    def phis(self) -> np.ndarray:
        n = self.n_points
        return -math.pi + TWO_PI * np.arange(n) / n

    def integrate(self, values: np.ndarray) -> float | complex:
        """Periodic rectangle rule of ``values * density``."""
        return np.sum(values * self.density) * self.step


@dataclass(frozen=True)
class SpectatorMeasurement:
    """One spectator readout: hyperfine ratio g, basis angle, binary outcome."""

    g: float
    basis_angle: float
    outcome: int

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValueError("outcome must be 0 or 1")
        if not math.isfinite(self.basis_angle):
            raise ValueError("basis_angle must be finite")


@dataclass(frozen=True)
class PhaseStats:
    """Circular statistics: sharpness S, Holevo variance S**-2 - 1, mean.

    ``circular_mean`` is None when the distribution is uniform-like
    (sharpness below SHARPNESS_FLOOR).
    """

    sharpness: float
    holevo_variance: float
    circular_mean: float | None


def make_grid(density: np.ndarray) -> PhaseGrid:
    """Clip tiny negative round-off, renormalize, and wrap in a PhaseGrid."""
    d = np.asarray(density, dtype=float)
    d = np.where(d < 0.0, 0.0, d)
    mass = d.sum() * (TWO_PI / d.size)
    if mass < _IMPOSSIBLE_MASS:
        raise ValueError("density has vanishing total mass")
    return PhaseGrid(d / mass)


def uniform_grid(n_points: int = DEFAULT_N_POINTS) -> PhaseGrid:
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    return PhaseGrid(np.full(n_points, 1.0 / TWO_PI))


def gaussian_prior(sigma: float, mean: float = 0.0,
                   n_points: int = DEFAULT_N_POINTS) -> PhaseGrid:
    """Wrapped-normal prior built by summing winding images k in [-5, 5]."""
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    phis = -math.pi + TWO_PI * np.arange(n_points) / n_points
    d = np.zeros(n_points)
    for k in range(-5, 6):
        x = phis - mean + TWO_PI * k
        d += np.exp(-0.5 * (x / sigma) ** 2)
    d /= sigma * math.sqrt(TWO_PI)
    return make_grid(d)


def delta_grid(phi0: float, n_points: int = DEFAULT_N_POINTS) -> PhaseGrid:
    """All mass in the grid cell closest to phi0 (useful for pure states)."""
    n = n_points
    j = int(round((phi0 + math.pi) / (TWO_PI / n))) % n
    d = np.zeros(n)
    d[j] = 1.0
    return make_grid(d)


def phase_stats(grid: PhaseGrid) -> PhaseStats:
    """Sharpness |<exp(i phi)>|, Holevo variance, and circular mean."""
    c1 = grid.integrate(np.exp(1j * grid.phis))
    s = abs(c1)
    if s < SHARPNESS_FLOOR:
        return PhaseStats(sharpness=s, holevo_variance=math.inf, circular_mean=None)
    return PhaseStats(sharpness=s,
                      holevo_variance=s ** -2 - 1.0,
                      circular_mean=math.atan2(c1.imag, c1.real))


def harmonic_moment(grid: PhaseGrid, g: float) -> complex:
    """<exp(i g phi)>: the predicted Bloch vector of a spectator with ratio g."""
    return complex(grid.integrate(np.exp(1j * g * grid.phis)))


def fidelity_along(grid: PhaseGrid, theta: float) -> float:
    """Fidelity of the XY-plane state with the axis at angle theta."""
    return float(grid.integrate(0.5 * (1.0 + np.cos(grid.phis - theta))))


def best_fidelity(grid: PhaseGrid) -> float:
    """max over theta of fidelity_along = 1/2 + 1/2 * sharpness."""
    return 0.5 + 0.5 * phase_stats(grid).sharpness


def outcome_likelihood(grid: PhaseGrid, m: SpectatorMeasurement) -> np.ndarray:
    """P(outcome | phi) on the grid points, in [0, 1]."""
    lik = 0.5 * (1.0 + (-1) ** m.outcome * np.cos(m.g * grid.phis - m.basis_angle))
    return np.clip(lik, 0.0, 1.0)


def bayes_update(prior: PhaseGrid, m: SpectatorMeasurement) -> tuple[PhaseGrid, float]:
    """Posterior after one spectator readout, plus the outcome probability.

    The returned mass is the pre-normalization integral of
    likelihood * prior, i.e. P(outcome); the two outcomes' masses sum to 1.
    """
    unnorm = outcome_likelihood(prior, m) * prior.density
    mass = float(unnorm.sum() * prior.step)
    if mass < _IMPOSSIBLE_MASS:
        raise ImpossibleOutcomeError(
            f"outcome {m.outcome} along theta={m.basis_angle!r} has probability {mass!r}")
    return PhaseGrid(unnorm / mass), mass


def shift_grid(grid: PhaseGrid, delta: float) -> PhaseGrid:
    """Translate the distribution: new P(phi) = old P(phi - delta).

    Shifts by an integer number of grid cells are exact circular rolls;
    otherwise an FFT phase ramp performs spectral interpolation (tiny
    negative ringing is clipped and the result renormalized).
    """
    n = grid.n_points
    cells = delta / grid.step
    j = round(cells)
    if abs(cells - j) < 1e-9:
        return PhaseGrid(np.roll(grid.density, j % n))
    spec = np.fft.rfft(grid.density)
    k = np.arange(spec.size)
    spec *= np.exp(-1j * k * delta)
    return make_grid(np.fft.irfft(spec, n))


def optimal_readout_angle(grid: PhaseGrid, g: float, *, n_coarse: int = 256,
                          tol: float = 1e-6) -> float:
    """Readout angle maximizing the outcome-averaged posterior sharpness.

    Objective: sum over outcomes m of
    | integral exp(i phi) P(phi) (1 + (-1)^m cos(g phi - theta))/2 dphi |,
    where the unnormalized masses absorb the outcome probabilities.
    Coarse 256-angle scan followed by golden-section refinement.  A flat
    objective (e.g. uniform prior) resolves to the canonical +pi/2.
    """
    # cos(g phi - theta) folds into three harmonics of the density, so the
    # objective is O(1) per angle after three moments are precomputed.
    a = harmonic_moment(grid, 1.0)
    cp = harmonic_moment(grid, 1.0 + g)
    cm = harmonic_moment(grid, 1.0 - g)

    def objective(theta):
        cross = 0.25 * (np.exp(-1j * np.asarray(theta)) * cp
                        + np.exp(1j * np.asarray(theta)) * cm)
        return np.abs(0.5 * a + cross) + np.abs(0.5 * a - cross)

    thetas = -math.pi + TWO_PI * np.arange(n_coarse) / n_coarse
    values = objective(thetas)
    spread = float(values.max() - values.min())
    if spread < 1e-12 * max(1.0, float(values.max())):
        return math.pi / 2
    best = int(np.argmax(values))
    lo = thetas[best] - TWO_PI / n_coarse
    hi = thetas[best] + TWO_PI / n_coarse

    inv_gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_gr * (hi - lo)
    d = lo + inv_gr * (hi - lo)
    fc, fd = objective(c), objective(d)
    while hi - lo > tol:
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - inv_gr * (hi - lo)
            fc = objective(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_gr * (hi - lo)
            fd = objective(d)
    theta = 0.5 * (lo + hi)
    return float((theta + math.pi) % TWO_PI - math.pi)


def optimal_compensation(grid: PhaseGrid, theta_m: float, g: float) -> tuple[float, float]:
    """Per-outcome feedforward rotations maximizing the recovered fidelity.

    Rotating by phi_c maps the posterior P(phi) to P(phi - phi_c), whose
    fidelity with the X axis is (1 + S*cos(mu + phi_c))/2; the exact argmax
    is therefore minus the posterior circular mean of each outcome branch.
    """
    angles = []
    for outcome in (0, 1):
        post, _ = bayes_update(grid, SpectatorMeasurement(g, theta_m, outcome))
        mean = phase_stats(post).circular_mean
        angles.append(0.0 if mean is None else -mean)
    return angles[0], angles[1]


def gate_posterior(prior: PhaseGrid, g_k: float, phi_c: float,
                   flip_branch: int = +1) -> PhaseGrid:
    """Phase distribution after the gate-based spectator step.

    A spectator-k-controlled electron flip (control on the -Y spectator
    state for ``flip_branch=+1``, on +Y for ``-1``) followed by an
    electron-conditioned wait shifts one branch of the distribution by
    phi_c.  With s = flip_branch the posterior is

        (1 + s sin(g_k phi))/2 * P(phi)
      + (1 - s sin(g_k (phi - phi_c)))/2 * P(phi - phi_c),

    where each branch weight is evaluated at the branch's original phase,
    so total mass is conserved by construction.
    """
    if flip_branch not in (+1, -1):
        raise ValueError("flip_branch must be +1 (flip on -Y) or -1 (flip on +Y)")
    s = float(flip_branch)
    phis = prior.phis
    stay = 0.5 * (1.0 + s * np.sin(g_k * phis)) * prior.density
    shifted = shift_grid(prior, phi_c).density
    moved = 0.5 * (1.0 - s * np.sin(g_k * (phis - phi_c))) * shifted
    post = np.where(stay + moved < 0.0, 0.0, stay + moved)
    mass = post.sum() * prior.step
    if abs(mass - 1.0) > 1e-9:
        raise RuntimeError(f"gate posterior mass drifted to {mass!r}")
    return PhaseGrid(post / mass)


def policy_angle(grid: PhaseGrid, g: float, policy: str = "perpendicular") -> float:
    """Readout angle for a spectator with ratio g under the named policy.

    "perpendicular" reads orthogonal to the spectator's predicted Bloch
    vector (the experimentally used strategy); "argmax" runs the full
    sharpness optimization.
    """
    if policy == "perpendicular":
        mom = harmonic_moment(grid, g)
        if abs(mom) < SHARPNESS_FLOOR:
            return math.pi / 2
        return math.atan2(mom.imag, mom.real) + math.pi / 2
    if policy == "argmax":
        return optimal_readout_angle(grid, g)
    raise ValueError(f"unknown readout-angle policy {policy!r}")


def syndrome_posteriors(prior: PhaseGrid, g_list, outcomes,
                        policy: str = "perpendicular") -> list[PhaseGrid]:
    """Grids after each measurement of a fixed outcome string (for dumps)."""
    grids = [prior]
    grid = prior
    for g, m in zip(g_list, outcomes):
        theta = policy_angle(grid, g, policy)
        grid, _ = bayes_update(grid, SpectatorMeasurement(g, theta, m))
        grids.append(grid)
    return grids


def syndrome_average(prior: PhaseGrid, g_list,
                     policy: str = "perpendicular") -> tuple[float, float]:
    """Average circular std-dev and best-axis fidelity over all syndromes.

    Enumerates all 2**M outcome strings of M sequential spectator readouts,
    choosing each readout angle from the running posterior via ``policy``
    and weighting each leaf by its outcome-probability product.  Returns
    (mean of sqrt(Holevo variance), mean best-axis fidelity).
    """
    g_list = list(g_list)
    m_count = len(g_list)
    if m_count > 12:
        raise ResourceLimitError(
            f"{m_count} spectators require 2**{m_count} branches; "
            "use Monte-Carlo syndrome sampling instead")

    mean_sigma = 0.0
    f_avg = 0.0
    stack = [(prior, 1.0, 0)]
    while stack:
        grid, weight, depth = stack.pop()
        if depth == m_count:
            stats = phase_stats(grid)
            mean_sigma += weight * math.sqrt(stats.holevo_variance)
            f_avg += weight * (0.5 + 0.5 * stats.sharpness)
            continue
        g = g_list[depth]
        theta = policy_angle(grid, g, policy)
        for outcome in (0, 1):
            try:
                post, mass = bayes_update(grid, SpectatorMeasurement(g, theta, outcome))
            except ImpossibleOutcomeError:
                continue
            stack.append((post, weight * mass, depth + 1))
    return mean_sigma, f_avg
