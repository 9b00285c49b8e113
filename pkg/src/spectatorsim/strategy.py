"""Expected memory fidelity over geometric entanglement-success statistics.

When each entanglement attempt succeeds with probability p, success lands
at attempt N with geometric mass (1-p)^(N-1) p.  Weighting a fidelity-
versus-attempt curve by that distribution gives the expected fidelity
Fbar(p); comparing Fbar across spectator counts K tells how many
spectators to use for a given p.  Curves are evaluated at every integer
via their fitted model (the SPAM-scaled single-spectator form), and the
geometric tail beyond the truncation point is assigned the model
asymptote rather than dropped.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .analytic import xy_fit_model


class CoverageError(ValueError):
    """The curve cannot be evaluated over enough of the geometric support."""


@dataclass(frozen=True)
class FidelityCurve:
    """Fidelity vs attempt number, with an optional model for interpolation.

    ``points`` is a tuple of (n_rea, fidelity, stderr) with strictly
    increasing integer n_rea; ``model`` maps an array of attempt numbers
    to fidelities and also provides the tail ``asymptote``.
    """

    points: tuple[tuple[int, float, float], ...] = ()
    source: str = "analytic"
    model: Callable[[np.ndarray], np.ndarray] | None = None
    asymptote: float = 0.5

    def __post_init__(self):
        ns = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_rea values must be strictly increasing")
        if any(not 0.0 <= p[1] <= 1.0 for p in self.points):
            raise ValueError("fidelities must lie in [0, 1]")
        if self.source not in ("analytic", "simulated", "external"):
            raise ValueError(f"unknown curve source {self.source!r}")

    def values_at(self, n: np.ndarray) -> np.ndarray:
        """Fidelity at integer attempt numbers: points first, model gaps."""
        n = np.asarray(n)
        out = np.full(n.shape, np.nan)
        if self.points:
            ns = [p[0] for p in self.points]
            fs = [p[1] for p in self.points]
            for i, nn in enumerate(n.flat):
                j = bisect_left(ns, nn)
                if j < len(ns) and ns[j] == nn:
                    out.flat[i] = fs[j]
        missing = np.isnan(out)
        if np.any(missing):
            if self.model is None:
                raise CoverageError(
                    "curve has gaps in the geometric support and no model to fill them")
            out[missing] = np.asarray(self.model(n[missing]), dtype=float)
        return out


def curve_from_fit(a_par_te: float, a_spam: float, g: float,
                   source: str = "analytic") -> FidelityCurve:
    """Curve backed by the SPAM-scaled one-spectator fidelity model."""

    def model(n):
        return xy_fit_model(n, a_par_te, a_spam, g)

    asymptote = float(xy_fit_model(np.array([10.0 / a_par_te ** 2]),
                                   a_par_te, a_spam, g)[0])
    return FidelityCurve(points=(), source=source, model=model, asymptote=asymptote)


def success_pmf(p: float, n: int) -> float:
    """Geometric mass (1-p)^(n-1) p of first success at attempt n >= 1."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    return (1.0 - p) ** (n - 1) * p


def expected_fidelity(curve: FidelityCurve, p: float, tail_eps: float = 1e-9) -> float:
    """Fbar(p) = sum_n F(n) (1-p)^(n-1) p, tail mass at the model asymptote."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if not 0.0 < tail_eps < 1.0:
        raise ValueError("tail_eps must lie in (0, 1)")
    if p == 1.0:
        return float(curve.values_at(np.array([1]))[0])
    n_cut = max(1, math.ceil(math.log(tail_eps) / math.log(1.0 - p)))
    n = np.arange(1, n_cut + 1)
    f = curve.values_at(n)
    pmf = (1.0 - p) ** (n - 1) * p
    tail_mass = (1.0 - p) ** n_cut
    return float(np.sum(f * pmf) + curve.asymptote * tail_mass)


@dataclass(frozen=True)
class StrategyReport:
    p_grid: tuple[float, ...]
    fbar_by_k: dict[int, tuple[float, ...]]
    best_k: tuple[int, ...]
    crossovers: tuple[tuple[float, int, int], ...]


def _bisect_crossover(fa: Callable[[float], float], fb: Callable[[float], float],
                      lo: float, hi: float, tol: float = 1e-4) -> float:
    d_lo = fa(lo) - fb(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if (fa(mid) - fb(mid)) * d_lo > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def strategy_sweep(curves: Mapping[int, FidelityCurve], p_grid: Sequence[float],
                   tail_eps: float = 1e-9) -> StrategyReport:
    """Fbar per (K, p), the best K at each p, and pairwise crossover points.

    Ties resolve to the smaller K; crossovers are located by bisection of
    the pairwise difference to 1e-4 in p.
    """
    if not curves:
        raise ValueError("need at least one curve")
    ks = sorted(curves)
    p_grid = [float(p) for p in p_grid]
    fbar = {k: tuple(expected_fidelity(curves[k], p, tail_eps) for p in p_grid)
            for k in ks}
    best = []
    for i in range(len(p_grid)):
        vals = [(fbar[k][i], -k) for k in ks]
        best.append(-max(vals)[1])

    crossings = []
    for a_i, ka in enumerate(ks):
        for kb in ks[a_i + 1:]:
            fa = lambda p, k=ka: expected_fidelity(curves[k], p, tail_eps)
            fb = lambda p, k=kb: expected_fidelity(curves[k], p, tail_eps)
            diffs = [fbar[ka][i] - fbar[kb][i] for i in range(len(p_grid))]
            for i in range(len(p_grid) - 1):
                if diffs[i] == 0.0 or diffs[i] * diffs[i + 1] >= 0.0:
                    continue
                p_cross = _bisect_crossover(fa, fb, p_grid[i], p_grid[i + 1])
                crossings.append((p_cross, ka, kb))
    crossings.sort()
    return StrategyReport(p_grid=tuple(p_grid), fbar_by_k=fbar,
                          best_k=tuple(best), crossovers=tuple(crossings))


def envelope_model(curves: Mapping[int, FidelityCurve]) -> FidelityCurve:
    """Idealized per-instance strategy: the pointwise max over K at each n.

    Ignores any per-decision overhead; upper-bounds every fixed-K curve.
    """
    members = [curves[k] for k in sorted(curves)]

    def model(n):
        return np.max(np.stack([c.values_at(np.asarray(n)) for c in members]), axis=0)

    return FidelityCurve(points=(), source="analytic", model=model,
                         asymptote=max(c.asymptote for c in members))
