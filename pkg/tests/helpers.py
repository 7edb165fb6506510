"""Shared construction helpers for the test suite.

The moment-constrained family trick: the kl(f_star, .) minimizer over the
convex family {f : int T f dmu = t0} has the exact tilt form
f_circ = f_star / (lam + eta T), and for every member f of the family

    int (f / f_circ) f_star dmu = lam int f + eta int T f = lam + eta t0 = 1,

so the certificate needed by the starred Hellinger inequality holds by
construction, up to solver and quadrature rounding.
"""
from __future__ import annotations

import numpy as np
from scipy import optimize

from bayesrates.divergences import (
    Grid,
    GridDensity,
    gaussian_density,
    mixture_density,
)


def random_gaussian_mixture(
    rng: np.random.Generator,
    grid: Grid,
    max_components: int = 3,
    mean_range: tuple[float, float] = (-2.0, 2.0),
    sd_range: tuple[float, float] = (0.6, 1.6),
) -> GridDensity:
    k = int(rng.integers(1, max_components + 1))
    comps = [
        gaussian_density(grid, float(rng.uniform(*mean_range)), float(rng.uniform(*sd_range)))
        for _ in range(k)
    ]
    return mixture_density(comps, rng.dirichlet(np.ones(k)))


def moment_constrained_triple(
    rng: np.random.Generator, grid: Grid, max_tries: int = 20
) -> tuple[GridDensity, GridDensity, GridDensity]:
    """Return (f_circ, f, f_star) with f_circ the kl(f_star, .) minimizer over
    a convex moment-constrained family containing f."""
    T = np.tanh(grid.x / 2.0)
    w = grid.quad_weights
    for _ in range(max_tries):
        g1 = random_gaussian_mixture(rng, grid)
        g2 = random_gaussian_mixture(rng, grid)
        alpha = float(rng.uniform(0.2, 0.8))
        m1 = float(w @ (T * g1.values))
        m2 = float(w @ (T * g2.values))
        t0 = alpha * m1 + (1.0 - alpha) * m2
        f = mixture_density([g1, g2], [alpha, 1.0 - alpha])
        f_star = random_gaussian_mixture(rng, grid)
        fs = f_star.values

        def system(p):
            lam, eta = p
            denom = lam + eta * T
            if np.any(denom <= 0.0):
                return np.array([1e6, 1e6])
            r = fs / denom
            return np.array([w @ r - 1.0, w @ (T * r) - t0])

        def jacobian(p):
            lam, eta = p
            denom = lam + eta * T
            r = fs / (denom * denom)
            j11 = w @ r
            j12 = w @ (T * r)
            j22 = w @ (T * T * r)
            return -np.array([[j11, j12], [j12, j22]])

        sol = optimize.root(system, x0=np.array([1.0, 0.0]), jac=jacobian, tol=1e-14)
        lam, eta = sol.x
        denom = lam + eta * T
        if not sol.success or np.any(denom <= 0.0):
            continue
        if np.max(np.abs(system(sol.x))) > 1e-11:
            continue
        f_circ = GridDensity(grid, fs / denom)
        return f_circ, f, f_star
    raise RuntimeError("could not build a moment-constrained triple")
