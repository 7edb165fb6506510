"""Desk-scale laboratory for sequential Bayesian prediction and contraction rates.

Modules:
    divergences  grids, grid densities, divergence functionals
    models       model families, priors, projections, likelihoods
    inference    sequential posteriors, predictives, restricted numerator paths
    geometry     rate schedules, thickness, separation, coverings, sieves
    experiments  data generation, Monte Carlo verification runs, rate fits
    cli          configuration parsing and the command-line driver
"""

__version__ = "0.1.0"
