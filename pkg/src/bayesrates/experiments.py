"""Sampling regimes, replication engine, and the bound verifications.

Four regimes share one engine.  Each regime knows how to sample its data,
score every prior atom's log likelihood (with the right conditioning), and
measure its own divergences: plain (K, V, H, h) for iid data, the
projection-weighted starred family under misspecification, per-design-index
averages for regression, and realized-state conditional quantities for the
AR(1) chain.

A replication builds one cumulative log-likelihood-ratio matrix

    cum[j, i] = log pi_j + sum_{k<=i} [loglik_j(Y_k) - ref(Y_k)]

from which everything falls out: logsumexp over atoms is the log evidence
ratio, softmax gives posterior weights, a restricted logsumexp is the
numerator path, and the pre-update weight columns drive the Cesaro
statistics.  Replication r uses generator seed  plan.seed + r,  so records
are reproducible one at a time and aggregation never depends on execution
order.

Lemma-style bound checks refuse to run on uncertified subsets: vertex
separation, a convex-hull triangle certificate, and random-mixture closure
all have to pass first, plus per-vertex ratio certificates under
misspecification.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Sequence

import numpy as np

from .divergences import (
    Grid,
    GridDensity,
    default_grid,
    h_affinity_gap,
    h_star,
    hellinger,
    kl_contrast,
    kleijn_certificate,
    markov_divergences,
    mixture_density,
    v_divergence,
    v_star,
    kl,
    weighted_hellinger,
    weighted_hellinger_between,
)
from .geometry import (
    ClosureReport,
    ConditionParams,
    RateSchedule,
    SeparationReport,
    ThicknessRecord,
    mixture_closure_report,
    separation_report,
    thickness_profile,
)
from .models import (
    IID,
    MARKOV,
    REGRESSION,
    AtomicPrior,
    FamilyMember,
    MarkovParam,
    MisspecifiedSetup,
    RegressionFunction,
)
from .numerics import logsumexp, softmax

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# reserved id for reference members that are not prior atoms
REF_ID = -1

STAT_KEYS = ("cesaro_kl", "log_evidence", "posterior_mass", "u_mass", "sqrt_l")


class ExperimentError(ValueError):
    """Invalid plan, regime wiring, or verification request."""


class SubsetNotAdmissibleError(ExperimentError):
    """A lemma-check subset failed its certification."""


@dataclass(frozen=True, eq=False)
class MarkovSample:
    """A chain draw: the observed starting state and the n observations."""

    y0: float
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def _gauss_row(x: np.ndarray, mean, sd: float) -> np.ndarray:
    z = (x - np.asarray(mean)) / sd
    return np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))


def _pairwise_h2(delta_sq: np.ndarray) -> np.ndarray:
    """Squared Hellinger between unit-variance normals at squared mean gap."""
    return 2.0 * (1.0 - np.exp(-delta_sq / 8.0))


class _MixLogTable:
    """w -> integral of weight_density * log(w f0 + (1-w) f1), tabulated."""

    def __init__(self, weight: GridDensity, f0: GridDensity, f1: GridDensity,
                 points: int = 2049):
        w = np.linspace(0.0, 1.0, points)
        mix = w[:, None] * f0.values[None, :] + (1.0 - w)[:, None] * f1.values[None, :]
        kern = weight.grid.quad_weights * weight.values
        self.w_grid = w
        self.table = np.log(mix) @ kern

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return np.interp(w, self.w_grid, self.table)


# ---------------------------------------------------------------------------
# regimes


class IidRegime:
    """Independent draws from a fixed density; ratios are taken against it."""

    kind = "iid"
    well_specified = True

    def __init__(self, prior: AtomicPrior, true_density: GridDensity):
        if prior.kind != IID:
            raise ExperimentError(f"iid regime needs density atoms, got {prior.kind!r}")
        self.grid = true_density.grid
        for m in prior.members:
            if m.density.grid != self.grid:
                raise ExperimentError("prior atoms and truth must share one grid")
        self.prior = prior
        self.true_density = true_density
        self.reference = FamilyMember(id=REF_ID, kind=IID, payload=true_density)
        self._cdf = true_density.cdf_values()
        kern = self.grid.quad_weights * true_density.values
        self._entropy_term = float(kern @ true_density.log_values)
        self._kern = kern
        self._member_values = np.stack([m.density.values for m in prior.members])
        self._table: _MixLogTable | None = None

    # -- data

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.interp(rng.random(n), self._cdf, self.grid.x)

    def loglik_matrix(self, data: np.ndarray) -> np.ndarray:
        return np.stack([m.density.log_interp(data) for m in self.prior.members])

    def ref_loglik(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(self.true_density.log_interp(data))

    def quality_flags(self, data) -> tuple[str, ...]:
        return ()

    # -- divergences

    def atom_kv(self, n: int | None = None) -> np.ndarray:
        return np.array(
            [[kl(self.true_density, m.density), v_divergence(self.true_density, m.density)]
             for m in self.prior.members]
        )

    def theta0_mask(self) -> np.ndarray | None:
        return None

    def truth_dist(self, member_id: int, n: int | None = None) -> float:
        m = self.prior.members[self.prior.index_of(member_id)]
        return hellinger(self.true_density, m.density)

    def separation_gaps(self, member_ids: Sequence[int], n: int | None = None) -> np.ndarray:
        return np.array(
            [h_affinity_gap(self.true_density,
                            self.prior.members[self.prior.index_of(i)].density)
             for i in member_ids]
        )

    def pair_dist(self, id_a: int, id_b: int, n: int | None = None) -> float:
        fa = self.prior.members[self.prior.index_of(id_a)].density
        fb = self.prior.members[self.prior.index_of(id_b)].density
        return hellinger(fa, fb)

    def _mixture(self, member_ids: Sequence[int], w: np.ndarray) -> GridDensity:
        comps = [self.prior.members[self.prior.index_of(i)].density for i in member_ids]
        return mixture_density(comps, w)

    def mixture_truth_gap(self, member_ids, w, n: int | None = None) -> float:
        return h_affinity_gap(self.true_density, self._mixture(member_ids, w))

    def closure_violation(self, member_ids, center_id: int, w, n: int | None = None) -> float:
        center = self.prior.members[self.prior.index_of(center_id)].density
        radius = max(
            h_affinity_gap(center, self.prior.members[self.prior.index_of(i)].density)
            for i in member_ids
        )
        return h_affinity_gap(center, self._mixture(member_ids, w)) - radius

    def hull_gap_bound(self, member_ids: Sequence[int], n: int | None = None) -> float:
        """max over centers c of ((H(truth, c) - max_j H(c, f_j))_+)^2 / 2."""
        best = 0.0
        for c in member_ids:
            fc = self.prior.members[self.prior.index_of(c)].density
            d = hellinger(self.true_density, fc)
            rho = max(
                hellinger(fc, self.prior.members[self.prior.index_of(j)].density)
                for j in member_ids
            )
            best = max(best, max(0.0, d - rho) ** 2 / 2.0)
        return best

    # -- Cesaro statistic

    def cesaro_kls(self, data, weights_before: np.ndarray) -> np.ndarray:
        if len(self.prior) == 2:
            if self._table is None:
                self._table = _MixLogTable(
                    self.true_density,
                    self.prior.members[0].density,
                    self.prior.members[1].density,
                )
            vals = self._entropy_term - self._table(weights_before[0])
        else:
            mix = self._member_values.T @ weights_before
            vals = self._entropy_term - np.log(mix).T @ self._kern
        return np.maximum(vals, 0.0)


class MisspecifiedRegime:
    """Truth outside the family; everything is measured against the projection."""

    kind = "misspecified"
    well_specified = False

    def __init__(self, setup: MisspecifiedSetup):
        self.setup = setup
        self.prior = setup.prior
        self.true_density = setup.true_density
        proj = setup.prior.members[setup.prior.index_of(setup.projection_id)]
        self.projection = proj
        self.f_circ = proj.density
        self.grid = self.true_density.grid
        for m in self.prior.members:
            if m.density.grid != self.grid:
                raise ExperimentError("prior atoms and truth must share one grid")
        self.reference = proj
        self._cdf = self.true_density.cdf_values()
        kern = self.grid.quad_weights * self.true_density.values
        self._contrast_term = float(kern @ self.f_circ.log_values)
        self._kern = kern
        self._member_values = np.stack([m.density.values for m in self.prior.members])
        self._table: _MixLogTable | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.interp(rng.random(n), self._cdf, self.grid.x)

    def loglik_matrix(self, data: np.ndarray) -> np.ndarray:
        return np.stack([m.density.log_interp(data) for m in self.prior.members])

    def ref_loglik(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(self.f_circ.log_interp(data))

    def quality_flags(self, data) -> tuple[str, ...]:
        return ()

    def atom_kv(self, n: int | None = None) -> np.ndarray:
        rows = []
        for m in self.prior.members:
            k = kl_contrast(self.f_circ, m.density, self.true_density)
            rows.append([max(0.0, k), v_star(self.f_circ, m.density, self.true_density)])
        return np.array(rows)

    def theta0_mask(self) -> np.ndarray | None:
        return None

    def truth_dist(self, member_id: int, n: int | None = None) -> float:
        m = self.prior.members[self.prior.index_of(member_id)]
        return weighted_hellinger(self.f_circ, m.density, self.true_density)

    def separation_gaps(self, member_ids, n: int | None = None) -> np.ndarray:
        return np.array(
            [h_star(self.f_circ,
                    self.prior.members[self.prior.index_of(i)].density,
                    self.true_density)
             for i in member_ids]
        )

    def pair_dist(self, id_a: int, id_b: int, n: int | None = None) -> float:
        fa = self.prior.members[self.prior.index_of(id_a)].density
        fb = self.prior.members[self.prior.index_of(id_b)].density
        return weighted_hellinger_between(
            fa, fb, f_star=self.true_density, f_circ=self.f_circ
        )

    def vertex_certificates(self, member_ids) -> np.ndarray:
        """Ratio certificates: each vertex needs int (f/f_circ) f_star <= 1."""
        return np.array(
            [kleijn_certificate(self.f_circ,
                                self.prior.members[self.prior.index_of(i)].density,
                                self.true_density)
             for i in member_ids]
        )

    def _mixture(self, member_ids, w) -> GridDensity:
        comps = [self.prior.members[self.prior.index_of(i)].density for i in member_ids]
        return mixture_density(comps, w)

    def mixture_truth_gap(self, member_ids, w, n: int | None = None) -> float:
        return h_star(self.f_circ, self._mixture(member_ids, w), self.true_density)

    def closure_violation(self, member_ids, center_id, w, n: int | None = None) -> float:
        center = self.prior.members[self.prior.index_of(center_id)].density
        dist = partial(
            weighted_hellinger_between, f_star=self.true_density, f_circ=self.f_circ
        )
        radius = max(
            dist(center, self.prior.members[self.prior.index_of(i)].density)
            for i in member_ids
        )
        return dist(center, self._mixture(member_ids, w)) - radius

    def hull_gap_bound(self, member_ids, n: int | None = None) -> float:
        """Weighted-Hellinger triangle bound on the hull's affinity gap.

        Valid because the squared weighted distance is convex in mixtures and
        the half-square lower-bounds the starred gap whenever the vertex
        ratio certificates hold; callers check those separately.
        """
        dist = partial(
            weighted_hellinger_between, f_star=self.true_density, f_circ=self.f_circ
        )
        best = 0.0
        for c in member_ids:
            fc = self.prior.members[self.prior.index_of(c)].density
            d = dist(self.f_circ, fc)
            rho = max(
                dist(fc, self.prior.members[self.prior.index_of(j)].density)
                for j in member_ids
            )
            best = max(best, max(0.0, d - rho) ** 2 / 2.0)
        return best

    def cesaro_kls(self, data, weights_before: np.ndarray) -> np.ndarray:
        """Contrast statistic: int log(f_circ / predictive) f_star."""
        if len(self.prior) == 2:
            if self._table is None:
                self._table = _MixLogTable(
                    self.true_density,
                    self.prior.members[0].density,
                    self.prior.members[1].density,
                )
            return self._contrast_term - self._table(weights_before[0])
        mix = self._member_values.T @ weights_before
        return self._contrast_term - np.log(mix).T @ self._kern


class RegressionRegime:
    """Gaussian responses around a design-indexed mean function."""

    kind = "regression"
    well_specified = True

    def __init__(self, prior: AtomicPrior, truth: RegressionFunction,
                 grid: Grid | None = None):
        if prior.kind != REGRESSION:
            raise ExperimentError(
                f"regression regime needs function atoms, got {prior.kind!r}"
            )
        length = len(truth)
        for m in prior.members:
            if len(m.payload) != length:
                raise ExperimentError(
                    f"member {m.id} has {len(m.payload)} design values, truth has {length}"
                )
        self.prior = prior
        self.truth = truth
        self.grid = grid if grid is not None else default_grid()
        self.reference = FamilyMember(id=REF_ID, kind=REGRESSION, payload=truth)
        self._means = np.stack([np.asarray(m.payload.values_at_design) for m in prior.members])
        self._truth_means = np.asarray(truth.values_at_design)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n > len(self.truth):
            raise ExperimentError(f"design has {len(self.truth)} points, asked for {n}")
        return self._truth_means[:n] + rng.standard_normal(n)

    def loglik_matrix(self, data: np.ndarray) -> np.ndarray:
        n = len(data)
        z = data[None, :] - self._means[:, :n]
        return -0.5 * z * z - LOG_SQRT_2PI

    def ref_loglik(self, data: np.ndarray) -> np.ndarray:
        z = data - self._truth_means[: len(data)]
        return -0.5 * z * z - LOG_SQRT_2PI

    def quality_flags(self, data) -> tuple[str, ...]:
        return ()

    def _gaps_sq(self, means_a: np.ndarray, means_b: np.ndarray, n: int) -> np.ndarray:
        return (means_a[:n] - means_b[:n]) ** 2

    def atom_kv(self, n: int) -> np.ndarray:
        d2 = (self._means[:, :n] - self._truth_means[None, :n]) ** 2
        k = d2.mean(axis=1) / 2.0
        v = (d2 + d2 * d2 / 4.0).mean(axis=1)
        return np.stack([k, v], axis=1)

    def theta0_mask(self) -> np.ndarray | None:
        return None

    def _row(self, member_id: int) -> np.ndarray:
        return self._means[self.prior.index_of(member_id)]

    def truth_dist(self, member_id: int, n: int) -> float:
        """Root mean per-index squared Hellinger over the first n indices."""
        h2 = _pairwise_h2(self._gaps_sq(self._row(member_id), self._truth_means, n))
        return math.sqrt(float(h2.mean()))

    def max_truth_dist(self, member_id: int, n: int) -> float:
        h2 = _pairwise_h2(self._gaps_sq(self._row(member_id), self._truth_means, n))
        return math.sqrt(float(h2.max()))

    def separation_gaps(self, member_ids, n: int) -> np.ndarray:
        return np.array([0.5 * self.truth_dist(i, n) ** 2 for i in member_ids])

    def pair_dist(self, id_a: int, id_b: int, n: int) -> float:
        h2 = _pairwise_h2(self._gaps_sq(self._row(id_a), self._row(id_b), n))
        return math.sqrt(float(h2.mean()))

    def _mixture_rows(self, member_ids, w, n: int) -> np.ndarray:
        """Mixture predictive values, one grid row per design index."""
        means = np.stack([self._row(i)[:n] for i in member_ids])  # (J, n)
        rows = _gauss_row(self.grid.x[None, None, :], means[:, :, None], 1.0)
        return np.einsum("j,jng->ng", np.asarray(w), rows)

    def _mean_gap_to(self, ref_means: np.ndarray, member_ids, w, n: int) -> float:
        mix = self._mixture_rows(member_ids, w, n)
        ref = _gauss_row(self.grid.x[None, :], ref_means[:n, None], 1.0)
        affinity = np.sqrt(ref * mix) @ self.grid.quad_weights
        return float(np.mean(1.0 - affinity))

    def mixture_truth_gap(self, member_ids, w, n: int) -> float:
        return self._mean_gap_to(self._truth_means, member_ids, w, n)

    def closure_violation(self, member_ids, center_id, w, n: int) -> float:
        radius = max(
            0.5 * self.pair_dist(center_id, i, n) ** 2 for i in member_ids
        )
        return self._mean_gap_to(self._row(center_id), member_ids, w, n) - radius

    def hull_gap_bound(self, member_ids, n: int) -> float:
        """Per-index triangle bound averaged over the design."""
        best = 0.0
        for c in member_ids:
            hc = np.sqrt(_pairwise_h2(self._gaps_sq(self._truth_means, self._row(c), n)))
            rho = np.zeros(n)
            for j in member_ids:
                hj = np.sqrt(_pairwise_h2(self._gaps_sq(self._row(c), self._row(j), n)))
                rho = np.maximum(rho, hj)
            best = max(best, float(np.mean(np.maximum(0.0, hc - rho) ** 2) / 2.0))
        return best

    def cesaro_kls(self, data, weights_before: np.ndarray) -> np.ndarray:
        n = len(data)
        x = self.grid.x
        qw = self.grid.quad_weights
        out = np.empty(n)
        for i in range(n):
            rows = _gauss_row(x[None, :], self._means[:, i, None], 1.0)
            mix = np.maximum(weights_before[:, i] @ rows, 1e-300)
            truth = _gauss_row(x, self._truth_means[i], 1.0)
            out[i] = float(qw @ (truth * (np.log(np.maximum(truth, 1e-300)) - np.log(mix))))
        return np.maximum(out, 0.0)


class MarkovRegime:
    """Stationary AR(1) chains; likelihoods condition on the realized state."""

    kind = "markov"
    well_specified = True

    def __init__(self, prior: AtomicPrior, theta_star: MarkovParam,
                 grid: Grid | None = None, state_window: float | None = None,
                 theta0_bound: float = 1.0, sweep_points: int = 1001):
        if prior.kind != MARKOV:
            raise ExperimentError(f"markov regime needs chain atoms, got {prior.kind!r}")
        sd = theta_star.noise_sd
        for m in prior.members:
            if m.payload.noise_sd != sd:
                raise ExperimentError("all chain atoms must share the truth's noise sd")
        self.prior = prior
        self.theta_star = theta_star
        self.grid = grid if grid is not None else default_grid()
        self.noise_sd = sd
        self.stationary_sd = theta_star.stationary_sd
        self.state_window = (
            5.0 * self.stationary_sd if state_window is None else float(state_window)
        )
        self.theta0_bound = theta0_bound
        self.sweep_points = sweep_points
        self.reference = FamilyMember(id=REF_ID, kind=MARKOV, payload=theta_star)
        self._thetas = np.array([m.payload.theta for m in prior.members])
        self._md_cache: dict[int, tuple[float, float, float, float]] = {}

    def sample(self, n: int, rng: np.random.Generator) -> MarkovSample:
        y0 = float(self.stationary_sd * rng.standard_normal())
        e = self.noise_sd * rng.standard_normal(n)
        y = np.empty(n)
        prev = y0
        t = self.theta_star.theta
        for i in range(n):
            prev = t * prev + e[i]
            y[i] = prev
        return MarkovSample(y0=y0, y=y)

    def _prev_chain(self, sample: MarkovSample) -> np.ndarray:
        return np.concatenate(([sample.y0], sample.y[:-1]))

    def loglik_matrix(self, sample: MarkovSample) -> np.ndarray:
        prev = self._prev_chain(sample)
        z = (sample.y[None, :] - self._thetas[:, None] * prev[None, :]) / self.noise_sd
        return -0.5 * z * z - math.log(self.noise_sd) - LOG_SQRT_2PI

    def ref_loglik(self, sample: MarkovSample) -> np.ndarray:
        prev = self._prev_chain(sample)
        z = (sample.y - self.theta_star.theta * prev) / self.noise_sd
        return -0.5 * z * z - math.log(self.noise_sd) - LOG_SQRT_2PI

    def quality_flags(self, sample: MarkovSample) -> tuple[str, ...]:
        prev = self._prev_chain(sample)
        reach = float(np.max(np.abs(prev))) * max(
            abs(self.theta_star.theta), float(np.max(np.abs(self._thetas)))
        )
        if reach + 6.0 * self.noise_sd > self.grid.upper:
            return ("transition-tail-clipped",)
        return ()

    def _divergences(self, member_id: int):
        if member_id not in self._md_cache:
            m = self.prior.members[self.prior.index_of(member_id)]
            md = markov_divergences(
                self.theta_star.theta,
                m.payload.theta,
                state_window=self.state_window,
                grid=self.grid,
                noise_sd=self.noise_sd,
                sweep_points=self.sweep_points,
            )
            self._md_cache[member_id] = (md.kl, md.v, md.h_q, md.h_inf_truncated)
        return self._md_cache[member_id]

    def atom_kv(self, n: int | None = None) -> np.ndarray:
        return np.array([self._divergences(m.id)[:2] for m in self.prior.members])

    def theta0_mask(self) -> np.ndarray:
        kv = self.atom_kv()
        return (kv[:, 0] <= self.theta0_bound) & (kv[:, 1] <= self.theta0_bound)

    def truth_dist(self, member_id: int, n: int | None = None) -> float:
        """Stationary-averaged per-state Hellinger distance."""
        return self._divergences(member_id)[2]

    def _sup_h(self, theta_a: float, theta_b: float) -> float:
        y = self.state_window
        d2 = (theta_a - theta_b) ** 2 * y * y / (self.noise_sd**2)
        return math.sqrt(float(_pairwise_h2(np.array(d2))))

    def separation_gaps(self, member_ids, n: int | None = None) -> np.ndarray:
        t = self.theta_star.theta
        return np.array(
            [0.5 * self._sup_h(t, self._theta_of(i)) ** 2 for i in member_ids]
        )

    def _theta_of(self, member_id: int) -> float:
        return float(self._thetas[self.prior.index_of(member_id)])

    def pair_dist(self, id_a: int, id_b: int, n: int | None = None) -> float:
        return self._sup_h(self._theta_of(id_a), self._theta_of(id_b))

    def _h_at_states(self, theta_a: float, theta_b: float, states: np.ndarray) -> np.ndarray:
        d2 = (theta_a - theta_b) ** 2 * states * states / (self.noise_sd**2)
        return np.sqrt(_pairwise_h2(d2))

    def hull_gap_bound(self, member_ids, n: int | None = None) -> float:
        """Sup over window states of the per-state triangle bound.

        A sup-form certificate: it bounds the hull's worst-state gap, not the
        gap at every realized state, so the Monte Carlo check stays the
        authority on the bound itself.
        """
        states = np.linspace(0.0, self.state_window, self.sweep_points)
        t = self.theta_star.theta
        best = 0.0
        for c in member_ids:
            tc = self._theta_of(c)
            d = self._h_at_states(t, tc, states)
            rho = np.zeros_like(states)
            for j in member_ids:
                rho = np.maximum(rho, self._h_at_states(tc, self._theta_of(j), states))
            best = max(best, float(np.max(np.maximum(0.0, d - rho) ** 2) / 2.0))
        return best

    def stationary_hull_gap_bound(self, member_ids) -> float:
        """Triangle bound averaged over the stationary state law (diagnostic)."""
        w = 6.0 * self.stationary_sd
        states = np.linspace(-w, w, self.sweep_points)
        dens = _gauss_row(states, 0.0, self.stationary_sd)
        dens = dens / dens.sum()
        t = self.theta_star.theta
        best = 0.0
        for c in member_ids:
            tc = self._theta_of(c)
            d = self._h_at_states(t, tc, states)
            rho = np.zeros_like(states)
            for j in member_ids:
                rho = np.maximum(rho, self._h_at_states(tc, self._theta_of(j), states))
            best = max(best, float(dens @ (np.maximum(0.0, d - rho) ** 2 / 2.0)))
        return best

    def _probe_states(self, count: int = 7) -> np.ndarray:
        return np.linspace(self.state_window / count, self.state_window, count)

    def _transition_mix(self, member_ids, w, y: float) -> np.ndarray:
        means = np.array([self._theta_of(i) * y for i in member_ids])
        rows = _gauss_row(self.grid.x[None, :], means[:, None], self.noise_sd)
        return np.asarray(w) @ rows

    def mixture_truth_gap(self, member_ids, w, n: int | None = None) -> float:
        """Worst-state affinity gap of the mixture over the probe states."""
        qw = self.grid.quad_weights
        t = self.theta_star.theta
        gaps = []
        for y in self._probe_states():
            truth = _gauss_row(self.grid.x, t * y, self.noise_sd)
            mix = self._transition_mix(member_ids, w, y)
            gaps.append(1.0 - float(qw @ np.sqrt(truth * mix)))
        return max(gaps)

    def _gap_at_state(self, theta_a: float, theta_b: float, y: float) -> float:
        d2 = (theta_a - theta_b) ** 2 * y * y / (self.noise_sd**2)
        return 1.0 - math.exp(-d2 / 8.0)

    def closure_violation(self, member_ids, center_id, w, n: int | None = None) -> float:
        qw = self.grid.quad_weights
        tc = self._theta_of(center_id)
        worst = -math.inf
        for y in self._probe_states():
            center = _gauss_row(self.grid.x, tc * y, self.noise_sd)
            mix = self._transition_mix(member_ids, w, y)
            gap = 1.0 - float(qw @ np.sqrt(center * mix))
            rho = max(
                self._gap_at_state(tc, self._theta_of(j), float(y)) for j in member_ids
            )
            worst = max(worst, gap - rho)
        return worst

    def cesaro_kls(self, sample: MarkovSample, weights_before: np.ndarray) -> np.ndarray:
        prev = self._prev_chain(sample)
        x = self.grid.x
        qw = self.grid.quad_weights
        t = self.theta_star.theta
        out = np.empty(len(prev))
        for i, y in enumerate(prev):
            rows = _gauss_row(x[None, :], self._thetas[:, None] * y, self.noise_sd)
            mix = np.maximum(weights_before[:, i] @ rows, 1e-300)
            truth = _gauss_row(x, t * y, self.noise_sd)
            out[i] = float(qw @ (truth * (np.log(np.maximum(truth, 1e-300)) - np.log(mix))))
        return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# engine


def generate_data(regime, n: int, seed: int):
    """Deterministic draw: same regime, n, and seed give bitwise-equal data."""
    return regime.sample(n, np.random.default_rng(seed))


def cumulative_log_ratio(regime, data) -> np.ndarray:
    """cum[j, i] = log prior_j + sum_{k<=i} (loglik_j - ref) at observation k."""
    ll = regime.loglik_matrix(data)
    ref = regime.ref_loglik(data)
    inc = ll - ref[None, :]
    j, n = inc.shape
    cum = np.empty((j, n + 1))
    cum[:, 0] = np.log(regime.prior.weights)
    cum[:, 1:] = cum[:, 0, None] + np.cumsum(inc, axis=1)
    return cum


@dataclass(frozen=True, eq=False)
class ExperimentPlan:
    regime: object
    schedule: RateSchedule
    replications: int
    seed: int
    collect: tuple[str, ...] = ("log_evidence",)
    subset_ids: tuple[int, ...] | None = None
    b_sets: tuple[tuple[int, ...], ...] | None = None
    u_set: tuple[int, ...] | None = None
    params: ConditionParams | None = None

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ExperimentError(f"need at least one replication, got {self.replications}")
        unknown = set(self.collect) - set(STAT_KEYS)
        if unknown:
            raise ExperimentError(f"unknown statistics {sorted(unknown)}")
        if "sqrt_l" in self.collect and not self.subset_ids:
            raise ExperimentError("sqrt_l needs subset_ids")
        if "posterior_mass" in self.collect:
            if self.b_sets is None or len(self.b_sets) != len(self.schedule.n_values):
                raise ExperimentError("posterior_mass needs one b_set per schedule point")
        if "u_mass" in self.collect and self.u_set is None:
            raise ExperimentError("u_mass needs u_set")


@dataclass(frozen=True, eq=False)
class ReplicationRecord:
    rep_id: int
    n_values: tuple[int, ...]
    stats: dict[str, np.ndarray]
    flags: tuple[str, ...]

    def __post_init__(self) -> None:
        for key, arr in self.stats.items():
            if arr.shape != (len(self.n_values),):
                raise ExperimentError(f"statistic {key} misaligned with schedule")
            if np.any(np.isnan(arr)):
                raise ExperimentError(f"statistic {key} has NaN entries")
        for key in ("posterior_mass", "u_mass"):
            if key in self.stats:
                m = self.stats[key]
                if np.any(m < -1e-12) or np.any(m > 1.0 + 1e-12):
                    raise ExperimentError(f"{key} outside [0, 1]")
        if "sqrt_l" in self.stats and np.any(self.stats["sqrt_l"] < 0.0):
            raise ExperimentError("sqrt_l must be nonnegative")


def _subset_rows(prior: AtomicPrior, member_ids) -> list[int]:
    return [prior.index_of(i) for i in sorted(set(member_ids))]


def replicate(plan: ExperimentPlan, rep_id: int) -> ReplicationRecord:
    """Run one seeded replication and read statistics at the schedule points."""
    regime = plan.regime
    rng = np.random.default_rng(plan.seed + rep_id)
    n_values = plan.schedule.n_values
    n_max = n_values[-1]
    data = regime.sample(n_max, rng)
    cum = cumulative_log_ratio(regime, data)
    idx = np.asarray(n_values)
    stats: dict[str, np.ndarray] = {}

    if "log_evidence" in plan.collect:
        stats["log_evidence"] = logsumexp(cum, axis=0)[idx]
    if "sqrt_l" in plan.collect:
        rows = _subset_rows(regime.prior, plan.subset_ids)
        log_l = logsumexp(cum[rows], axis=0)
        stats["sqrt_l"] = np.exp(0.5 * log_l[idx])
    need_weights = ("posterior_mass" in plan.collect) or ("u_mass" in plan.collect)
    if need_weights:
        weights = softmax(cum, axis=0)
    if "posterior_mass" in plan.collect:
        masses = np.empty(len(n_values))
        for k, (n, ids) in enumerate(zip(n_values, plan.b_sets)):
            rows = _subset_rows(regime.prior, ids) if ids else []
            masses[k] = float(weights[rows, n].sum()) if rows else 0.0
        stats["posterior_mass"] = np.clip(masses, 0.0, 1.0)
    if "u_mass" in plan.collect:
        rows = _subset_rows(regime.prior, plan.u_set) if plan.u_set else []
        vals = weights[rows][:, idx].sum(axis=0) if rows else np.zeros(len(n_values))
        stats["u_mass"] = np.clip(vals, 0.0, 1.0)
    if "cesaro_kl" in plan.collect:
        weights_before = softmax(cum[:, :-1], axis=0)
        kls = regime.cesaro_kls(data, weights_before)
        running = np.cumsum(kls) / np.arange(1, n_max + 1)
        vals = running[idx - 1]
        if regime.well_specified and np.any(vals < -1e-9):
            raise ExperimentError("negative Cesaro statistic in a well-specified run")
        stats["cesaro_kl"] = vals

    return ReplicationRecord(
        rep_id=rep_id,
        n_values=n_values,
        stats=stats,
        flags=tuple(regime.quality_flags(data)),
    )


def run_replications(plan: ExperimentPlan, jobs: int = 1) -> list[ReplicationRecord]:
    """All replications, order-independent: records come back sorted by id."""
    ids = range(plan.replications)
    if jobs <= 1:
        records = [replicate(plan, i) for i in ids]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunk = max(1, plan.replications // (8 * jobs))
            records = list(pool.map(partial(replicate, plan), ids, chunksize=chunk))
    return sorted(records, key=lambda r: r.rep_id)


def stat_matrix(records: Sequence[ReplicationRecord], key: str) -> np.ndarray:
    return np.stack([r.stats[key] for r in records])


def mean_and_se(records, key: str) -> tuple[np.ndarray, np.ndarray]:
    m = stat_matrix(records, key)
    mean = m.mean(axis=0)
    if m.shape[0] < 2:
        return mean, np.zeros(m.shape[1])
    return mean, m.std(axis=0, ddof=1) / math.sqrt(m.shape[0])


def stat_quantile(records, key: str, q: float) -> np.ndarray:
    return np.percentile(stat_matrix(records, key), 100.0 * q, axis=0)


# ---------------------------------------------------------------------------
# thickness wiring


def _single_point(schedule: RateSchedule, n: int) -> RateSchedule:
    return RateSchedule((n,), a=schedule.a, gamma=schedule.gamma, kappa=schedule.kappa)


def thickness_records(regime, schedule: RateSchedule) -> list[ThicknessRecord]:
    """Regime-appropriate thickness profile along the schedule."""
    mask = regime.theta0_mask()
    records = []
    for n in schedule.n_values:
        kv = regime.atom_kv(n)
        rec = thickness_profile(regime.prior, _single_point(schedule, n), kv, mask)[0]
        records.append(rec)
    return records


def fitted_thickness_constant(records: Sequence[ThicknessRecord]) -> float:
    return max(r.implied_c for r in records)


# ---------------------------------------------------------------------------
# subset certification


@dataclass(frozen=True, eq=False)
class SubsetCertificate:
    member_ids: tuple[int, ...]
    n: int
    delta: float
    center_id: int
    vertex: SeparationReport
    hull_gap_bound: float
    closure: ClosureReport
    mixture_min_gap: float
    extras: dict = field(default_factory=dict)


def certify_subset(regime, member_ids, delta: float, n: int,
                   rng: np.random.Generator, draws: int = 200) -> SubsetCertificate:
    """Machine-check the numerator bound's preconditions for one subset.

    Refuses (raises) unless the vertices clear delta, the convex hull clears
    delta by the triangle certificate, random mixtures stay within the best
    ball around the certifying center, and (under misspecification) every
    vertex ratio certificate is at most one.
    """
    ids = tuple(sorted(set(member_ids)))
    if not ids:
        raise SubsetNotAdmissibleError("subset not admissible: empty subset")

    extras: dict = {}
    if hasattr(regime, "vertex_certificates"):
        certs = regime.vertex_certificates(ids)
        extras["max_ratio_certificate"] = float(np.max(certs))
        if np.any(certs > 1.0 + 1e-9):
            raise SubsetNotAdmissibleError(
                f"subset not admissible: ratio certificate "
                f"{float(np.max(certs)):.12g} exceeds 1"
            )

    gaps = regime.separation_gaps(ids, n)
    vertex = separation_report(gaps, delta)
    if not vertex.separated:
        raise SubsetNotAdmissibleError(
            f"subset not admissible: vertex separation failed "
            f"(min gap {vertex.min_gap:.6g} <= delta {delta:.6g})"
        )

    hull = regime.hull_gap_bound(ids, n)
    if hull <= delta:
        raise SubsetNotAdmissibleError(
            f"subset not admissible: convex-hull separation not certified "
            f"(triangle bound {hull:.6g} <= delta {delta:.6g})"
        )
    if hasattr(regime, "stationary_hull_gap_bound"):
        extras["stationary_hull_gap_bound"] = regime.stationary_hull_gap_bound(ids)

    # the center achieving the triangle bound, for the closure ball
    center_id = ids[0]
    if len(ids) > 1:
        per_center = []
        for c in ids:
            per_center.append((_center_bound(regime, ids, c, n), c))
        center_id = max(per_center)[1]

    closure = mixture_closure_report(
        lambda w: regime.closure_violation(ids, center_id, w, n),
        len(ids),
        radius=0.0,
        draws=draws,
        rng=rng,
    )
    if not closure.closed:
        raise SubsetNotAdmissibleError(
            f"subset not admissible: mixture closure failed "
            f"(violation {closure.worst_violation:.6g})"
        )

    if len(ids) == 1:
        mixture_min = float(gaps[0])
    else:
        mixture_min = math.inf
        for _ in range(draws):
            w = rng.dirichlet(np.ones(len(ids)))
            mixture_min = min(mixture_min, regime.mixture_truth_gap(ids, w, n))
        if mixture_min <= delta:
            raise SubsetNotAdmissibleError(
                f"subset not admissible: a random mixture fell to gap "
                f"{mixture_min:.6g} <= delta {delta:.6g}"
            )

    return SubsetCertificate(
        member_ids=ids,
        n=n,
        delta=delta,
        center_id=center_id,
        vertex=vertex,
        hull_gap_bound=hull,
        closure=closure,
        mixture_min_gap=mixture_min,
        extras=extras,
    )


def _center_bound(regime, ids, center, n) -> float:
    """Triangle bound when a specific center certifies the whole subset."""
    d = regime.separation_gaps((center,), n)
    # distances in the metric (not gap) form
    dist_to_truth = math.sqrt(max(0.0, 2.0 * float(d[0])))
    rho = max(regime.pair_dist(center, j, n) for j in ids)
    return max(0.0, dist_to_truth - rho) ** 2 / 2.0


# ---------------------------------------------------------------------------
# verifications


@dataclass(frozen=True, eq=False)
class NumeratorBoundReport:
    n_values: tuple[int, ...]
    empirical_mean: np.ndarray
    std_error: np.ndarray
    bound: np.ndarray
    passed: bool
    certificates: tuple[SubsetCertificate, ...]
    implied_c: float
    d: float
    subset_prior_mass: float


def verify_numerator_bound(plan: ExperimentPlan, jobs: int = 1,
                           closure_draws: int = 200) -> NumeratorBoundReport:
    """Monte Carlo check of mean sqrt(restricted numerator) against its bound."""
    if plan.params is None or plan.params.d is None:
        raise ExperimentError("numerator bound needs params with d set")
    if not plan.subset_ids:
        raise ExperimentError("numerator bound needs subset_ids")
    d = plan.params.d
    schedule = plan.schedule
    implied = fitted_thickness_constant(thickness_records(plan.regime, schedule))
    if not math.isfinite(implied):
        raise SubsetNotAdmissibleError(
            "subset not admissible: prior is not thick at this schedule "
            "(empty divergence neighborhood)"
        )
    if not d > implied + 1.0:
        raise SubsetNotAdmissibleError(
            f"subset not admissible: d = {d} must exceed implied C + 1 = {implied + 1.0:.6g}"
        )

    cert_rng = np.random.default_rng(plan.seed + 202_020)
    certificates = []
    for n in schedule.n_values:
        delta = d * schedule.epsilon(n) ** 2
        certificates.append(
            certify_subset(plan.regime, plan.subset_ids, delta, n, cert_rng,
                           draws=closure_draws)
        )

    records = run_replications(replace(plan, collect=("sqrt_l",)), jobs=jobs)
    mean, se = mean_and_se(records, "sqrt_l")
    mass = plan.regime.prior.mass_of(plan.subset_ids)
    eps = schedule.epsilons
    ns = np.asarray(schedule.n_values)
    bound = math.sqrt(mass) * np.exp(-d * ns * eps * eps)
    passed = bool(np.all(mean <= bound + 3.0 * se))
    return NumeratorBoundReport(
        n_values=schedule.n_values,
        empirical_mean=mean,
        std_error=se,
        bound=bound,
        passed=passed,
        certificates=tuple(certificates),
        implied_c=implied,
        d=d,
        subset_prior_mass=mass,
    )


@dataclass(frozen=True, eq=False)
class EvidenceBoundReport:
    n_values: tuple[int, ...]
    thresholds: np.ndarray
    fractions: np.ndarray
    trend_slope: float
    implied_c: float
    c: float
    thickness_enforced: bool


def verify_evidence_bound(plan: ExperimentPlan, jobs: int = 1,
                          enforce_thickness: bool = True) -> EvidenceBoundReport:
    """Fraction of replications whose evidence falls below exp(-c n eps^2)."""
    if plan.params is None or plan.params.c is None:
        raise ExperimentError("evidence bound needs params with c set")
    c = plan.params.c
    schedule = plan.schedule
    implied = fitted_thickness_constant(thickness_records(plan.regime, schedule))
    if enforce_thickness and not c > implied + 1.0:
        raise ExperimentError(
            f"evidence bound needs c > implied C + 1 = {implied + 1.0:.6g}; "
            "pass enforce_thickness=False for a diagnostic run"
        )
    records = run_replications(replace(plan, collect=("log_evidence",)), jobs=jobs)
    ns = np.asarray(schedule.n_values, dtype=float)
    eps = schedule.epsilons
    thresholds = -c * ns * eps * eps
    log_i = stat_matrix(records, "log_evidence")
    fractions = (log_i <= thresholds[None, :]).mean(axis=0)
    slope = 0.0
    if len(ns) >= 2:
        slope = float(np.polyfit(ns, fractions, 1)[0])
    return EvidenceBoundReport(
        n_values=schedule.n_values,
        thresholds=thresholds,
        fractions=fractions,
        trend_slope=slope,
        implied_c=implied,
        c=c,
        thickness_enforced=enforce_thickness,
    )


@dataclass(frozen=True, eq=False)
class ConcentrationReport:
    n_values: tuple[int, ...]
    multiplier: float
    b_sets: tuple[tuple[int, ...], ...]
    medians: np.ndarray
    upper_quartiles: np.ndarray
    u_medians: np.ndarray | None


def concentration_sets(regime, schedule: RateSchedule, multiplier: float):
    """B_n per schedule point: atoms with truth distance above M * eps_n."""
    sets = []
    for n in schedule.n_values:
        cut = multiplier * schedule.epsilon(n)
        sets.append(
            tuple(m.id for m in regime.prior.members if regime.truth_dist(m.id, n) > cut)
        )
    return tuple(sets)


def posterior_mass_path(plan: ExperimentPlan, multiplier: float,
                        jobs: int = 1) -> ConcentrationReport:
    """Median posterior mass of the far set B_n along the schedule."""
    b_sets = concentration_sets(plan.regime, plan.schedule, multiplier)
    collect = ("posterior_mass",) + (("u_mass",) if plan.u_set is not None else ())
    records = run_replications(
        replace(plan, collect=collect, b_sets=b_sets), jobs=jobs
    )
    medians = stat_quantile(records, "posterior_mass", 0.5)
    uq = stat_quantile(records, "posterior_mass", 0.75)
    u_med = stat_quantile(records, "u_mass", 0.5) if plan.u_set is not None else None
    return ConcentrationReport(
        n_values=plan.schedule.n_values,
        multiplier=multiplier,
        b_sets=b_sets,
        medians=medians,
        upper_quartiles=uq,
        u_medians=u_med,
    )


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    fitted_constant: float
    n_used: tuple[int, ...]
    excluded: tuple[int, ...]


def fit_rate(n_values: Sequence[int], stats: Sequence[float],
             epsilons: Sequence[float] | None = None) -> RateFit:
    """Least-squares slope of log statistic on log n, plus the envelope constant."""
    ns = np.asarray(n_values, dtype=float)
    vals = np.asarray(stats, dtype=float)
    if ns.shape != vals.shape:
        raise ExperimentError("n_values and stats must align")
    keep = vals > 0.0
    excluded = tuple(int(n) for n in ns[~keep])
    if keep.sum() < 3:
        raise ExperimentError(
            f"rate fit needs at least 3 positive points, got {int(keep.sum())}"
        )
    x = np.log(ns[keep])
    y = np.log(vals[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    fitted_constant = math.nan
    if epsilons is not None:
        eps = np.asarray(epsilons, dtype=float)
        if eps.shape != ns.shape:
            raise ExperimentError("epsilons must align with n_values")
        fitted_constant = float(np.max(vals[keep] / eps[keep] ** 2))
    return RateFit(
        slope=float(slope),
        intercept=float(intercept),
        r_squared=float(min(max(r_squared, 0.0), 1.0)),
        fitted_constant=fitted_constant,
        n_used=tuple(int(n) for n in ns[keep]),
        excluded=excluded,
    )
