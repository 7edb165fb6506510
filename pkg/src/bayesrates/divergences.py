"""Grid densities and divergence functionals.

Continuous densities live on a uniform grid and every integral is a
trapezoidal quadrature on that grid.  The default working grid for
unit-scale Gaussian work is [-12, 12] with 4001 points.  Densities are
floored at ``FLOOR`` before use so that logarithms stay finite; any
construction that actually hits the floor sets a tail-truncation quality
flag on the density instead of raising.

Naming convention for the asymmetric functionals: the first density
argument is the one the integral is weighted by, so ``kl(f, g)`` is
``int log(f/g) f dmu``.  The starred variants take an anchor density
``f_circ`` and weight by a third density ``f_star``; they reduce to the
plain variants when ``f_circ == f_star``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

FLOOR = 1e-300
SQRT2 = math.sqrt(2.0)

DEFAULT_LOWER = -12.0
DEFAULT_UPPER = 12.0
DEFAULT_POINTS = 4001


class DivergenceError(ValueError):
    """Base class for grid/divergence input errors."""


class GridMismatchError(DivergenceError):
    """Two densities do not share the same grid."""


class OutsideGridError(DivergenceError):
    """A point or a density's effective support falls outside the grid."""


class NonstationaryError(DivergenceError):
    """An autoregressive coefficient admits no stationary density."""


@dataclass(frozen=True)
class Grid:
    """Uniform quadrature grid on [lower, upper] with ``points`` nodes."""

    lower: float
    upper: float
    points: int

    def __post_init__(self) -> None:
        if not self.upper > self.lower:
            raise DivergenceError(f"grid needs lower < upper, got [{self.lower}, {self.upper}]")
        if self.points < 3:
            raise DivergenceError(f"grid needs at least 3 points, got {self.points}")

    @cached_property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.points - 1)

    @cached_property
    def x(self) -> np.ndarray:
        nodes = np.linspace(self.lower, self.upper, self.points)
        nodes.flags.writeable = False
        return nodes

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Trapezoidal weights: integral(v) == quad_weights @ v."""
        w = np.full(self.points, self.spacing)
        w[0] = 0.5 * self.spacing
        w[-1] = 0.5 * self.spacing
        w.flags.writeable = False
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(self.quad_weights @ values)

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def default_grid() -> Grid:
    return Grid(DEFAULT_LOWER, DEFAULT_UPPER, DEFAULT_POINTS)


class GridDensity:
    """A probability density materialized on a grid.

    Values are floored at ``FLOOR`` and renormalized to unit trapezoidal
    integral at construction.  ``floored`` records whether the floor was
    ever active, which marks every downstream comparison as tail-truncated
    rather than exact.
    """

    __slots__ = ("grid", "values", "floored", "__dict__")

    def __init__(self, grid: Grid, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.points,):
            raise DivergenceError(
                f"density needs {grid.points} values for its grid, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DivergenceError("density values must be finite")
        if np.any(values < 0.0):
            raise DivergenceError("density values must be nonnegative")
        floored = bool(np.any(values < FLOOR))
        values = np.maximum(values, FLOOR)
        total = grid.integrate(values)
        if not total > 0.0 or not np.isfinite(total):
            raise DivergenceError(f"density mass {total} cannot be normalized")
        values = values / total
        # renormalizing can push an already floored tail back under the floor;
        # restoring it perturbs total mass by at most points * FLOOR
        values = np.maximum(values, FLOOR)
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.floored = floored

    @cached_property
    def log_values(self) -> np.ndarray:
        out = np.log(self.values)
        out.flags.writeable = False
        return out

    @cached_property
    def sqrt_values(self) -> np.ndarray:
        out = np.sqrt(self.values)
        out.flags.writeable = False
        return out

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def mean(self) -> float:
        return float(self.grid.quad_weights @ (self.grid.x * self.values))

    def variance(self) -> float:
        m = self.mean()
        return float(self.grid.quad_weights @ ((self.grid.x - m) ** 2 * self.values))

    def log_interp(self, y) -> np.ndarray | float:
        """Log density at arbitrary points by linear interpolation of the log.

        Extrapolation is forbidden: points outside the grid raise.
        """
        arr = np.asarray(y, dtype=float)
        if np.any(arr < self.grid.lower) or np.any(arr > self.grid.upper):
            raise OutsideGridError(
                f"point outside grid [{self.grid.lower}, {self.grid.upper}]"
            )
        out = np.interp(arr, self.grid.x, self.log_values)
        return float(out) if np.isscalar(y) else out

    def cdf_values(self) -> np.ndarray:
        """Cumulative trapezoidal mass at each node, normalized to end at 1."""
        v = self.values
        inc = 0.5 * self.grid.spacing * (v[1:] + v[:-1])
        cdf = np.concatenate([[0.0], np.cumsum(inc)])
        return cdf / cdf[-1]

    def to_text(self) -> str:
        lines = [f"{self.grid.lower:.17g} {self.grid.upper:.17g} {self.grid.points}"]
        lines.extend(format(v, ".17g") for v in self.values)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GridDensity":
        lines = text.strip().splitlines()
        head = lines[0].split()
        grid = Grid(float(head[0]), float(head[1]), int(head[2]))
        values = np.array([float(s) for s in lines[1:]])
        return cls(grid, values)


def gaussian_density(grid: Grid, mean: float, sd: float) -> GridDensity:
    if not sd > 0.0:
        raise DivergenceError(f"sd must be positive, got {sd}")
    z = (grid.x - mean) / sd
    values = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))
    return GridDensity(grid, values)


def mixture_density(components: Sequence[GridDensity], weights: Sequence[float]) -> GridDensity:
    if len(components) != len(weights) or not components:
        raise DivergenceError("mixture needs matching, nonempty components and weights")
    grid = components[0].grid
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0.0):
        raise DivergenceError("mixture weights must be nonnegative")
    values = np.zeros(grid.points)
    for comp, wk in zip(components, w):
        _require_same_grid(components[0], comp)
        values += wk * comp.values
    return GridDensity(grid, values)


def _require_same_grid(f: GridDensity, g: GridDensity) -> None:
    if f.grid != g.grid:
        raise GridMismatchError(f"grids differ: {f.grid} vs {g.grid}")


def tail_truncated(*densities: GridDensity) -> bool:
    """Quality flag: True when any operand had floored (truncated) tails."""
    return any(d.floored for d in densities)


# ---------------------------------------------------------------------------
# pairwise functionals
# ---------------------------------------------------------------------------

def kl(f: GridDensity, g: GridDensity) -> float:
    """int log(f/g) f dmu; the first argument carries the weight."""
    _require_same_grid(f, g)
    val = float((f.grid.quad_weights * f.values) @ (f.log_values - g.log_values))
    if -1e-9 < val < 0.0:
        return 0.0
    return val


def v_divergence(f: GridDensity, g: GridDensity) -> float:
    """Uncentered second moment int (log(f/g))^2 f dmu."""
    _require_same_grid(f, g)
    diff = f.log_values - g.log_values
    return float((f.grid.quad_weights * f.values) @ (diff * diff))


def hellinger(f: GridDensity, g: GridDensity) -> float:
    """Hellinger distance sqrt(int (sqrt f - sqrt g)^2 dmu), in [0, sqrt 2]."""
    _require_same_grid(f, g)
    diff = f.sqrt_values - g.sqrt_values
    val = float(f.grid.quad_weights @ (diff * diff))
    return min(math.sqrt(max(val, 0.0)), SQRT2)

def h_affinity_gap(f: GridDensity, g: GridDensity) -> float:
    """h(f, g) = 1 - int sqrt(f g) dmu; equals hellinger(f, g)^2 / 2."""
    _require_same_grid(f, g)
    affinity = float(f.grid.quad_weights @ (f.sqrt_values * g.sqrt_values))
    return 1.0 - affinity


def kl_atomic(p: Sequence[float], q: Sequence[float]) -> float:
    """Discrete analogue of kl for finite probability vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_prob_vectors(p, q)
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def v_atomic(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_prob_vectors(p, q)
    mask = p > 0.0
    diff = np.log(p[mask]) - np.log(q[mask])
    return float(np.sum(p[mask] * diff * diff))


def _check_prob_vectors(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise DivergenceError("probability vectors differ in length")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise DivergenceError("probability vectors must be nonnegative")
    for name, vec in (("first", p), ("second", q)):
        if abs(float(vec.sum()) - 1.0) > 1e-9:
            raise DivergenceError(f"{name} vector sums to {vec.sum()}, not 1")
    if np.any((p > 0.0) & (q <= 0.0)):
        raise DivergenceError("second vector vanishes where the first has mass")


# ---------------------------------------------------------------------------
# starred (anchored) functionals
# ---------------------------------------------------------------------------

def kl_contrast(f_circ: GridDensity, f: GridDensity, f_star: GridDensity) -> float:
    """int log(f_circ/f) f_star dmu, computed directly by quadrature.

    When ``f_circ`` minimizes kl(f_star, .) over the family this equals
    kl(f_star, f) - kl(f_star, f_circ); the direct form avoids cancellation
    between two separately quadratured terms.
    """
    _require_same_grid(f_circ, f)
    _require_same_grid(f_circ, f_star)
    w = f_circ.grid.quad_weights * f_star.values
    return float(w @ (f_circ.log_values - f.log_values))


def v_star(f_circ: GridDensity, f: GridDensity, f_star: GridDensity) -> float:
    """int (log(f_circ/f))^2 f_star dmu."""
    _require_same_grid(f_circ, f)
    _require_same_grid(f_circ, f_star)
    diff = f_circ.log_values - f.log_values
    return float((f_circ.grid.quad_weights * f_star.values) @ (diff * diff))


def weighted_hellinger(f_circ: GridDensity, f: GridDensity, f_star: GridDensity) -> float:
    """sqrt(int (sqrt f - sqrt f_circ)^2 (f_star/f_circ) dmu).

    Reduces to hellinger(f_circ, f) when f_circ == f_star.
    """
    return weighted_hellinger_between(f, f_circ, f_star=f_star, f_circ=f_circ)


def weighted_hellinger_between(
    f: GridDensity, g: GridDensity, *, f_star: GridDensity, f_circ: GridDensity
) -> float:
    """Weighted Hellinger distance between f and g with weight f_star/f_circ.

    This is the metric under which covering balls are built in the
    misspecified regime; ``weighted_hellinger`` is the special case g == f_circ.
    """
    _require_same_grid(f, g)
    _require_same_grid(f, f_star)
    _require_same_grid(f, f_circ)
    weight = np.exp(f_star.log_values - f_circ.log_values)
    diff = f.sqrt_values - g.sqrt_values
    val = float(f.grid.quad_weights @ (diff * diff * weight))
    return math.sqrt(max(val, 0.0))


def h_star(f_circ: GridDensity, f: GridDensity, f_star: GridDensity) -> float:
    """h*(f_circ, f) = 1 - int sqrt(f/f_circ) f_star dmu.

    Not clamped: a negative value is meaningful (it certifies that
    int (f/f_circ) f_star dmu <= 1 fails to hold for this triple).
    """
    _require_same_grid(f_circ, f)
    _require_same_grid(f_circ, f_star)
    ratio_sqrt = np.exp(0.5 * (f.log_values - f_circ.log_values))
    return 1.0 - float((f_circ.grid.quad_weights * f_star.values) @ ratio_sqrt)


def kleijn_certificate(f_circ: GridDensity, f: GridDensity, f_star: GridDensity) -> float:
    """int (f/f_circ) f_star dmu; h_star >= weighted_hellinger^2/2 needs <= 1."""
    _require_same_grid(f_circ, f)
    _require_same_grid(f_circ, f_star)
    ratio = np.exp(f.log_values - f_circ.log_values)
    return float((f_circ.grid.quad_weights * f_star.values) @ ratio)


# ---------------------------------------------------------------------------
# sequence (regression-style) functionals
# ---------------------------------------------------------------------------

def mean_hellinger(seq_a: Sequence[GridDensity], seq_b: Sequence[GridDensity]) -> float:
    """Root mean of squared per-index Hellinger distances."""
    h2 = _per_index_squared_hellinger(seq_a, seq_b)
    return math.sqrt(float(np.mean(h2)))


def max_hellinger(seq_a: Sequence[GridDensity], seq_b: Sequence[GridDensity]) -> float:
    """Maximum per-index Hellinger distance."""
    h2 = _per_index_squared_hellinger(seq_a, seq_b)
    return math.sqrt(float(np.max(h2)))


def _per_index_squared_hellinger(
    seq_a: Sequence[GridDensity], seq_b: Sequence[GridDensity]
) -> np.ndarray:
    if len(seq_a) != len(seq_b) or not seq_a:
        raise DivergenceError("sequences must be nonempty and equal length")
    out = np.empty(len(seq_a))
    for i, (a, b) in enumerate(zip(seq_a, seq_b)):
        _require_same_grid(a, b)
        diff = a.sqrt_values - b.sqrt_values
        out[i] = max(float(a.grid.quad_weights @ (diff * diff)), 0.0)
    return out


# ---------------------------------------------------------------------------
# autoregressive transition divergences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateWeighting:
    """Weighting measure over states for state-averaged divergences.

    kind is one of "stationary-density" (weight by the stationary law of the
    first coefficient), "two-point-mixture" (discrete measure on two states),
    or "explicit-density" (any GridDensity over states).
    """

    kind: str
    density: GridDensity | None = None
    locations: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "stationary-density":
            return
        if self.kind == "explicit-density":
            if self.density is None:
                raise DivergenceError("explicit-density weighting needs a density")
            return
        if self.kind == "two-point-mixture":
            if len(self.locations) != 2 or len(self.weights) != 2:
                raise DivergenceError("two-point-mixture needs 2 locations and 2 weights")
            if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0.0:
                raise DivergenceError("two-point-mixture weights must be a probability pair")
            return
        raise DivergenceError(f"unknown weighting kind {self.kind!r}")


STATIONARY_WEIGHTING = StateWeighting(kind="stationary-density")


@dataclass(frozen=True)
class MarkovDivergences:
    kl: float
    v: float
    h_q: float
    h_inf_truncated: float
    state_window: float


def ar1_stationary_sd(theta: float, noise_sd: float = 1.0) -> float:
    if not abs(theta) < 1.0:
        raise NonstationaryError(f"coefficient {theta} has no stationary density")
    return noise_sd / math.sqrt(1.0 - theta * theta)


def _transition_rows(grid: Grid, theta: float, states: np.ndarray, noise_sd: float) -> np.ndarray:
    """Row s holds the renormalized transition density from state s on the grid."""
    z = (grid.x[None, :] - theta * states[:, None]) / noise_sd
    rows = np.exp(-0.5 * z * z) / (noise_sd * math.sqrt(2.0 * math.pi))
    rows = np.maximum(rows, FLOOR)
    rows /= rows @ grid.quad_weights[:, None]
    return np.maximum(rows, FLOOR)


def _check_transition_support(grid: Grid, theta: float, max_abs_state: float, noise_sd: float) -> None:
    reach = abs(theta) * max_abs_state + 4.0 * noise_sd
    if reach > max(abs(grid.lower), abs(grid.upper)):
        raise OutsideGridError(
            f"grid clips transition density: coefficient {theta} from states up to "
            f"+-{max_abs_state:.3g} needs +-{reach:.3g}"
        )


def _per_state_kvh(
    grid: Grid, theta_a: float, theta_b: float, states: np.ndarray, noise_sd: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-state (kl, v, squared hellinger) between the two transition rows."""
    rows_a = _transition_rows(grid, theta_a, states, noise_sd)
    rows_b = _transition_rows(grid, theta_b, states, noise_sd)
    log_diff = np.log(rows_a) - np.log(rows_b)
    wq = grid.quad_weights
    k = (rows_a * log_diff) @ wq
    v = (rows_a * log_diff * log_diff) @ wq
    sq = np.sqrt(rows_a) - np.sqrt(rows_b)
    h2 = (sq * sq) @ wq
    return np.maximum(k, 0.0), v, np.maximum(h2, 0.0)


def state_sup_hellinger(
    theta_a: float,
    theta_b: float,
    window: float,
    *,
    grid: Grid | None = None,
    noise_sd: float = 1.0,
    sweep_points: int = 1001,
) -> float:
    """sup over |y| <= window of the Hellinger distance between transitions from y."""
    if grid is None:
        grid = default_grid()
    if not window > 0.0:
        raise DivergenceError(f"state window must be positive, got {window}")
    for theta in (theta_a, theta_b):
        _check_transition_support(grid, theta, window, noise_sd)
    states = np.linspace(-window, window, sweep_points)
    _, _, h2 = _per_state_kvh(grid, theta_a, theta_b, states, noise_sd)
    return min(math.sqrt(float(np.max(h2))), SQRT2)


def markov_divergences(
    theta_star: float,
    theta: float,
    weighting: StateWeighting = STATIONARY_WEIGHTING,
    state_window: float | None = None,
    *,
    grid: Grid | None = None,
    noise_sd: float = 1.0,
    state_points: int = 401,
    sweep_points: int = 1001,
) -> MarkovDivergences:
    """State-averaged divergences between two AR(1) transition families.

    kl and v integrate the per-state divergences against the stationary
    density of ``theta_star``; h_q integrates per-state Hellinger against the
    ``weighting`` measure; h_inf_truncated is the per-state Hellinger sup over
    |y| <= state_window (default window: 5 stationary standard deviations).
    """
    if grid is None:
        grid = default_grid()
    sd_star = ar1_stationary_sd(theta_star, noise_sd)
    if not abs(theta) < 1.0:
        raise NonstationaryError(f"coefficient {theta} has no stationary density")
    if state_window is None:
        state_window = 5.0 * sd_star

    # stationary integration for kl and v
    half = 6.0 * sd_star
    for th in (theta_star, theta):
        _check_transition_support(grid, th, half, noise_sd)
    states = np.linspace(-half, half, state_points)
    k_s, v_s, _ = _per_state_kvh(grid, theta_star, theta, states, noise_sd)
    u = np.exp(-0.5 * (states / sd_star) ** 2)
    state_w = np.full(state_points, states[1] - states[0])
    state_w[0] *= 0.5
    state_w[-1] *= 0.5
    u_mass = state_w @ u
    k_val = float(state_w @ (u * k_s)) / u_mass
    v_val = float(state_w @ (u * v_s)) / u_mass

    # weighted Hellinger average
    if weighting.kind == "two-point-mixture":
        locs = np.asarray(weighting.locations, dtype=float)
        for th in (theta_star, theta):
            _check_transition_support(grid, th, float(np.max(np.abs(locs))), noise_sd)
        _, _, h2 = _per_state_kvh(grid, theta_star, theta, locs, noise_sd)
        h_q = float(np.asarray(weighting.weights) @ np.sqrt(h2))
    else:
        if weighting.kind == "stationary-density":
            q_states, q_vals = states, u / u_mass
            q_w = state_w
        else:
            qd = weighting.density
            q_states = np.linspace(qd.grid.lower, qd.grid.upper, state_points)
            q_vals = np.exp(np.interp(q_states, qd.grid.x, qd.log_values))
            q_w = np.full(state_points, q_states[1] - q_states[0])
            q_w[0] *= 0.5
            q_w[-1] *= 0.5
            q_vals = q_vals / (q_w @ q_vals)
            for th in (theta_star, theta):
                _check_transition_support(grid, th, float(np.max(np.abs(q_states))), noise_sd)
        _, _, h2 = _per_state_kvh(grid, theta_star, theta, q_states, noise_sd)
        h_q = float(q_w @ (q_vals * np.sqrt(h2)))

    h_inf = state_sup_hellinger(
        theta_star, theta, state_window, grid=grid, noise_sd=noise_sd, sweep_points=sweep_points
    )
    return MarkovDivergences(
        kl=k_val, v=v_val, h_q=h_q, h_inf_truncated=h_inf, state_window=state_window
    )
