"""Command-line interface: config parsing, verification dispatch, CSV reports.

Configs are YAML with nested sections.  Parsing walks the composed node tree
so every complaint carries a line number, duplicate keys are rejected citing
both occurrences, and unknown keys are errors rather than silent no-ops.
One file describes one plan; the selected verifications run under four
subcommands: ``check`` (exact identities and geometry certifications),
``simulate`` (Monte Carlo bound checks), ``sieve`` (covering and sieve
construction report), ``report`` (aggregate previous outputs into a table).

Exit codes: 0 all selected checks pass, 2 a check failed, 3 bad config,
4 runtime failure.  Output is deterministic: the same config and seed give
byte-identical CSVs (17 significant digits, LF endings, no timestamps).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import inference
from .divergences import DivergenceError, default_grid, gaussian_density
from .experiments import (
    ExperimentError,
    ExperimentPlan,
    IidRegime,
    MarkovRegime,
    MisspecifiedRegime,
    RegressionRegime,
    SubsetNotAdmissibleError,
    certify_subset,
    fit_rate,
    fitted_thickness_constant,
    generate_data,
    mean_and_se,
    posterior_mass_path,
    run_replications,
    stat_quantile,
    thickness_records,
    verify_evidence_bound,
    verify_numerator_bound,
)
from .geometry import (
    ConditionParams,
    GeometryError,
    RateSchedule,
    build_sieve_from_cover,
    greedy_cover,
)
from .models import (
    MARKOV,
    REGRESSION,
    AtomicPrior,
    FamilyMember,
    MarkovParam,
    MisspecifiedSetup,
    ModelError,
    build_gaussian_location_family,
    linear_regression_function,
    uniform_prior,
)

REGIMES = ("iid", "misspecified", "regression", "markov")

VERIFICATIONS = (
    "factorization",
    "conditional-identity",
    "thickness",
    "separation",
    "cover",
    "sieve",
    "cesaro",
    "numerator-bound",
    "evidence-bound",
    "posterior-mass",
)

SUBCOMMAND_FAMILIES = {
    "check": ("factorization", "conditional-identity", "thickness", "separation"),
    "simulate": ("cesaro", "numerator-bound", "evidence-bound", "posterior-mass"),
    "sieve": ("cover", "sieve"),
}

EXIT_PASS = 0
EXIT_CRITERION_FAIL = 2
EXIT_CONFIG_ERROR = 3
EXIT_RUNTIME_ERROR = 4

# offset mixed into the config seed for certification draws, so the
# admissibility randomness never aliases a replication stream
CERT_SEED_OFFSET = 202_020


class ConfigError(Exception):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# ---------------------------------------------------------------------------
# config parsing


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _compose(path: Path) -> yaml.Node:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"cannot read config: {e}"])
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as e:
        raise ConfigError([f"config syntax error: {e}"])
    if node is None:
        raise ConfigError(["config is empty"])
    return node


def _items(node: yaml.Node, section: str, errors: list[str]):
    """Mapping items with duplicate-key detection; both locations cited."""
    if not isinstance(node, yaml.MappingNode):
        errors.append(f"section '{section}' must be a mapping (line {_line(node)})")
        return []
    seen: dict[str, int] = {}
    out = []
    for k_node, v_node in node.value:
        key = str(k_node.value)
        if key in seen:
            errors.append(
                f"duplicate key '{key}' at line {seen[key]} and line {_line(k_node)}"
            )
            continue
        seen[key] = _line(k_node)
        out.append((key, k_node, v_node))
    return out


def _scalar(node: yaml.Node, kind: str, where: str, errors: list[str]):
    if not isinstance(node, yaml.ScalarNode):
        errors.append(f"{where} must be a {kind} (line {_line(node)})")
        return None
    tag = node.tag
    try:
        if kind == "int":
            if not tag.endswith(":int"):
                raise ValueError
            return int(node.value)
        if kind == "float":
            if tag.endswith(":int"):
                return float(int(node.value))
            if not tag.endswith(":float"):
                raise ValueError
            return float(node.value)
        if kind == "bool":
            if not tag.endswith(":bool"):
                raise ValueError
            return node.value.lower() in ("true", "yes", "on")
        if kind == "str":
            if not tag.endswith(":str"):
                raise ValueError
            return str(node.value)
    except ValueError:
        pass
    errors.append(f"{where} must be a {kind}, got {node.value!r} (line {_line(node)})")
    return None


def _sequence(node: yaml.Node, kind: str, where: str, errors: list[str]):
    if not isinstance(node, yaml.SequenceNode):
        errors.append(f"{where} must be a list (line {_line(node)})")
        return None
    vals = []
    for i, child in enumerate(node.value):
        v = _scalar(child, kind, f"{where}[{i}]", errors)
        if v is None:
            return None
        vals.append(v)
    return vals


class _Section:
    """One mapping section: typed getters plus an unknown-key sweep."""

    def __init__(self, node: yaml.Node | None, name: str, errors: list[str]):
        self.name = name
        self.errors = errors
        self.fields = {}
        if node is not None:
            for key, k_node, v_node in _items(node, name, errors):
                self.fields[key] = (k_node, v_node)
        self.used: set[str] = set()

    def get(self, key: str, kind: str, default=None, required: bool = False):
        self.used.add(key)
        if key not in self.fields:
            if required:
                self.errors.append(f"section '{self.name}' is missing key '{key}'")
            return default
        _, v_node = self.fields[key]
        where = f"{self.name}.{key}"
        if kind.endswith("-list"):
            return _sequence(v_node, kind[:-5], where, self.errors)
        return _scalar(v_node, kind, where, self.errors)

    def key_line(self, key: str) -> int | None:
        if key in self.fields:
            return _line(self.fields[key][0])
        return None

    def sweep_unknown(self) -> None:
        for key, (k_node, _) in self.fields.items():
            if key not in self.used:
                self.errors.append(
                    f"unknown key '{key}' in section '{self.name}' at line {_line(k_node)}"
                )


@dataclass(frozen=True)
class RunConfig:
    regime: str
    family: dict
    truth: dict
    schedule: RateSchedule
    params: ConditionParams | None
    allow_thin_evidence: bool
    replications: int
    seed: int
    out: str
    jobs: int
    verify: tuple[str, ...]
    subset: tuple[int, ...] | None
    u_set: tuple[int, ...] | None
    verbosity: int


_FAMILY_KEYS = {
    "iid": {"means": ("float-list", True), "sd": ("float", False),
            "weights": ("float-list", False)},
    "misspecified": {"means": ("float-list", True), "sd": ("float", False),
                     "weights": ("float-list", False)},
    "regression": {"slopes": ("float-list", True), "design_length": ("int", True),
                   "weights": ("float-list", False)},
    "markov": {"thetas": ("float-list", True), "noise_sd": ("float", False),
               "state_window": ("float", False), "theta0_bound": ("float", False),
               "weights": ("float-list", False)},
}

_TRUTH_KEYS = {
    "iid": {"mean": ("float", True), "sd": ("float", False)},
    "misspecified": {"mean": ("float", True), "sd": ("float", False),
                     "projection_id": ("int", True)},
    "regression": {"slope": ("float", True)},
    "markov": {"theta": ("float", True)},
}

# verifications that cannot run without a given constant or section
_NEEDED_PARAMS = {
    "evidence-bound": ("c",),
    "numerator-bound": ("d",),
    "separation": ("d",),
    "cover": ("M",),
    "sieve": ("beta", "r", "c", "M"),
    "posterior-mass": ("M",),
}
_NEEDS_SUBSET = ("numerator-bound", "separation")


def parse_config(path: str | Path) -> RunConfig:
    """Validate the whole file; raises ConfigError carrying every complaint."""
    errors: list[str] = []
    root = _compose(Path(path))
    top = _Section(root, "top level", errors)

    regime = top.get("regime", "str", required=True)
    if regime is not None and regime not in REGIMES:
        line = top.key_line("regime")
        errors.append(
            f"unknown regime {regime!r} at line {line}; expected one of {', '.join(REGIMES)}"
        )
        regime = None

    family: dict = {}
    truth: dict = {}
    if regime is not None:
        top.used.add("family")
        top.used.add("truth")
        fam_node = top.fields.get("family", (None, None))[1]
        if fam_node is None:
            errors.append("section 'family' is required")
        truth_node = top.fields.get("truth", (None, None))[1]
        if truth_node is None:
            errors.append("section 'truth' is required")
        fam_sec = _Section(fam_node, "family", errors)
        for key, (kind, required) in _FAMILY_KEYS[regime].items():
            family[key] = fam_sec.get(key, kind, required=required)
        fam_sec.sweep_unknown()
        truth_sec = _Section(truth_node, "truth", errors)
        for key, (kind, required) in _TRUTH_KEYS[regime].items():
            truth[key] = truth_sec.get(key, kind, required=required)
        truth_sec.sweep_unknown()

    top.used.add("schedule")
    sched_node = top.fields.get("schedule", (None, None))[1]
    if sched_node is None:
        errors.append("section 'schedule' is required")
    sched_sec = _Section(sched_node, "schedule", errors)
    n_values = sched_sec.get("n_values", "int-list", required=True)
    a = sched_sec.get("a", "float", default=1.0)
    gamma = sched_sec.get("gamma", "float", default=1.0 / 3.0)
    kappa = sched_sec.get("kappa", "float", default=0.0)
    sched_sec.sweep_unknown()
    schedule = None
    if n_values:
        try:
            schedule = RateSchedule(tuple(n_values), a=a, gamma=gamma, kappa=kappa)
        except GeometryError as e:
            errors.append(f"invalid schedule: {e}")

    top.used.add("params")
    params_node = top.fields.get("params", (None, None))[1]
    params_sec = _Section(params_node, "params", errors)
    raw_params = {
        name: params_sec.get(name, "float")
        for name in ("C", "c", "d", "r", "beta", "M", "eta")
    }
    allow_thin = bool(params_sec.get("allow_thin_evidence", "bool", default=False))
    params_sec.sweep_unknown()
    params = None
    if params_node is not None:
        try:
            params = ConditionParams(
                C=raw_params["C"] if raw_params["C"] is not None else 0.0,
                c=raw_params["c"],
                d=raw_params["d"],
                r=raw_params["r"],
                beta=raw_params["beta"],
                M=raw_params["M"],
                eta=raw_params["eta"],
            )
        except GeometryError as e:
            line = params_sec.key_line("beta") or params_sec.key_line("C")
            loc = f" (params section, line {line})" if line else ""
            errors.append(f"invalid params: {e}{loc}")
    if (
        params is not None
        and params.c is not None
        and not params.c > params.C + 1.0
        and not allow_thin
    ):
        errors.append(
            f"params.c = {params.c} does not exceed C + 1 = {params.C + 1.0} "
            f"(line {params_sec.key_line('c')}); the evidence lower bound needs "
            "the thickness margin, or set allow_thin_evidence: true for a diagnostic run"
        )

    verify_node = top.fields.get("verify", (None, None))[1]
    top.used.add("verify")
    verify: tuple[str, ...] = ()
    if verify_node is None:
        errors.append("key 'verify' is required (which verifications to run)")
    else:
        names = _sequence(verify_node, "str", "verify", errors)
        if names is not None:
            for i, name in enumerate(names):
                if name not in VERIFICATIONS:
                    errors.append(
                        f"unknown verification {name!r} at line {_line(verify_node.value[i])}"
                    )
            verify = tuple(names)
            if not verify:
                errors.append("verify must select at least one verification")

    replications = top.get("replications", "int", default=200)
    seed = top.get("seed", "int", required=True)
    out = top.get("out", "str", default="out")
    jobs = top.get("jobs", "int", default=1)
    verbosity = top.get("verbosity", "int", default=1)
    subset = top.get("subset", "int-list")
    u_set = top.get("u_set", "int-list")
    top.sweep_unknown()

    if replications is not None and replications < 1:
        errors.append(f"replications must be at least 1, got {replications}")
    if jobs is not None and jobs < 1:
        errors.append(f"jobs must be at least 1, got {jobs}")
    if seed is not None and seed < 0:
        errors.append(f"seed must be nonnegative, got {seed}")

    for name in verify:
        for const in _NEEDED_PARAMS.get(name, ()):
            if params is None or getattr(params, const, None) is None:
                errors.append(
                    f"verification '{name}' needs params.{const} to be set"
                )
        if name in _NEEDS_SUBSET and not subset:
            errors.append(f"verification '{name}' needs a top-level subset list")

    if family.get("weights") is not None:
        size_key = {"regression": "slopes", "markov": "thetas"}.get(regime, "means")
        atoms = family.get(size_key)
        if atoms is not None and len(family["weights"]) != len(atoms):
            errors.append(
                f"family.weights has {len(family['weights'])} entries "
                f"for {len(atoms)} atoms"
            )

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        regime=regime,
        family=family,
        truth=truth,
        schedule=schedule,
        params=params,
        allow_thin_evidence=allow_thin,
        replications=replications,
        seed=seed,
        out=out,
        jobs=jobs,
        verify=verify,
        subset=tuple(subset) if subset else None,
        u_set=tuple(u_set) if u_set else None,
        verbosity=verbosity,
    )


# ---------------------------------------------------------------------------
# regime construction


def build_regime(cfg: RunConfig):
    grid = default_grid()
    fam = cfg.family
    weights = fam.get("weights")
    if cfg.regime in ("iid", "misspecified"):
        members = build_gaussian_location_family(
            grid, fam["means"], sd=fam.get("sd") or 1.0
        )
        prior = AtomicPrior(members, weights) if weights else uniform_prior(members)
        truth = gaussian_density(grid, cfg.truth["mean"], cfg.truth.get("sd") or 1.0)
        if cfg.regime == "iid":
            return IidRegime(prior, truth)
        setup = MisspecifiedSetup(
            prior=prior, true_density=truth, projection_id=cfg.truth["projection_id"]
        )
        return MisspecifiedRegime(setup)
    if cfg.regime == "regression":
        length = fam["design_length"]
        members = [
            FamilyMember(j, REGRESSION, linear_regression_function(s, length))
            for j, s in enumerate(fam["slopes"])
        ]
        prior = AtomicPrior(members, weights) if weights else uniform_prior(members)
        return RegressionRegime(prior, linear_regression_function(cfg.truth["slope"], length))
    members = [
        FamilyMember(j, MARKOV, MarkovParam(t, noise_sd=fam.get("noise_sd") or 1.0))
        for j, t in enumerate(fam["thetas"])
    ]
    prior = AtomicPrior(members, weights) if weights else uniform_prior(members)
    kwargs = {}
    if fam.get("state_window") is not None:
        kwargs["state_window"] = fam["state_window"]
    if fam.get("theta0_bound") is not None:
        kwargs["theta0_bound"] = fam["theta0_bound"]
    return MarkovRegime(
        prior,
        MarkovParam(cfg.truth["theta"], noise_sd=fam.get("noise_sd") or 1.0),
        grid=grid,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, columns: Sequence[str], units: Sequence[str],
              statistic: str, seed: int, rows) -> None:
    """Self-describing CSV: header comments, then data at 17 significant digits."""
    if len(columns) != len(units):
        raise ValueError("columns and units must align")
    lines = [
        "# columns: " + ", ".join(columns),
        "# units: " + ", ".join(units),
        "# statistic: " + statistic,
        f"# seed: {seed}",
        ",".join(columns),
    ]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError("row width does not match columns")
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", newline="\n")


# ---------------------------------------------------------------------------
# verification runners


@dataclass(frozen=True)
class VerificationResult:
    name: str
    passed: bool
    detail: str
    csv: str = ""


def _markov_split(data):
    if isinstance(data, np.ndarray):
        return data, None
    return data.y, data.y0


def _run_factorization(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    n_check = min(40, cfg.schedule.n_values[-1])
    data = generate_data(regime, n_check, cfg.seed)
    y_seq, y0 = _markov_split(data)
    report = inference.factorization_check(
        regime.prior, [float(y) for y in y_seq], reference=regime.reference, y0=y0
    )
    passed = report.abs_diff < 1e-9
    name = "factorization.csv"
    write_csv(
        out / name,
        ["n", "log_joint_direct", "log_joint_factored", "abs_diff"],
        ["count", "log-density", "log-density", "log-density"],
        "joint log marginal computed directly vs telescoped through one-step predictives",
        cfg.seed,
        [(n_check, report.log_joint_direct, report.log_joint_factored, report.abs_diff)],
    )
    return VerificationResult(
        "factorization", passed, f"abs diff {report.abs_diff:.3g} over {n_check} steps", name
    )


def _run_conditional_identity(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    n_check = min(25, cfg.schedule.n_values[-1])
    data = generate_data(regime, n_check, cfg.seed)
    y_seq, y0 = _markov_split(data)
    state = inference.initial_state(regime.prior, regime.reference, y0=y0)
    rows = []
    worst = 0.0
    for i, y in enumerate(y_seq, start=1):
        report = inference.conditional_sqrt_ratio_identity(state, member_ids=cfg.subset)
        diff = abs(report.lhs - report.rhs)
        worst = max(worst, diff)
        rows.append((i, report.lhs, report.rhs, diff))
        state = inference.update(state, float(y))
    passed = worst < 1e-9
    name = "conditional_identity.csv"
    write_csv(
        out / name,
        ["step", "lhs", "rhs", "abs_diff"],
        ["count", "dimensionless", "dimensionless", "dimensionless"],
        "one-step conditional expectation of the square-root predictive ratio "
        "vs one minus the affinity gap",
        cfg.seed,
        rows,
    )
    return VerificationResult(
        "conditional-identity", passed, f"max abs diff {worst:.3g} over {n_check} steps", name
    )


def _run_thickness(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    records = thickness_records(regime, cfg.schedule)
    fitted = fitted_thickness_constant(records)
    rows = [
        (r.n, r.epsilon, r.neighborhood_mass, r.implied_c) for r in records
    ]
    passed = math.isfinite(fitted)
    name = "thickness.csv"
    write_csv(
        out / name,
        ["n", "epsilon", "neighborhood_mass", "implied_c"],
        ["count", "rate", "probability", "dimensionless"],
        "prior mass of the divergence neighborhood and the thickness constant it implies",
        cfg.seed,
        rows,
    )
    detail = (
        f"fitted C = {fitted:.6g}" if passed else "empty divergence neighborhood"
    )
    return VerificationResult("thickness", passed, detail, name)


def _run_separation(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    d = cfg.params.d
    rng = np.random.default_rng(cfg.seed + CERT_SEED_OFFSET)
    rows = []
    failure = ""
    for n in cfg.schedule.n_values:
        delta = d * cfg.schedule.epsilon(n) ** 2
        try:
            cert = certify_subset(regime, cfg.subset, delta, n, rng, draws=100)
            rows.append(
                (n, delta, cert.vertex.min_gap, cert.hull_gap_bound,
                 cert.closure.worst_violation, cert.mixture_min_gap, True)
            )
        except SubsetNotAdmissibleError as e:
            failure = str(e)
            rows.append((n, delta, math.nan, math.nan, math.nan, math.nan, False))
    name = "separation.csv"
    write_csv(
        out / name,
        ["n", "delta", "min_vertex_gap", "hull_gap_bound",
         "closure_worst_violation", "mixture_min_gap", "certified"],
        ["count", "gap", "gap", "gap", "gap", "gap", "flag"],
        "subset admissibility: vertex gaps, convex-hull triangle bound, and "
        "random-mixture checks against delta = d * n-rate",
        cfg.seed,
        rows,
    )
    if failure:
        return VerificationResult("separation", False, failure, name)
    return VerificationResult(
        "separation", True, f"certified at all {len(rows)} schedule points", name
    )


def _run_cesaro(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    plan = ExperimentPlan(
        regime=regime,
        schedule=cfg.schedule,
        replications=cfg.replications,
        seed=cfg.seed,
        collect=("cesaro_kl",),
    )
    records = run_replications(plan, jobs=cfg.jobs)
    mean, se = mean_and_se(records, "cesaro_kl")
    med = stat_quantile(records, "cesaro_kl", 0.5)
    ns = cfg.schedule.n_values
    slope = math.nan
    try:
        slope = fit_rate(ns, mean, epsilons=cfg.schedule.epsilons).slope
    except ExperimentError:
        pass
    rows = [
        (n, cfg.schedule.epsilon(n), mean[k], se[k], med[k]) for k, n in enumerate(ns)
    ]
    passed = bool(np.all(np.diff(med) < 0.0))
    name = "cesaro.csv"
    write_csv(
        out / name,
        ["n", "epsilon", "mean", "std_error", "median"],
        ["count", "rate", "nat", "nat", "nat"],
        "running average of one-step predictive divergences from the sampling "
        "density, across replications",
        cfg.seed,
        rows,
    )
    detail = f"median path {med[0]:.4g} -> {med[-1]:.4g}, mean log-log slope {slope:.3g}"
    return VerificationResult("cesaro", passed, detail, name)


def _run_numerator_bound(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    plan = ExperimentPlan(
        regime=regime,
        schedule=cfg.schedule,
        replications=cfg.replications,
        seed=cfg.seed,
        collect=("sqrt_l",),
        subset_ids=cfg.subset,
        params=cfg.params,
    )
    name = "numerator_bound.csv"
    try:
        report = verify_numerator_bound(plan, jobs=cfg.jobs, closure_draws=100)
    except SubsetNotAdmissibleError as e:
        write_csv(
            out / name,
            ["n", "mean_sqrt_numerator", "std_error", "bound"],
            ["count", "sqrt-mass", "sqrt-mass", "sqrt-mass"],
            "mean square-root restricted numerator vs its certified exponential bound",
            cfg.seed,
            [],
        )
        return VerificationResult("numerator-bound", False, str(e), name)
    rows = [
        (n, report.empirical_mean[k], report.std_error[k], report.bound[k])
        for k, n in enumerate(report.n_values)
    ]
    write_csv(
        out / name,
        ["n", "mean_sqrt_numerator", "std_error", "bound"],
        ["count", "sqrt-mass", "sqrt-mass", "sqrt-mass"],
        "mean square-root restricted numerator vs its certified exponential bound",
        cfg.seed,
        rows,
    )
    detail = (
        f"d = {report.d}, implied C = {report.implied_c:.4g}, "
        f"worst margin {float(np.max(report.empirical_mean - report.bound)):.3g}"
    )
    return VerificationResult("numerator-bound", report.passed, detail, name)


def _run_evidence_bound(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    plan = ExperimentPlan(
        regime=regime,
        schedule=cfg.schedule,
        replications=cfg.replications,
        seed=cfg.seed,
        params=cfg.params,
    )
    name = "evidence_bound.csv"
    try:
        report = verify_evidence_bound(
            plan, jobs=cfg.jobs, enforce_thickness=not cfg.allow_thin_evidence
        )
    except ExperimentError as e:
        write_csv(
            out / name,
            ["n", "log_threshold", "fraction_below"],
            ["count", "log", "probability"],
            "fraction of replications whose log evidence ratio falls below the "
            "thickness threshold",
            cfg.seed,
            [],
        )
        return VerificationResult("evidence-bound", False, str(e), name)
    rows = [
        (n, report.thresholds[k], report.fractions[k])
        for k, n in enumerate(report.n_values)
    ]
    write_csv(
        out / name,
        ["n", "log_threshold", "fraction_below"],
        ["count", "log", "probability"],
        "fraction of replications whose log evidence ratio falls below the "
        "thickness threshold",
        cfg.seed,
        rows,
    )
    passed = bool(report.fractions[-1] <= 0.1 and report.trend_slope <= 1e-12)
    detail = (
        f"final fraction {report.fractions[-1]:.4g}, trend slope {report.trend_slope:.3g}"
    )
    return VerificationResult("evidence-bound", passed, detail, name)


def _run_posterior_mass(cfg: RunConfig, regime, out: Path) -> VerificationResult:
    plan = ExperimentPlan(
        regime=regime,
        schedule=cfg.schedule,
        replications=cfg.replications,
        seed=cfg.seed,
        u_set=cfg.u_set,
    )
    report = posterior_mass_path(plan, multiplier=cfg.params.M, jobs=cfg.jobs)
    rows = []
    for k, n in enumerate(report.n_values):
        row = [n, cfg.schedule.epsilon(n), len(report.b_sets[k]),
               report.medians[k], report.upper_quartiles[k]]
        if report.u_medians is not None:
            row.append(report.u_medians[k])
        rows.append(tuple(row))
    cols = ["n", "epsilon", "far_set_size", "median_mass", "upper_quartile_mass"]
    units = ["count", "rate", "count", "probability", "probability"]
    if report.u_medians is not None:
        cols.append("near_set_median_mass")
        units.append("probability")
    name = "posterior_mass.csv"
    write_csv(
        out / name,
        cols,
        units,
        "posterior mass of atoms farther than M * rate from the sampling truth",
        cfg.seed,
        rows,
    )
    # the far set grows as the rate shrinks, so the median path need not be
    # monotone step to step; the claim is decay overall and at the cap
    final_ok = report.medians[-1] < 0.05
    trend_ok = report.medians[0] == 0.0 or report.medians[-1] <= report.medians[0]
    passed = bool(final_ok and trend_ok)
    detail = f"median far mass {report.medians[0]:.4g} -> {report.medians[-1]:.4g}"
    return VerificationResult("posterior-mass", passed, detail, name)


def _run_cover_and_sieve(cfg: RunConfig, regime, out: Path) -> list[VerificationResult]:
    p = cfg.params
    cover_rows = []
    sieve_rows = []
    cover_ok, sieve_ok = True, True
    notes = []
    for n in cfg.schedule.n_values:
        eps = cfg.schedule.epsilon(n)
        radius = p.M * eps / 2.0
        far = [
            m.id for m in regime.prior.members if regime.truth_dist(m.id, n) > p.M * eps
        ]
        if not far:
            cover_rows.append((n, eps, radius, 0, 0, True))
            notes.append(f"n={n}: empty far set")
            continue
        balls = greedy_cover(far, radius, lambda a, b: regime.pair_dist(a, b, n))
        covered = set().union(*(b.member_ids for b in balls))
        all_covered = covered == set(far)
        cover_ok = cover_ok and all_covered
        cover_rows.append((n, eps, radius, len(far), len(balls), all_covered))
        sieve = build_sieve_from_cover(
            balls, regime.prior, p.beta, p.r, p.c, n, eps
        )
        chain_ok = (
            sieve.mass_bound_max_violation <= 1e-12
            and sieve.complement_mass <= sieve.tail_bound + sieve.uncovered_mass + 1e-12
        )
        sieve_ok = sieve_ok and chain_ok
        sieve_rows.append(
            (n, eps, len(balls), sieve.j_n, sieve.exhausted, sieve.s_n,
             sieve.complement_mass, sieve.uncovered_mass, sieve.tail_bound,
             sieve.mass_bound_max_violation, sieve.log_j_requested,
             sieve.log_j_bound, sieve.log_j_ok)
        )
    cover_name = "covering.csv"
    write_csv(
        out / cover_name,
        ["n", "epsilon", "radius", "far_atoms", "balls", "covered"],
        ["count", "rate", "distance", "count", "count", "flag"],
        "greedy covering of the far atoms at radius M * rate / 2",
        cfg.seed,
        cover_rows,
    )
    sieve_name = "sieve.csv"
    write_csv(
        out / sieve_name,
        ["n", "epsilon", "balls", "j_n", "exhausted", "s_n", "complement_mass",
         "uncovered_mass", "tail_bound", "mass_bound_max_violation",
         "log_j_requested", "log_j_bound", "log_j_ok"],
        ["count", "rate", "count", "count", "flag", "mass-root", "probability",
         "probability", "probability", "probability", "log", "log", "flag"],
        "highest-mass sieve kept to the defining inequality's ball count, with "
        "per-index mass bounds and the complement tail chain",
        cfg.seed,
        sieve_rows,
    )
    results = [
        VerificationResult(
            "cover", cover_ok,
            "; ".join(notes) if notes else "all far atoms covered at every n",
            cover_name,
        )
    ]
    if sieve_rows:
        detail = f"max per-index violation {max(r[9] for r in sieve_rows):.3g}"
    else:
        detail = "no nonempty far set on this schedule"
    results.append(VerificationResult("sieve", sieve_ok, detail, sieve_name))
    return results


_RUNNERS = {
    "factorization": _run_factorization,
    "conditional-identity": _run_conditional_identity,
    "thickness": _run_thickness,
    "separation": _run_separation,
    "cesaro": _run_cesaro,
    "numerator-bound": _run_numerator_bound,
    "evidence-bound": _run_evidence_bound,
    "posterior-mass": _run_posterior_mass,
}


# ---------------------------------------------------------------------------
# summary bookkeeping


def _update_summary(out: Path, seed: int, results: Sequence[VerificationResult]) -> None:
    path = out / "summary.json"
    data = {"seed": seed, "verifications": {}}
    if path.exists():
        data = json.loads(path.read_text())
        data["seed"] = seed
        data.setdefault("verifications", {})
    for r in results:
        data["verifications"][r.name] = {
            "passed": bool(r.passed),
            "detail": r.detail,
            "csv": r.csv,
        }
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", newline="\n")


def _report(out: Path, verbose: bool) -> int:
    path = out / "summary.json"
    if not path.exists():
        print(f"no summary.json under {out}; run check/simulate/sieve first", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    data = json.loads(path.read_text())
    entries = sorted(data.get("verifications", {}).items())
    if not entries:
        print("summary.json lists no verifications", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    rows = [
        (name, entry["passed"], entry.get("detail", ""), entry.get("csv", ""))
        for name, entry in entries
    ]
    write_csv(
        out / "summary.csv",
        ["verification", "passed", "detail", "csv"],
        ["name", "flag", "text", "filename"],
        "aggregated pass/fail state of every verification recorded in this directory",
        int(data.get("seed", 0)),
        rows,
    )
    all_passed = all(r[1] for r in rows)
    if verbose:
        for name, passed, detail, _ in rows:
            print(f"{name}: {'pass' if passed else 'FAIL'} ({detail})")
        print(f"wrote {out / 'summary.csv'}")
    return EXIT_PASS if all_passed else EXIT_CRITERION_FAIL


# ---------------------------------------------------------------------------
# entry point


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesrates",
        description="Sequential-inference bound verification laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, blurb in (
        ("check", "exact identities and geometry certifications"),
        ("simulate", "Monte Carlo bound verifications"),
        ("sieve", "covering and sieve construction report"),
        ("report", "aggregate recorded results into a summary table"),
    ):
        sp = sub.add_parser(cmd, help=blurb)
        sp.add_argument("--config", required=(cmd != "report"), help="path to the YAML plan")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--jobs", type=int, help="parallel replication workers")
        sp.add_argument("--verify", help="comma-separated verification subset override")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_arg_parser().parse_args(argv)

    if args.command == "report" and args.config is None:
        out = Path(args.out or "out")
        return _report(out, verbose=True)

    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.verify is not None:
        names = tuple(s.strip() for s in args.verify.split(",") if s.strip())
        bad = [n for n in names if n not in VERIFICATIONS]
        if bad or not names:
            print(f"config error: unknown verifications {bad or '(empty)'}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        missing = []
        for n in names:
            for const in _NEEDED_PARAMS.get(n, ()):
                if cfg.params is None or getattr(cfg.params, const, None) is None:
                    missing.append(f"verification '{n}' needs params.{const} to be set")
            if n in _NEEDS_SUBSET and not cfg.subset:
                missing.append(f"verification '{n}' needs a top-level subset list")
        if missing:
            for msg in missing:
                print(f"config error: {msg}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        cfg = replace(cfg, verify=names)

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"runtime error: cannot create output directory: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR

    if args.command == "report":
        return _report(out, verbose=cfg.verbosity > 0)

    try:
        regime = build_regime(cfg)
    except (ModelError, GeometryError, DivergenceError, ExperimentError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    for ids, label in ((cfg.subset, "subset"), (cfg.u_set, "u_set")):
        for i in ids or ():
            try:
                regime.prior.index_of(i)
            except ModelError:
                print(
                    f"config error: {label} names id {i}, which is not a prior atom",
                    file=sys.stderr,
                )
                return EXIT_CONFIG_ERROR

    selected = [v for v in cfg.verify if v in SUBCOMMAND_FAMILIES[args.command]]
    if not selected:
        if cfg.verbosity > 0:
            print(f"nothing to do: no selected verification belongs to '{args.command}'")
        return EXIT_PASS

    results: list[VerificationResult] = []
    try:
        if args.command == "sieve":
            results.extend(_run_cover_and_sieve(cfg, regime, out))
            results = [r for r in results if r.name in selected]
        else:
            for name in selected:
                results.append(_RUNNERS[name](cfg, regime, out))
    except (ModelError, GeometryError, DivergenceError, ExperimentError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR

    _update_summary(out, cfg.seed, results)
    if cfg.verbosity > 0:
        for r in results:
            print(f"{r.name}: {'pass' if r.passed else 'FAIL'} ({r.detail})")
    return EXIT_PASS if all(r.passed for r in results) else EXIT_CRITERION_FAIL


if __name__ == "__main__":
    sys.exit(main())
