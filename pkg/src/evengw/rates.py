"""Monte-Carlo verification of the plug-in estimation rates.

Experiments draw independent sample pairs per trial, measure the absolute
estimation error of the functional (or of its marginal part, or of a single
moment), and fit a log-log slope over the sample-size grid.  All randomness
is derived from one experiment seed: each (size, trial, stream) triple gets
its own generator, so the X and Y samples come from disjoint streams and the
trials are reproducible and order-independent.

The two-atom-versus-point family admits a closed form: its plug-in value is
a quadratic in the hit fraction, so trial errors for it are computed without
any solver and a configurable fraction of trials is cross-checked against
the full pipeline.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .measures import (
    DiscreteMeasure,
    DistributionSpec,
    derive_seed,
    population_moment,
    sample,
    moment as measure_moment,
)
from .expansion import marginal_value, marginal_value_from_moments
from .solvers import SolverConfig, compute_gw, shared_expansion

__all__ = [
    "RateExperiment",
    "RateResult",
    "rho_n",
    "run_rate_experiment",
    "marginal_rate_experiment",
    "lower_bound_exact",
    "empirical_lower_check",
    "two_point_plugin_value",
    "fit_loglog_slope",
    "spearman_n_vs_error",
]

REFERENCE_MODES = ("closed_form", "self_zero", "high_n_estimate")
CROSS_CHECK_TOL = 1e-9
_STREAM_X, _STREAM_Y, _STREAM_BOOT, _STREAM_REF = 0, 1, 2, 3

EXPERIMENT_SOLVER = SolverConfig(restarts=2, max_iters=150, fw_tol=1e-8)


def rho_n(n: int, d: int) -> float:
    """Dimension-driven error scale n^{-2/max(d,4)} with the log factor at d=4."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    out = float(n) ** (-2.0 / max(d, 4))
    if d == 4:
        out *= np.log(np.e * n)
    return out


@dataclass(frozen=True)
class RateExperiment:
    """Configuration of one rate experiment."""

    r: int
    k: int
    dist_x: DistributionSpec
    dist_y: DistributionSpec
    n_grid: tuple[int, ...]
    trials: int
    seed: int
    reference: str = "closed_form"

    def __post_init__(self) -> None:
        grid = tuple(int(n) for n in self.n_grid)
        if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly increasing with at least 2 entries")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.reference not in REFERENCE_MODES:
            raise ValueError(f"reference must be one of {REFERENCE_MODES}")
        object.__setattr__(self, "n_grid", grid)

    @property
    def d_min(self) -> int:
        return min(self.dist_x.dim, self.dist_y.dim)

    def predicted_slope(self) -> float:
        return -2.0 / max(self.d_min, 4)


@dataclass
class RateResult:
    """Per-size error samples and the fitted log-log slope."""

    n_grid: tuple[int, ...]
    per_n_errors: dict[int, np.ndarray]
    mean_errors: np.ndarray
    fitted_slope: float
    predicted_slope: float
    slope_ci_halfwidth: float
    slope_defined: bool
    reference_value: float
    cross_check_max_dev: float = 0.0
    notes: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "n_grid": list(self.n_grid),
            "mean_errors": self.mean_errors.tolist(),
            "fitted_slope": None if not self.slope_defined else self.fitted_slope,
            "predicted_slope": self.predicted_slope,
            "slope_ci_halfwidth": self.slope_ci_halfwidth,
            "slope_defined": self.slope_defined,
            "reference_value": self.reference_value,
            "cross_check_max_dev": self.cross_check_max_dev,
            "notes": self.notes,
        }

    def write_errors_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("n,trial,error\n")
            for n in self.n_grid:
                for idx, err in enumerate(self.per_n_errors[n]):
                    fh.write(f"{n},{idx},{err!r}\n")


def fit_loglog_slope(n_grid, mean_errors) -> tuple[float, bool]:
    """Least-squares slope of log(error) against log(n); undefined on zeros."""
    mean_errors = np.asarray(mean_errors, dtype=float)
    if np.any(mean_errors <= 0) or len(mean_errors) < 2:
        return float("nan"), False
    x = np.log(np.asarray(n_grid, dtype=float))
    y = np.log(mean_errors)
    slope = float(np.polyfit(x, y, 1)[0])
    return slope, np.isfinite(slope)


def spearman_n_vs_error(result: RateResult) -> float:
    """Spearman rank correlation between n and the mean error."""
    from scipy.stats import spearmanr

    corr = spearmanr(result.n_grid, result.mean_errors).statistic
    return float(corr)


def lower_bound_exact(p: float, radius: float, r: int, k: int) -> float:
    """Closed-form value 2 p (1-p) R^{4kr} of the two-atom-versus-point pair."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if radius <= 0.0:
        raise ValueError("R must be positive")
    if min(r, k) < 1:
        raise ValueError("orders must be at least 1")
    return 2.0 * p * (1.0 - p) * radius ** (4 * k * r)


def two_point_plugin_value(count: int, n: int, radius: float, r: int, k: int) -> float:
    """Plug-in value when ``count`` of ``n`` draws landed on the far atom.

    The second empirical measure is a point mass, so the unique coupling
    forces the value 2 phat (1-phat) R^{4kr} with phat = count / n.
    """
    phat = count / n
    return 2.0 * phat * (1.0 - phat) * radius ** (4 * k * r)


# ----------------------------------------------------------------------
# trial workers (top level so process pools can pickle them)


def _closed_form_trial(args) -> float:
    exp, n, trial = args
    mu_hat = sample(exp.dist_x, n, derive_seed(exp.seed, n, trial, _STREAM_X))
    count = int(np.sum(mu_hat.atoms[:, 0] == exp.dist_x.radius))
    value = two_point_plugin_value(count, n, exp.dist_x.radius, exp.r, exp.k)
    truth = lower_bound_exact(exp.dist_x.p, exp.dist_x.radius, exp.r, exp.k)
    return abs(value - truth)


def _self_zero_trial(args) -> float:
    exp, n, trial = args
    mu_hat = sample(exp.dist_x, n, derive_seed(exp.seed, n, trial, _STREAM_X))
    nu_hat = sample(exp.dist_y, n, derive_seed(exp.seed, n, trial, _STREAM_Y))
    return compute_gw(mu_hat, nu_hat, exp.r, exp.k, EXPERIMENT_SOLVER).value


def _pair_value_trial(args) -> float:
    exp, n, trial = args
    mu_hat = sample(exp.dist_x, n, derive_seed(exp.seed, n, trial, _STREAM_X))
    nu_hat = sample(exp.dist_y, n, derive_seed(exp.seed, n, trial, _STREAM_Y))
    return compute_gw(mu_hat, nu_hat, exp.r, exp.k, EXPERIMENT_SOLVER).value


def _parallel_map(fn, tasks, threads: int):
    if threads <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=4))


def run_rate_experiment(
    exp: RateExperiment,
    threads: int = 1,
    cross_check_fraction: float = 0.01,
    bootstrap: int = 200,
) -> RateResult:
    """Estimate the plug-in error decay of the functional over the size grid.

    reference modes:
      * ``closed_form``    two-point versus point-mass family; trial errors
        are solver-free (the coupling is forced) and a fraction of trials is
        re-run through the full pipeline, which must agree to 1e-9;
      * ``self_zero``      dist_x equals dist_y, the true value is zero and
        the trial error is the full pipeline value on two independent
        samples (an upper-bound estimate, noted in the result);
      * ``high_n_estimate``  reference from 16 independent pairs at eight
        times the largest grid size, flagged as an estimate.
    """
    notes: dict = {"reference": exp.reference}
    if exp.reference == "closed_form":
        if exp.dist_x.kind != "two-point" or exp.dist_y.kind != "point-mass":
            raise ValueError(
                "closed_form reference needs dist_x two-point and dist_y point-mass"
            )
        if not 0.0 < exp.dist_x.p < 1.0:
            raise ValueError("closed_form reference needs 0 < p < 1")
        truth = lower_bound_exact(exp.dist_x.p, exp.dist_x.radius, exp.r, exp.k)
        worker = _closed_form_trial
    elif exp.reference == "self_zero":
        if exp.dist_x != exp.dist_y:
            raise ValueError("self_zero reference needs dist_x == dist_y")
        truth = 0.0
        notes["upper_bound_estimates"] = True
        worker = _self_zero_trial
    else:
        n_ref = 8 * max(exp.n_grid)
        ref_exp = replace(exp, seed=derive_seed(exp.seed, _STREAM_REF))
        ref_vals = [_pair_value_trial((ref_exp, n_ref, t)) for t in range(16)]
        truth = float(np.mean(ref_vals))
        notes["reference_estimated_at_n"] = n_ref
        notes["reference_seeds"] = 16
        worker = _pair_value_trial

    per_n: dict[int, np.ndarray] = {}
    cross_dev = 0.0
    for n in exp.n_grid:
        tasks = [(exp, n, t) for t in range(exp.trials)]
        values = _parallel_map(worker, tasks, threads)
        if exp.reference == "closed_form":
            errors = np.asarray(values, dtype=float)
            cross_dev = max(cross_dev, _cross_check(exp, n, cross_check_fraction))
        elif exp.reference == "self_zero":
            errors = np.asarray(values, dtype=float)
        else:
            errors = np.abs(np.asarray(values, dtype=float) - truth)
        per_n[n] = errors

    mean_errors = np.array([per_n[n].mean() for n in exp.n_grid])
    slope, defined = fit_loglog_slope(exp.n_grid, mean_errors)
    halfwidth = _bootstrap_halfwidth(exp, per_n, bootstrap) if defined else float("nan")
    return RateResult(
        n_grid=exp.n_grid,
        per_n_errors=per_n,
        mean_errors=mean_errors,
        fitted_slope=slope,
        predicted_slope=exp.predicted_slope(),
        slope_ci_halfwidth=halfwidth,
        slope_defined=defined,
        reference_value=truth,
        cross_check_max_dev=cross_dev,
        notes=notes,
    )


def _cross_check(exp: RateExperiment, n: int, fraction: float) -> float:
    """Re-run selected solver-free trials through the full pipeline."""
    if fraction <= 0.0:
        return 0.0
    stride = max(1, int(round(1.0 / fraction)))
    worst = 0.0
    for trial in range(0, exp.trials, stride):
        mu_hat = sample(exp.dist_x, n, derive_seed(exp.seed, n, trial, _STREAM_X))
        nu_hat = sample(exp.dist_y, n, derive_seed(exp.seed, n, trial, _STREAM_Y))
        count = int(np.sum(mu_hat.atoms[:, 0] == exp.dist_x.radius))
        fast = two_point_plugin_value(count, n, exp.dist_x.radius, exp.r, exp.k)
        full = compute_gw(mu_hat, nu_hat, exp.r, exp.k, EXPERIMENT_SOLVER).value
        dev = abs(full - fast)
        if dev > CROSS_CHECK_TOL * max(1.0, abs(fast)):
            raise RuntimeError(
                f"pipeline cross-check failed at n={n}, trial={trial}: "
                f"solver-free {fast!r} vs pipeline {full!r}"
            )
        worst = max(worst, dev)
    return worst


def _bootstrap_halfwidth(exp: RateExperiment, per_n: dict, reps: int) -> float:
    if reps < 1:
        return float("nan")
    rng = np.random.default_rng(derive_seed(exp.seed, _STREAM_BOOT))
    slopes = []
    for _ in range(reps):
        means = []
        for n in exp.n_grid:
            errs = per_n[n]
            means.append(errs[rng.integers(0, len(errs), len(errs))].mean())
        slope, defined = fit_loglog_slope(exp.n_grid, means)
        if defined:
            slopes.append(slope)
    if not slopes:
        return float("nan")
    return float(1.96 * np.std(slopes))


# ----------------------------------------------------------------------
# marginal-part and single-moment experiments


def marginal_rate_experiment(
    r: int,
    k: int,
    dist: DistributionSpec,
    n_grid,
    trials: int,
    seed: int,
    dist_y: DistributionSpec | None = None,
    alpha=None,
    bootstrap: int = 200,
) -> RateResult:
    """Error decay of the marginal part, or of one moment when alpha is given.

    The reference is computed from closed-form population moments where the
    distribution admits them and from a 10^6-draw sample otherwise.
    """
    dist_y = dist_y or DistributionSpec("point-mass", 1)
    n_grid = tuple(int(n) for n in n_grid)
    if len(n_grid) < 2 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing with at least 2 entries")
    if trials < 1:
        raise ValueError("trials must be at least 1")

    if alpha is not None:
        alpha = tuple(int(a) for a in alpha)
        truth = _moment_reference(dist, alpha, seed)
        predicted = -0.5

        def estimate(n: int, trial: int) -> float:
            mu_hat = sample(dist, n, derive_seed(seed, n, trial, _STREAM_X))
            return measure_moment(mu_hat, alpha)

    else:
        exp = shared_expansion(r, k, dist.dim, dist_y.dim)
        truth = marginal_value_from_moments(
            exp, _moment_fn(dist, seed, _STREAM_X), _moment_fn(dist_y, seed, _STREAM_Y)
        )
        predicted = -0.5

        def estimate(n: int, trial: int) -> float:
            mu_hat = sample(dist, n, derive_seed(seed, n, trial, _STREAM_X))
            nu_hat = sample(dist_y, n, derive_seed(seed, n, trial, _STREAM_Y))
            return marginal_value(exp, mu_hat, nu_hat)

    per_n = {
        n: np.array([abs(estimate(n, t) - truth) for t in range(trials)])
        for n in n_grid
    }
    mean_errors = np.array([per_n[n].mean() for n in n_grid])
    slope, defined = fit_loglog_slope(n_grid, mean_errors)
    frame = RateExperiment(
        r=r, k=k, dist_x=dist, dist_y=dist_y, n_grid=n_grid, trials=trials,
        seed=seed, reference="closed_form",
    )
    halfwidth = _bootstrap_halfwidth(frame, per_n, bootstrap) if defined else float("nan")
    return RateResult(
        n_grid=n_grid,
        per_n_errors=per_n,
        mean_errors=mean_errors,
        fitted_slope=slope,
        predicted_slope=predicted,
        slope_ci_halfwidth=halfwidth,
        slope_defined=defined,
        reference_value=truth,
        notes={"target": "moment" if alpha is not None else "marginal_part"},
    )


def _moment_fn(dist: DistributionSpec, seed: int, stream: int):
    try:
        zero = (0,) * dist.dim
        population_moment(dist, zero)

        def fn(idx):
            return population_moment(dist, idx)

        return fn
    except ValueError:
        big = sample(dist, 1_000_000, derive_seed(seed, _STREAM_REF, stream))

        def fn(idx):
            return measure_moment(big, idx)

        return fn


def _moment_reference(dist: DistributionSpec, alpha, seed: int) -> float:
    try:
        return population_moment(dist, alpha)
    except ValueError:
        big = sample(dist, 1_000_000, derive_seed(seed, _STREAM_REF, _STREAM_X))
        return measure_moment(big, alpha)


def empirical_lower_check(
    p: float,
    radius: float,
    r: int,
    k: int,
    n_grid,
    trials: int,
    seed: int,
    cross_check_fraction: float = 0.01,
    bootstrap: int = 200,
) -> RateResult:
    """Solver-free error decay of the two-point family from binomial counts.

    Each trial draws the far-atom count directly, evaluates the exact plug-in
    error, and a configurable fraction of trials is validated against the
    full pipeline on the explicitly constructed empirical pair.
    """
    truth = lower_bound_exact(p, radius, r, k)
    n_grid = tuple(int(n) for n in n_grid)
    if len(n_grid) < 2 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing with at least 2 entries")
    per_n: dict[int, np.ndarray] = {}
    cross_dev = 0.0
    stride = max(1, int(round(1.0 / cross_check_fraction))) if cross_check_fraction > 0 else 0
    for n in n_grid:
        errors = np.empty(trials)
        for trial in range(trials):
            rng = np.random.default_rng(derive_seed(seed, n, trial, _STREAM_X))
            count = int(rng.binomial(n, p))
            plugin = two_point_plugin_value(count, n, radius, r, k)
            errors[trial] = abs(plugin - truth)
            if stride and trial % stride == 0:
                atoms = np.zeros((n, 1))
                atoms[:count, 0] = radius
                mu_hat = DiscreteMeasure(1, atoms, np.full(n, 1.0 / n))
                nu_hat = DiscreteMeasure(1, np.zeros((n, 1)), np.full(n, 1.0 / n))
                full = compute_gw(mu_hat, nu_hat, r, k, EXPERIMENT_SOLVER).value
                dev = abs(full - plugin)
                if dev > CROSS_CHECK_TOL * max(1.0, abs(plugin)):
                    raise RuntimeError(
                        f"pipeline cross-check failed at n={n}, trial={trial}: "
                        f"plug-in {plugin!r} vs pipeline {full!r}"
                    )
                cross_dev = max(cross_dev, dev)
        per_n[n] = errors
    mean_errors = np.array([per_n[n].mean() for n in n_grid])
    slope, defined = fit_loglog_slope(n_grid, mean_errors)
    frame = RateExperiment(
        r=r, k=k,
        dist_x=DistributionSpec("two-point", 1, radius, p),
        dist_y=DistributionSpec("point-mass", 1),
        n_grid=n_grid, trials=trials, seed=seed, reference="closed_form",
    )
    halfwidth = _bootstrap_halfwidth(frame, per_n, bootstrap) if defined else float("nan")
    return RateResult(
        n_grid=n_grid,
        per_n_errors=per_n,
        mean_errors=mean_errors,
        fitted_slope=slope,
        predicted_slope=-0.5,
        slope_ci_halfwidth=halfwidth,
        slope_defined=defined,
        reference_value=truth,
        cross_check_max_dev=cross_dev,
        notes={"target": "two_point_plugin"},
    )
