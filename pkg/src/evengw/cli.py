"""Command-line front end: compute, decompose, rate, and selftest workflows.

Configuration precedence is flags over config file over built-in defaults,
and the effective configuration is echoed into every emitted artifact.
Progress goes to stderr; machine-readable output goes to files and stdout.

Exit codes: 0 success, 1 malformed input, 2 configured cap exceeded,
3 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import expansion
from . import dualization
from . import transport
from .measures import (
    DiscreteMeasure,
    normalize_pair,
    parse_distribution,
    sample,
)
from .expansion import TermCapExceeded
from .dualization import BasisCapExceeded
from .solvers import SolverConfig, compute_gw, solve_brute_force, solve_frank_wolfe
from .rates import RateExperiment, lower_bound_exact, run_rate_experiment

SCHEMA_VERSION = "evengw-1"

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_CAP = 2
EXIT_SELFTEST = 3

DEFAULTS = {
    "seed": 0,
    "restarts": 10,
    "max_iters": 500,
    "fw_tol": 1e-9,
    "threads": 1,
    "trials": 200,
    "reference": "closed_form",
    "verbosity": 1,
}


def _log(cfg, msg: str) -> None:
    if cfg.get("verbosity", 1) > 0:
        print(msg, file=sys.stderr)


def _effective_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    env_seed = os.environ.get("EVENGW_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            cfg.update(json.load(fh))
    for key, val in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if val is not None:
            cfg[key] = val
    return cfg


def _solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(
        restarts=int(cfg["restarts"]),
        max_iters=int(cfg["max_iters"]),
        fw_tol=float(cfg["fw_tol"]),
        seed=int(cfg["seed"]),
    )


def _write_json(path: str, doc: dict, cfg: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "config": _public_config(cfg), **doc}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _public_config(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if isinstance(v, (int, float, str, bool))}


# ----------------------------------------------------------------------


def run_compute(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    try:
        mu = _load_measure(cfg["mu"])
        nu = _load_measure(cfg["nu"])
        r, k = int(cfg["r"]), int(cfg["k"])
    except (KeyError, TypeError):
        print("compute requires --mu, --nu, --r, --k", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    _log(cfg, f"solving (r={r}, k={k}) on supports {mu.n} x {nu.n}")
    try:
        result = compute_gw(mu, nu, r, k, _solver_config(cfg))
    except (TermCapExceeded, BasisCapExceeded) as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ValueError as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    doc = {
        "r": r,
        "k": k,
        "value": result.value,
        "marginal_part": result.marginal_part,
        "coupling_part": result.coupling_part,
        "method": result.method,
        "restarts_used": result.restarts_used,
        "converged": result.converged,
        "plan": result.plan.mass.tolist(),
    }
    if result.dual_params is not None:
        doc["dual_params"] = {
            "u": result.dual_params[0].tolist(),
            "v": result.dual_params[1].tolist(),
        }
    if cfg.get("out"):
        _write_json(cfg["out"], doc, cfg)
        _log(cfg, f"wrote {cfg['out']}")
    print(f"value={result.value!r} method={result.method}")
    return EXIT_OK


def _load_measure(path: str) -> DiscreteMeasure:
    if path is None:
        raise KeyError("measure path")
    if not os.path.exists(path):
        raise OSError(f"measure file not found: {path}")
    if path.endswith(".csv"):
        return DiscreteMeasure.from_csv(path)
    return DiscreteMeasure.load_json(path)


def run_decompose(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    try:
        r, k = int(cfg["r"]), int(cfg["k"])
        d_x, d_y = int(cfg["dx"]), int(cfg["dy"])
    except (KeyError, TypeError):
        print("decompose requires --r, --k, --dx, --dy", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        exp = expansion.expand_kernel(r, k, d_x, d_y)
    except TermCapExceeded as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except ValueError as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    marginal_terms = sum(1 for t in exp.terms if t.marginal_only)
    _log(cfg, f"expansion: {exp.term_count} terms ({marginal_terms} marginal-only)")
    if cfg.get("out_expansion"):
        _write_json(cfg["out_expansion"], exp.to_json_dict(), cfg)
        _log(cfg, f"wrote {cfg['out_expansion']}")
    try:
        q = dualization.build_quadratic_form(exp)
        family_doc, summary = _family_artifact(q, cfg)
    except BasisCapExceeded as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    print(
        f"terms={exp.term_count} marginal_only={marginal_terms} "
        f"basis={q.size} {summary}"
    )
    if cfg.get("out_family"):
        _write_json(cfg["out_family"], family_doc, cfg)
        _log(cfg, f"wrote {cfg['out_family']}")
    return EXIT_OK


def _family_artifact(q, cfg: dict) -> tuple[dict, str]:
    mu_path, nu_path = cfg.get("mu"), cfg.get("nu")
    if mu_path and nu_path:
        mu = _load_measure(mu_path)
        nu = _load_measure(nu_path)
        mu0, nu0, _, _ = normalize_pair(mu, nu)
        fam = dualization.build_cost_family(q, mu0.atoms, nu0.atoms)
        doc = fam.to_json_dict()
        doc["boxes_from_supports"] = [mu_path, nu_path]
    else:
        spectral = dualization.eigendecompose(q)
        fam = None
        doc = {
            "count": int(spectral.count),
            "ell": int(spectral.positive_count),
            "eigvals": spectral.eigvals.tolist(),
            "note": "boxes omitted: no supports provided",
        }
    lam = np.asarray(doc["eigvals"])
    ell = doc["ell"]
    summary = (
        f"J={doc['count']} ell={ell} "
        f"max_eig={lam.max() if len(lam) else 0.0:.6g} "
        f"min_eig={lam.min() if len(lam) else 0.0:.6g}"
    )
    return doc, summary


def run_rate(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    try:
        dist_x = parse_distribution(cfg["dist_x"])
        dist_y = parse_distribution(cfg["dist_y"])
        n_grid = tuple(int(tok) for tok in str(cfg["n_grid"]).split(","))
        experiment = RateExperiment(
            r=int(cfg["r"]),
            k=int(cfg["k"]),
            dist_x=dist_x,
            dist_y=dist_y,
            n_grid=n_grid,
            trials=int(cfg["trials"]),
            seed=int(cfg["seed"]),
            reference=str(cfg["reference"]),
        )
    except (KeyError, TypeError):
        print("rate requires --r, --k, --dist-x, --dist-y, --n-grid", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ValueError as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    _log(cfg, f"running rate experiment over n_grid={n_grid}, trials={experiment.trials}")
    try:
        result = run_rate_experiment(experiment, threads=int(cfg["threads"]))
    except (TermCapExceeded, BasisCapExceeded) as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    if cfg.get("out_csv"):
        result.write_errors_csv(cfg["out_csv"])
        _log(cfg, f"wrote {cfg['out_csv']}")
    if cfg.get("out_json"):
        _write_json(cfg["out_json"], result.to_json_dict(), cfg)
        _log(cfg, f"wrote {cfg['out_json']}")
    slope = result.fitted_slope if result.slope_defined else float("nan")
    print(
        f"fitted_slope={slope!r} predicted_slope={result.predicted_slope!r} "
        f"ci_halfwidth={result.slope_ci_halfwidth!r}"
    )
    return EXIT_OK


# ----------------------------------------------------------------------


def run_selftest(args: argparse.Namespace) -> int:
    cfg = _effective_config(args)
    checks = [
        ("closed_form_values", _check_closed_form),
        ("expansion_identity", _check_expansion_identity),
        ("decomposition_identity", _check_decomposition_identity),
        ("signed_eigen_identity", _check_signed_eigen),
        ("transport_exactness", _check_transport),
        ("transform_contraction", _check_contraction),
        ("invariances", _check_invariances),
        ("small_instance_agreement", _check_small_agreement),
    ]
    failures = 0
    for name, check in checks:
        try:
            check(int(cfg["seed"]))
        except Exception as exc:  # report and continue through the list
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    return EXIT_SELFTEST if failures else EXIT_OK


def _check_closed_form(seed: int) -> None:
    for p, radius, r, k in [(0.25, 1.0, 1, 1), (0.25, 3.0, 1, 2), (0.5, 3.0, 2, 1)]:
        atoms = np.zeros((2, 1))
        atoms[1, 0] = radius
        mu = DiscreteMeasure(1, atoms, np.array([1 - p, p]))
        nu = DiscreteMeasure(1, np.zeros((1, 1)), np.ones(1))
        want = lower_bound_exact(p, radius, r, k)
        got = compute_gw(mu, nu, r, k).value
        if abs(got - want) > 1e-9 * max(1.0, abs(want)):
            raise AssertionError(f"(p={p}, R={radius}, r={r}, k={k}): {got!r} != {want!r}")


def _check_expansion_identity(seed: int) -> None:
    rng = np.random.default_rng(seed)
    for r, k, d_x, d_y in [(1, 1, 1, 1), (1, 2, 2, 1), (2, 1, 2, 2)]:
        exp = expansion.expand_kernel(r, k, d_x, d_y)
        for _ in range(40):
            x, xp = rng.uniform(-1, 1, (2, d_x))
            y, yp = rng.uniform(-1, 1, (2, d_y))
            got = exp.evaluate(x, xp, y, yp)
            want = expansion.kernel_direct(x, xp, y, yp, r, k)
            if abs(got - want) > 1e-10 * max(1.0, abs(want)):
                raise AssertionError(
                    f"term sum {got!r} != kernel {want!r} at (r={r}, k={k})"
                )


def _check_decomposition_identity(seed: int) -> None:
    rng = np.random.default_rng(seed + 1)
    from .measures import empirical_from_samples

    mu = empirical_from_samples(rng.uniform(-1, 1, (4, 2)))
    nu = empirical_from_samples(rng.uniform(-1, 1, (3, 1)))
    exp = expansion.expand_kernel(1, 1, 2, 1)
    for _ in range(5):
        raw = rng.uniform(0.2, 1.0, (4, 3))
        plan = raw / raw.sum() * 1.0
        from .solvers import _project_to_polytope

        plan = _project_to_polytope(plan, mu.weights, nu.weights)
        lhs = expansion.marginal_value(exp, mu, nu) + expansion.coupling_value_direct(
            exp, plan, mu, nu
        )
        rhs = expansion.gw_objective_bruteforce(mu, nu, plan, 1, 1)
        if abs(lhs - rhs) > 1e-9 * max(1.0, abs(rhs)):
            raise AssertionError(f"split {lhs!r} != quadruple sum {rhs!r}")


def _check_signed_eigen(seed: int) -> None:
    rng = np.random.default_rng(seed + 2)
    from .measures import empirical_from_samples
    from .solvers import _project_to_polytope

    mu = empirical_from_samples(rng.uniform(-1, 1, (3, 2)))
    nu = empirical_from_samples(rng.uniform(-1, 1, (3, 2)))
    exp = expansion.expand_kernel(1, 1, 2, 2)
    q = dualization.build_quadratic_form(exp)
    fam = dualization.build_cost_family(q, mu.atoms, nu.atoms)
    p_vals = fam.evaluate_polys(mu.atoms, nu.atoms)
    for _ in range(5):
        plan = _project_to_polytope(rng.uniform(0.1, 1.0, (3, 3)), mu.weights, nu.weights)
        m = np.einsum("pij,ij->p", p_vals, plan)
        signed = float(m[: fam.ell] @ m[: fam.ell] - m[fam.ell :] @ m[fam.ell :])
        direct = expansion.coupling_value_direct(exp, plan, mu, nu)
        if abs(signed - direct) > 1e-8 * max(1.0, abs(direct)):
            raise AssertionError(f"signed split {signed!r} != coupling sum {direct!r}")


def _check_transport(seed: int) -> None:
    rng = np.random.default_rng(seed + 3)
    cost = rng.uniform(0, 1, (3, 3))
    w = np.full(3, 1 / 3)
    sol = transport.solve_ot(cost, w, w)
    oracle, _ = transport.vertex_enumeration_value(cost, w, w)
    if abs(sol.value - oracle) > 1e-10:
        raise AssertionError(f"LP value {sol.value!r} != vertex oracle {oracle!r}")


def _check_contraction(seed: int) -> None:
    rng = np.random.default_rng(seed + 4)
    cost = rng.uniform(-1, 1, (6, 5))
    for _ in range(20):
        f1 = rng.uniform(-1, 1, 6)
        f2 = rng.uniform(-1, 1, 6)
        lhs = np.abs(
            transport.c_transform(cost, f1) - transport.c_transform(cost, f2)
        ).max()
        if lhs > np.abs(f1 - f2).max() + 1e-12:
            raise AssertionError("transform is not a sup-norm contraction")


def _check_invariances(seed: int) -> None:
    rng = np.random.default_rng(seed + 5)
    from .measures import empirical_from_samples

    mu = empirical_from_samples(rng.uniform(-1, 1, (3, 2)))
    nu = empirical_from_samples(rng.uniform(-1, 1, (3, 1)))
    base = compute_gw(mu, nu, 1, 1).value
    shifted = compute_gw(mu.translated([2.0, -1.0]), nu.translated([5.0]), 1, 1).value
    if abs(base - shifted) > 1e-9 * max(1.0, abs(base)):
        raise AssertionError(f"translation changed value: {base!r} -> {shifted!r}")
    dilated = compute_gw(mu.scaled(2.0), nu.scaled(2.0), 1, 1).value
    if abs(dilated - 16.0 * base) > 1e-8 * max(1.0, abs(dilated)):
        raise AssertionError(f"dilation covariance broken: {dilated!r} vs {16 * base!r}")


def _check_small_agreement(seed: int) -> None:
    rng = np.random.default_rng(seed + 6)
    from .measures import empirical_from_samples

    mu = empirical_from_samples(rng.uniform(-1, 1, (2, 1)))
    nu = empirical_from_samples(rng.uniform(-1, 1, (2, 1)))
    mu0, nu0, rec, _ = normalize_pair(mu, nu)
    scale = rec.scale**4
    oracle = solve_brute_force(mu0, nu0, 1, 1).value * scale
    pipeline = compute_gw(mu, nu, 1, 1).value
    if abs(pipeline - oracle) > 1e-6 * max(1.0, abs(oracle)):
        raise AssertionError(f"pipeline {pipeline!r} != oracle {oracle!r}")


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evengw",
        description="Even-order Gromov-Wasserstein functionals on discrete measures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags take precedence)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--verbosity", type=int, default=None)

    p_compute = sub.add_parser("compute", parents=[common], help="solve one instance")
    p_compute.add_argument("--mu", help="source measure (JSON or CSV)")
    p_compute.add_argument("--nu", help="target measure (JSON or CSV)")
    p_compute.add_argument("--r", type=int)
    p_compute.add_argument("--k", type=int)
    p_compute.add_argument("--out", help="result JSON path")
    p_compute.add_argument("--restarts", type=int, default=None)
    p_compute.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p_compute.add_argument("--fw-tol", dest="fw_tol", type=float, default=None)
    p_compute.set_defaults(func=run_compute)

    p_dec = sub.add_parser("decompose", parents=[common], help="dump expansion and dual family")
    p_dec.add_argument("--r", type=int)
    p_dec.add_argument("--k", type=int)
    p_dec.add_argument("--dx", type=int)
    p_dec.add_argument("--dy", type=int)
    p_dec.add_argument("--mu", help="optional support source for the boxes")
    p_dec.add_argument("--nu", help="optional support source for the boxes")
    p_dec.add_argument("--out-expansion", dest="out_expansion")
    p_dec.add_argument("--out-family", dest="out_family")
    p_dec.set_defaults(func=run_decompose)

    p_rate = sub.add_parser("rate", parents=[common], help="run a rate experiment")
    p_rate.add_argument("--r", type=int)
    p_rate.add_argument("--k", type=int)
    p_rate.add_argument("--dist-x", dest="dist_x")
    p_rate.add_argument("--dist-y", dest="dist_y")
    p_rate.add_argument("--n-grid", dest="n_grid")
    p_rate.add_argument("--trials", type=int, default=None)
    p_rate.add_argument("--reference", choices=["closed_form", "self_zero", "high_n_estimate"], default=None)
    p_rate.add_argument("--threads", type=int, default=None)
    p_rate.add_argument("--out-csv", dest="out_csv")
    p_rate.add_argument("--out-json", dest="out_json")
    p_rate.set_defaults(func=run_rate)

    p_self = sub.add_parser("selftest", parents=[common], help="fast acceptance subset")
    p_self.set_defaults(func=run_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
