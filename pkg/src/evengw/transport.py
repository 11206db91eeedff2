"""Exact discrete optimal transport with dual potentials.

The solver delegates the transportation LP to HiGHS dual simplex (an exact
pivoting method on the same polytope a network simplex walks) and reads the
Kantorovich potentials off the optimal basis duals.  Every returned solution
is checked for dual feasibility, complementary slackness, and strong duality
before it leaves this module.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

__all__ = [
    "Coupling",
    "OTSolution",
    "OTSolverError",
    "solve_ot",
    "transportation_vertices",
    "vertex_enumeration_value",
    "c_transform",
    "ot_concavity_check",
]

MARGINAL_TOL = 1e-10
FEASIBILITY_TOL = 1e-9
SLACKNESS_TOL = 1e-8
DUALITY_TOL = 1e-8
ENTRY_CLAMP = 1e-14


class OTSolverError(RuntimeError):
    """The LP backend failed or returned a solution violating an invariant."""


@dataclass(frozen=True)
class Coupling:
    """Nonnegative matrix with prescribed row and column sums."""

    mass: np.ndarray

    def __post_init__(self) -> None:
        mass = np.asarray(self.mass, dtype=float)
        if mass.ndim != 2:
            raise ValueError("coupling mass must be a matrix")
        if mass.min() < -ENTRY_CLAMP:
            raise ValueError(f"coupling has negative entry {mass.min():.3e}")
        mass = np.maximum(mass, 0.0)
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @property
    def rows(self) -> int:
        return self.mass.shape[0]

    @property
    def cols(self) -> int:
        return self.mass.shape[1]

    def row_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    def check_marginals(self, mu_w, nu_w, tol: float = MARGINAL_TOL) -> None:
        row_err = np.abs(self.row_marginal() - np.asarray(mu_w, dtype=float)).max()
        col_err = np.abs(self.col_marginal() - np.asarray(nu_w, dtype=float)).max()
        if max(row_err, col_err) > tol:
            raise ValueError(
                f"coupling marginals off by {max(row_err, col_err):.3e} (> {tol})"
            )

    @classmethod
    def independent(cls, mu_w, nu_w) -> "Coupling":
        return cls(np.outer(np.asarray(mu_w, dtype=float), np.asarray(nu_w, dtype=float)))


@dataclass(frozen=True)
class OTSolution:
    """Optimal value, plan, and a feasible dual pair (phi, psi).

    The potentials satisfy phi_i + psi_j <= cost_ij everywhere, equality on
    the support of the plan, and pair to the primal value (strong duality);
    phi is normalized to vanish at the first source atom.
    """

    value: float
    plan: Coupling
    phi: np.ndarray
    psi: np.ndarray


def _validate_weights(w, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if len(w) == 0:
        raise ValueError(f"{name} weights are empty")
    if np.any(w < 0):
        raise ValueError(f"{name} weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} weights sum to {w.sum()!r}, not a probability vector")
    return w


def solve_ot(cost, mu_w, nu_w) -> OTSolution:
    """Exact optimum of the transportation LP with dual potentials.

    Zero-weight atoms are removed before the solve and reinserted afterwards
    with zero plan mass and c-transform potentials, which keeps the returned
    dual pair feasible on the full support.
    """
    cost = np.asarray(cost, dtype=float)
    mu_w = _validate_weights(mu_w, "source")
    nu_w = _validate_weights(nu_w, "target")
    if cost.shape != (len(mu_w), len(nu_w)):
        raise ValueError(
            f"cost shape {cost.shape} does not match weights ({len(mu_w)}, {len(nu_w)})"
        )
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")

    keep_i = np.flatnonzero(mu_w > 0.0)
    keep_j = np.flatnonzero(nu_w > 0.0)
    sub_cost = cost[np.ix_(keep_i, keep_j)]
    sub_mu = mu_w[keep_i]
    sub_nu = nu_w[keep_j]
    value, sub_plan, sub_phi, sub_psi = _solve_dense(sub_cost, sub_mu, sub_nu)

    plan = np.zeros_like(cost)
    plan[np.ix_(keep_i, keep_j)] = sub_plan
    phi = np.empty(len(mu_w))
    psi = np.empty(len(nu_w))
    phi[keep_i] = sub_phi
    psi[keep_j] = sub_psi
    dropped_i = np.setdiff1d(np.arange(len(mu_w)), keep_i)
    dropped_j = np.setdiff1d(np.arange(len(nu_w)), keep_j)
    if len(dropped_i):
        # c-transform against the solved psi keeps phi_i + psi_j <= c_ij
        phi[dropped_i] = (cost[np.ix_(dropped_i, keep_j)] - sub_psi[None, :]).min(axis=1)
    if len(dropped_j):
        psi[dropped_j] = (cost[:, dropped_j] - phi[:, None]).min(axis=0)

    shift = phi[0]
    phi = phi - shift
    psi = psi + shift
    solution = OTSolution(value=value, plan=Coupling(plan), phi=phi, psi=psi)
    _assert_invariants(solution, cost, mu_w, nu_w)
    return solution


_CONSTRAINT_CACHE: dict = {}


def _constraint_matrix(n_x: int, n_y: int):
    """Equality rows of the transportation LP, cached per support shape.

    All source marginals plus all but the last target marginal (the dropped
    constraint is implied by the rest, so its dual is pinned at zero).
    """
    key = (n_x, n_y)
    cached = _CONSTRAINT_CACHE.get(key)
    if cached is None:
        from scipy.sparse import csr_matrix

        cells = np.arange(n_x * n_y)
        row_idx = cells // n_y
        col_idx = cells % n_y
        keep = col_idx < n_y - 1
        rows = np.concatenate([row_idx, n_x + col_idx[keep]])
        cols = np.concatenate([cells, cells[keep]])
        cached = csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(n_x + n_y - 1, n_x * n_y)
        )
        if len(_CONSTRAINT_CACHE) > 64:
            _CONSTRAINT_CACHE.clear()
        _CONSTRAINT_CACHE[key] = cached
    return cached


def _solve_dense(cost, mu_w, nu_w):
    n_x, n_y = cost.shape
    if n_x == 1 and n_y == 1:
        return float(cost[0, 0]), np.array([[1.0]]), np.zeros(1), np.array([float(cost[0, 0])])
    a_eq = _constraint_matrix(n_x, n_y)
    b_eq = np.concatenate([mu_w, nu_w[:-1]])
    res = linprog(
        cost.ravel(),
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs-ds",
        options={
            # 1e-10 is the tightest value HiGHS accepts for these
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if res.status != 0:
        raise OTSolverError(f"transportation LP failed with status {res.status}: {res.message}")
    plan = np.maximum(res.x.reshape(n_x, n_y), 0.0)
    duals = np.asarray(res.eqlin.marginals, dtype=float)
    phi = duals[:n_x]
    psi = np.append(duals[n_x:], 0.0)
    value = float(np.sum(plan * cost))
    return value, plan, phi, psi


def _assert_invariants(sol: OTSolution, cost, mu_w, nu_w) -> None:
    plan = sol.plan.mass
    scale = max(1.0, float(np.abs(cost).max()))
    row_err = np.abs(plan.sum(axis=1) - mu_w).max()
    col_err = np.abs(plan.sum(axis=0) - nu_w).max()
    if max(row_err, col_err) > MARGINAL_TOL:
        raise OTSolverError(f"plan marginals off by {max(row_err, col_err):.3e}")
    slack = cost - sol.phi[:, None] - sol.psi[None, :]
    if slack.min() < -FEASIBILITY_TOL * scale:
        raise OTSolverError(f"dual infeasible: min slack {slack.min():.3e}")
    support = plan > 1e-12
    if support.any() and np.abs(slack[support]).max() > SLACKNESS_TOL * scale:
        raise OTSolverError(
            f"complementary slackness violated by {np.abs(slack[support]).max():.3e}"
        )
    dual_value = float(mu_w @ sol.phi + nu_w @ sol.psi)
    if abs(dual_value - sol.value) > DUALITY_TOL * scale:
        raise OTSolverError(
            f"duality gap {abs(dual_value - sol.value):.3e} exceeds tolerance"
        )


def transportation_vertices(mu_w, nu_w, tol: float = 1e-12) -> list[np.ndarray]:
    """All vertices of the transportation polytope, by basis enumeration.

    Enumerates the size n_x + n_y - 1 cell subsets (spanning-tree candidates
    of the bipartite graph), solves each square system, and keeps the
    feasible solutions.  Exponential; intended for small supports only.
    """
    mu_w = _validate_weights(mu_w, "source")
    nu_w = _validate_weights(nu_w, "target")
    n_x, n_y = len(mu_w), len(nu_w)
    n_basic = n_x + n_y - 1
    b = np.concatenate([mu_w, nu_w[:-1]])
    cells = list(itertools.product(range(n_x), range(n_y)))
    vertices: list[np.ndarray] = []
    seen: set[bytes] = set()
    for subset in itertools.combinations(range(len(cells)), n_basic):
        a = np.zeros((n_basic, n_basic))
        for col, idx in enumerate(subset):
            i, j = cells[idx]
            a[i, col] = 1.0
            if j < n_y - 1:
                a[n_x + j, col] = 1.0
        try:
            x = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            continue
        if x.min() < -tol:
            continue
        plan = np.zeros((n_x, n_y))
        for col, idx in enumerate(subset):
            i, j = cells[idx]
            plan[i, j] = max(x[col], 0.0)
        key = np.round(plan, 12).tobytes()
        if key not in seen:
            seen.add(key)
            vertices.append(plan)
    return vertices


def vertex_enumeration_value(cost, mu_w, nu_w) -> tuple[float, np.ndarray]:
    """Exact LP optimum by scanning all vertices; the solver's test oracle."""
    cost = np.asarray(cost, dtype=float)
    best_value, best_plan = np.inf, None
    for plan in transportation_vertices(mu_w, nu_w):
        value = float(np.sum(plan * cost))
        if value < best_value:
            best_value, best_plan = value, plan
    if best_plan is None:
        raise OTSolverError("no feasible vertex found")
    return best_value, best_plan


def c_transform(cost_matrix, f) -> np.ndarray:
    """Transform a potential on the source grid to one on the target grid.

    Returns g with g[j] = min_i (cost[i, j] - f[i]); the infimum over the
    discrete source grid of the cost minus the potential.
    """
    cost_matrix = np.asarray(cost_matrix, dtype=float)
    f = np.asarray(f, dtype=float).ravel()
    if cost_matrix.ndim != 2 or cost_matrix.shape[0] != len(f):
        raise ValueError("cost matrix rows must match the potential grid")
    if cost_matrix.shape[0] == 0 or cost_matrix.shape[1] == 0:
        raise ValueError("grids must be nonempty")
    return (cost_matrix - f[:, None]).min(axis=0)


def ot_concavity_check(costs, mu_w, nu_w, mix: float) -> bool:
    """Whether OT(mix c1 + (1-mix) c2) >= mix OT(c1) + (1-mix) OT(c2) - 1e-9."""
    c1, c2 = (np.asarray(c, dtype=float) for c in costs)
    if c1.shape != c2.shape:
        raise ValueError(f"cost shapes differ: {c1.shape} vs {c2.shape}")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    blended = solve_ot(mix * c1 + (1.0 - mix) * c2, mu_w, nu_w).value
    split = mix * solve_ot(c1, mu_w, nu_w).value + (1.0 - mix) * solve_ot(c2, mu_w, nu_w).value
    return blended >= split - 1e-9
