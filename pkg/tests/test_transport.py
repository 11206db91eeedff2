import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evengw.transport import (
    Coupling,
    OTSolverError,
    c_transform,
    ot_concavity_check,
    solve_ot,
    transportation_vertices,
    vertex_enumeration_value,
)

FEAS_TOL = 1e-9
CS_TOL = 1e-8
DUAL_TOL = 1e-8


def assert_solution_invariants(sol, cost, mu_w, nu_w):
    plan = sol.plan.mass
    assert np.abs(plan.sum(axis=1) - mu_w).max() < 1e-10
    assert np.abs(plan.sum(axis=0) - nu_w).max() < 1e-10
    assert plan.min() >= 0.0
    slack = cost - sol.phi[:, None] - sol.psi[None, :]
    assert slack.min() >= -FEAS_TOL
    support = plan > 1e-12
    if support.any():
        assert np.abs(slack[support]).max() <= CS_TOL
    assert abs(sol.value - float(np.sum(plan * cost))) <= DUAL_TOL
    assert abs(sol.value - float(mu_w @ sol.phi + nu_w @ sol.psi)) <= DUAL_TOL
    assert sol.phi[0] == 0.0


class TestSolveOT:
    def test_one_by_one(self):
        sol = solve_ot(np.array([[3.5]]), [1.0], [1.0])
        assert sol.value == 3.5
        assert np.array_equal(sol.plan.mass, [[1.0]])

    def test_identity_cost_prefers_diagonal(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        w = np.array([0.5, 0.5])
        sol = solve_ot(cost, w, w)
        assert abs(sol.value) < 1e-12
        assert np.allclose(sol.plan.mass, np.diag(w))
        assert_solution_invariants(sol, cost, w, w)

    def test_anti_identity(self):
        cost = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([0.5, 0.5])
        sol = solve_ot(cost, w, w)
        assert abs(sol.value) < 1e-12
        assert np.allclose(sol.plan.mass, [[0.0, 0.5], [0.5, 0.0]])

    def test_matches_vertex_oracle_on_rational_corpus(self):
        rng = np.random.default_rng(12)
        for trial in range(25):
            n_x = int(rng.integers(2, 5))
            n_y = int(rng.integers(2, 5))
            mu_w = _rational_weights(rng, n_x)
            nu_w = _rational_weights(rng, n_y)
            cost = rng.uniform(0, 1, (n_x, n_y))
            sol = solve_ot(cost, mu_w, nu_w)
            oracle, _ = vertex_enumeration_value(cost, mu_w, nu_w)
            assert abs(sol.value - oracle) <= 1e-10
            assert_solution_invariants(sol, cost, mu_w, nu_w)

    def test_zero_weight_atoms(self):
        cost = np.array([[1.0, 2.0, 0.5], [0.0, 3.0, 1.0], [9.0, 9.0, 9.0]])
        mu_w = np.array([0.5, 0.5, 0.0])
        nu_w = np.array([0.25, 0.0, 0.75])
        sol = solve_ot(cost, mu_w, nu_w)
        assert sol.plan.mass[2].max() == 0.0
        assert sol.plan.mass[:, 1].max() == 0.0
        assert_solution_invariants(sol, cost, mu_w, nu_w)

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError, match="probability"):
            solve_ot(np.zeros((2, 2)), [0.7, 0.7], [0.5, 0.5])
        with pytest.raises(ValueError, match="nonnegative"):
            solve_ot(np.zeros((2, 2)), [1.5, -0.5], [0.5, 0.5])

    def test_nonfinite_cost_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            solve_ot(np.array([[np.inf, 0.0], [0.0, 0.0]]), [0.5, 0.5], [0.5, 0.5])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            solve_ot(np.zeros((2, 3)), [0.5, 0.5], [0.5, 0.5])


class TestCouplingType:
    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            Coupling(np.array([[0.5, -0.1], [0.3, 0.3]]))

    def test_tiny_negatives_clamped(self):
        c = Coupling(np.array([[0.5, -1e-15], [0.25, 0.25]]))
        assert c.mass.min() == 0.0

    def test_marginal_check(self):
        c = Coupling.independent([0.5, 0.5], [0.25, 0.75])
        c.check_marginals([0.5, 0.5], [0.25, 0.75])
        with pytest.raises(ValueError, match="marginals"):
            c.check_marginals([0.6, 0.4], [0.25, 0.75])


class TestVertexEnumeration:
    def test_two_by_two_uniform(self):
        vertices = transportation_vertices([0.5, 0.5], [0.5, 0.5])
        mats = {tuple(np.round(v.ravel(), 12)) for v in vertices}
        assert (0.5, 0.0, 0.0, 0.5) in mats
        assert (0.0, 0.5, 0.5, 0.0) in mats

    def test_three_by_three_uniform_contains_permutations(self):
        w = [1 / 3] * 3
        vertices = transportation_vertices(w, w)
        perms = 0
        for v in vertices:
            if np.allclose(np.sort(v.ravel())[-3:], 1 / 3) and np.isclose(v.max(), 1 / 3):
                perms += 1
        assert perms >= 6

    def test_every_vertex_feasible(self):
        rng = np.random.default_rng(5)
        mu_w = _rational_weights(rng, 3)
        nu_w = _rational_weights(rng, 4)
        for v in transportation_vertices(mu_w, nu_w):
            assert v.min() >= 0.0
            assert np.abs(v.sum(axis=1) - mu_w).max() < 1e-10
            assert np.abs(v.sum(axis=0) - nu_w).max() < 1e-10


class TestCTransform:
    def test_zero_cost_zero_potential(self):
        out = c_transform(np.zeros((3, 4)), np.zeros(3))
        assert np.array_equal(out, np.zeros(4))

    def test_shift_equivariance(self):
        rng = np.random.default_rng(8)
        cost = rng.uniform(-1, 1, (5, 4))
        f = rng.uniform(-1, 1, 5)
        baseline = c_transform(cost, f)
        shifted = c_transform(cost, f + 2.5)
        assert np.allclose(shifted, baseline - 2.5)

    @given(
        st.integers(2, 6),
        st.integers(2, 6),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_contraction(self, n_x, n_y, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(-2, 2, (n_x, n_y))
        f1 = rng.uniform(-3, 3, n_x)
        f2 = rng.uniform(-3, 3, n_x)
        gap = np.abs(c_transform(cost, f1) - c_transform(cost, f2)).max()
        assert gap <= np.abs(f1 - f2).max() + 1e-12

    def test_double_transform_idempotent(self):
        rng = np.random.default_rng(21)
        cost = rng.uniform(-1, 1, (5, 6))
        f = rng.uniform(-1, 1, 5)
        psi = c_transform(cost, f)
        f_back = c_transform(cost.T, psi)
        psi_again = c_transform(cost, f_back)
        assert np.abs(psi_again - psi).max() <= 1e-12

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            c_transform(np.zeros((0, 3)), np.zeros(0))


class TestConcavity:
    def test_equal_costs(self):
        c = np.random.default_rng(0).uniform(0, 1, (3, 3))
        w = np.full(3, 1 / 3)
        assert ot_concavity_check((c, c), w, w, 0.5)

    def test_degenerate_mix(self):
        rng = np.random.default_rng(1)
        c1 = rng.uniform(0, 1, (3, 3))
        c2 = rng.uniform(0, 1, (3, 3))
        w = np.full(3, 1 / 3)
        assert ot_concavity_check((c1, c2), w, w, 0.0)
        assert ot_concavity_check((c1, c2), w, w, 1.0)

    def test_random_midpoint(self):
        rng = np.random.default_rng(2)
        w4 = np.full(4, 0.25)
        for _ in range(10):
            c1 = rng.uniform(0, 1, (4, 4))
            c2 = rng.uniform(0, 1, (4, 4))
            assert ot_concavity_check((c1, c2), w4, w4, 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            ot_concavity_check((np.zeros((2, 2)), np.zeros((2, 3))), [0.5, 0.5], [0.5, 0.5], 0.5)


def _rational_weights(rng, n):
    # denominators at most 6, entries positive
    denom = int(rng.integers(n, 7))
    cuts = np.sort(rng.choice(np.arange(1, denom), size=n - 1, replace=False))
    parts = np.diff(np.concatenate([[0], cuts, [denom]]))
    return parts / denom
