import numpy as np
import pytest

from evengw.measures import empirical_from_samples
from evengw.expansion import coupling_value_direct, expand_kernel
from evengw.dualization import (
    BasisCapExceeded,
    MixedBasis,
    build_cost_family,
    build_quadratic_form,
    cost_eval,
    eigendecompose,
    jacobi_eigh,
    transform_potential,
    QuadraticEvaluator,
)
from evengw.solvers import _project_to_polytope
from evengw import transport


def random_coupling(rng, mu, nu):
    raw = rng.uniform(0.05, 1.0, (mu.n, nu.n))
    return _project_to_polytope(raw / raw.sum(), mu.weights, nu.weights)


class TestQuadraticForm:
    def test_basis_starts_with_constant_and_contains_mixed_pairs(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        assert q.basis.entries[0] == ((0,), (0,))
        assert ((1,), (1,)) in q.basis.entries
        assert ((2,), (2,)) in q.basis.entries
        assert q.size == 7

    def test_symmetry(self):
        for args in [(1, 1, 1, 1), (1, 2, 2, 1), (2, 1, 2, 2)]:
            q = build_quadratic_form(expand_kernel(*args))
            assert q.symmetry_defect() <= 1e-14

    def test_cap(self):
        with pytest.raises(BasisCapExceeded, match="cap of 3"):
            build_quadratic_form(expand_kernel(1, 1, 1, 1), basis_cap=3)

    @pytest.mark.parametrize("r,k,d_x,d_y", [(1, 1, 1, 1), (1, 1, 2, 2), (2, 1, 2, 1), (1, 2, 1, 2)])
    def test_value_matches_coupling_sum(self, r, k, d_x, d_y):
        rng = np.random.default_rng(3)
        exp = expand_kernel(r, k, d_x, d_y)
        q = build_quadratic_form(exp)
        mu = empirical_from_samples(rng.uniform(-1, 1, (4, d_x)))
        nu = empirical_from_samples(rng.uniform(-1, 1, (3, d_y)))
        ev = QuadraticEvaluator(q, mu, nu)
        for _ in range(25):
            plan = random_coupling(rng, mu, nu)
            direct = coupling_value_direct(exp, plan, mu, nu)
            assert abs(ev.value(plan) - direct) <= 1e-9 * max(1.0, abs(direct))

    def test_point_mass_coupling_value_zero(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        delta = empirical_from_samples([[0.0]])
        ev = QuadraticEvaluator(q, delta, delta)
        plan = np.array([[1.0]])
        assert ev.value(plan) == 0.0
        # only the constant basis entry is active at the origin
        u = ev.moment_vector(plan)
        assert u[0] == 1.0
        assert np.abs(u[1:]).max() == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        exp = expand_kernel(1, 1, 2, 1)
        q = build_quadratic_form(exp)
        mu = empirical_from_samples(rng.uniform(-1, 1, (3, 2)))
        nu = empirical_from_samples(rng.uniform(-1, 1, (2, 1)))
        ev = QuadraticEvaluator(q, mu, nu)
        plan = random_coupling(rng, mu, nu)
        grad = ev.gradient(plan)
        eps = 1e-6
        for i in range(3):
            for j in range(2):
                bumped = plan.copy()
                bumped[i, j] += eps
                fd = (ev.value(bumped) - ev.value(plan)) / eps
                assert abs(fd - grad[i, j]) < 1e-4 * max(1.0, abs(grad[i, j]))


class TestJacobi:
    def test_already_diagonal(self):
        lam, u = jacobi_eigh(np.diag([2.0, -3.0]))
        assert sorted(lam) == [-3.0, 2.0]
        assert np.allclose(np.abs(u), np.eye(2))

    def test_textbook_two_by_two(self):
        lam, u = jacobi_eigh(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(sorted(lam), [-1.0, 1.0])
        for row in u:
            assert np.allclose(np.abs(row), [np.sqrt(0.5)] * 2)

    def test_random_reconstruction_and_orthogonality(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((20, 20))
        a = (a + a.T) / 2
        lam, u = jacobi_eigh(a)
        norm = np.linalg.norm(a)
        assert np.linalg.norm(u.T @ np.diag(lam) @ u - a) <= 1e-10 * norm
        assert np.linalg.norm(u @ u.T - np.eye(20)) <= 1e-10
        assert np.allclose(np.sort(lam), np.sort(np.linalg.eigvalsh(a)), atol=1e-10)

    def test_off_diagonal_mass_target(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((40, 40))
        a = (a + a.T) / 2
        # jacobi_eigh diagonalizes a copy; re-derive the final off-mass
        lam, u = jacobi_eigh(a)
        final = u @ a @ u.T
        off = np.sqrt(np.linalg.norm(final) ** 2 - np.linalg.norm(np.diag(final)) ** 2)
        assert off <= 1e-12 * np.linalg.norm(a)

    def test_nonsymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            jacobi_eigh(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestEigendecompose:
    def test_split_and_ordering(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        spec = eigendecompose(q)
        lam = spec.eigvals
        ell = spec.positive_count
        assert ell >= 1 and spec.count >= 2
        assert np.all(lam[:ell] > 0) and np.all(lam[ell:] < 0)
        assert np.all(np.diff(lam[:ell]) <= 1e-12)  # positives descending
        assert np.all(np.diff(lam[ell:]) >= -1e-12)  # negatives ascending

    def test_deterministic(self):
        q = build_quadratic_form(expand_kernel(1, 1, 2, 1))
        a = eigendecompose(q)
        b = eigendecompose(q)
        assert np.array_equal(a.eigvals, b.eigvals)
        assert np.array_equal(a.vectors, b.vectors)

    def test_dense_cap(self):
        q = build_quadratic_form(expand_kernel(1, 1, 2, 2))
        with pytest.raises(BasisCapExceeded):
            eigendecompose(q, dense_cap=q.size - 1)

    def test_zero_tolerance_drops_null_directions(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        spec = eigendecompose(q, zero_tol=1e-9)
        assert np.abs(spec.eigvals).min() > 1e-9 * np.abs(spec.eigvals).max()


class TestCostFamily:
    @pytest.mark.parametrize("r,k,d_x,d_y", [(1, 1, 1, 1), (1, 1, 2, 2), (2, 1, 2, 1)])
    def test_signed_identity(self, r, k, d_x, d_y):
        rng = np.random.default_rng(7)
        exp = expand_kernel(r, k, d_x, d_y)
        q = build_quadratic_form(exp)
        mu = empirical_from_samples(rng.uniform(-1, 1, (4, d_x)))
        nu = empirical_from_samples(rng.uniform(-1, 1, (4, d_y)))
        fam = build_cost_family(q, mu.atoms, nu.atoms)
        p_vals = fam.evaluate_polys(mu.atoms, nu.atoms)
        for _ in range(25):
            plan = random_coupling(rng, mu, nu)
            m = np.einsum("pij,ij->p", p_vals, plan)
            signed = float(m[: fam.ell] @ m[: fam.ell] - m[fam.ell :] @ m[fam.ell :])
            direct = coupling_value_direct(exp, plan, mu, nu)
            assert abs(signed - direct) <= 1e-8 * max(1.0, abs(direct))

    def test_box_containment(self):
        rng = np.random.default_rng(8)
        exp = expand_kernel(1, 1, 2, 1)
        q = build_quadratic_form(exp)
        mu = empirical_from_samples(rng.uniform(-1, 1, (5, 2)))
        nu = empirical_from_samples(rng.uniform(-1, 1, (4, 1)))
        fam = build_cost_family(q, mu.atoms, nu.atoms)
        p_vals = fam.evaluate_polys(mu.atoms, nu.atoms)
        halves = np.concatenate([fam.box_plus, fam.box_minus])
        for _ in range(40):
            plan = random_coupling(rng, mu, nu)
            m = np.einsum("pij,ij->p", p_vals, plan)
            assert np.all(np.abs(m) / 2.0 <= halves + 1e-12)

    def test_basis_sup_is_exact_max(self):
        rng = np.random.default_rng(9)
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        xs = rng.uniform(-1, 1, (6, 1))
        ys = rng.uniform(-1, 1, (5, 1))
        fam = build_cost_family(q, xs, ys)
        vals = fam.evaluate_polys(xs, ys)
        assert np.allclose(np.abs(vals).max(axis=(1, 2)), fam.basis_sup)
        assert np.allclose(fam.box_plus, fam.basis_sup[: fam.ell] / 2)
        assert np.allclose(fam.box_minus, fam.basis_sup[fam.ell :] / 2)

    def test_zero_form_empty_family(self):
        basis = MixedBasis(1, 1, (((0,), (0,)), ((1,), (1,))))
        import scipy.sparse as sp
        from evengw.dualization import QuadraticForm

        q = QuadraticForm(r=1, k=1, basis=basis, matrix=sp.csr_matrix((2, 2)))
        fam = build_cost_family(q, np.zeros((1, 1)), np.zeros((1, 1)))
        assert fam.count == 0 and fam.ell == 0
        assert fam.evaluate_polys(np.zeros((1, 1)), np.zeros((1, 1))).shape == (0, 1, 1)

    def test_cost_eval_zero_and_linearity(self):
        rng = np.random.default_rng(10)
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        xs = rng.uniform(-1, 1, (4, 1))
        ys = rng.uniform(-1, 1, (4, 1))
        fam = build_cost_family(q, xs, ys)
        u0 = np.zeros(fam.ell)
        v0 = np.zeros(fam.count - fam.ell)
        assert cost_eval(fam, u0, v0, xs[0], ys[0]) == 0.0
        p_vals = fam.evaluate_polys(xs[:1], ys[:1])
        t = min(0.5, fam.box_plus[0])
        u1 = u0.copy()
        u1[0] = t
        got = cost_eval(fam, u1, v0, xs[0], ys[0])
        assert np.isclose(got, t * p_vals[0, 0, 0], rtol=1e-12)

    def test_cost_eval_strict_mode(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        xs = np.array([[0.5], [-0.5]])
        ys = np.array([[0.25]])
        fam = build_cost_family(q, xs, ys)
        too_big = fam.box_plus * 3 + 1.0
        with pytest.raises(ValueError, match="outside"):
            cost_eval(fam, too_big, np.zeros(fam.count - fam.ell), xs[0], ys[0], strict=True)
        # non-strict clamps instead of raising
        cost_eval(fam, too_big, np.zeros(fam.count - fam.ell), xs[0], ys[0])

    def test_parametric_lipschitz_bound(self):
        rng = np.random.default_rng(12)
        q = build_quadratic_form(expand_kernel(1, 1, 2, 1))
        xs = rng.uniform(-1, 1, (6, 2))
        ys = rng.uniform(-1, 1, (5, 1))
        fam = build_cost_family(q, xs, ys)
        bound = fam.parametric_lipschitz()
        for _ in range(40):
            u1, u2 = rng.uniform(-1, 1, (2, fam.ell)) * fam.box_plus
            v1, v2 = rng.uniform(-1, 1, (2, fam.count - fam.ell)) * fam.box_minus
            c1 = fam.cost_matrix(u1, v1, xs, ys)
            c2 = fam.cost_matrix(u2, v2, xs, ys)
            theta_gap = np.sqrt(((u1 - u2) ** 2).sum() + ((v1 - v2) ** 2).sum())
            assert np.abs(c1 - c2).max() <= bound * theta_gap + 1e-12

    def test_transform_potential_matches_primitive(self):
        rng = np.random.default_rng(13)
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        xs = rng.uniform(-1, 1, (5, 1))
        ys = rng.uniform(-1, 1, (4, 1))
        fam = build_cost_family(q, xs, ys)
        u = rng.uniform(-1, 1, fam.ell) * fam.box_plus
        v = rng.uniform(-1, 1, fam.count - fam.ell) * fam.box_minus
        f = rng.uniform(-1, 1, 5)
        via_family = transform_potential(fam, (u, v), f, xs, ys)
        via_matrix = transport.c_transform(fam.cost_matrix(u, v, xs, ys), f)
        assert np.array_equal(via_family, via_matrix)

    def test_serialization_fields(self):
        q = build_quadratic_form(expand_kernel(1, 1, 1, 1))
        fam = build_cost_family(q, np.array([[0.0], [1.0]]), np.array([[0.0]]))
        doc = fam.to_json_dict()
        assert doc["count"] == len(doc["eigvals"]) == len(doc["polys"])
        assert doc["ell"] + len(doc["box_minus"]) == doc["count"]
