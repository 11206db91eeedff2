"""Signed polynomial cost family realizing the coupling term as a minimax.

The non-marginal part of the expanded kernel is a quadratic form u(pi)' C u(pi)
in the mixed moments u_j(pi) = integral of x^alpha y^gamma dpi over a finite
basis of index pairs.  Diagonalizing C with a cyclic Jacobi sweep splits the
form into signed squares of polynomial integrals, and bounding each polynomial
on the supports yields compact parameter boxes on which the transport part
becomes an ordinary optimal-transport minimax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .expansion import KernelExpansion, MultiIndex, monomial_matrix
from . import transport

__all__ = [
    "MixedBasis",
    "QuadraticForm",
    "QuadraticEvaluator",
    "SpectralDecomposition",
    "DualCostFamily",
    "BasisCapExceeded",
    "JacobiError",
    "build_quadratic_form",
    "eigendecompose",
    "jacobi_eigh",
    "build_cost_family",
    "cost_eval",
    "transform_potential",
]

DEFAULT_BASIS_CAP = 200_000
DEFAULT_DENSE_CAP = 1500
DEFAULT_ZERO_TOL = 1e-9
JACOBI_OFF_TARGET = 1e-13
JACOBI_MAX_SWEEPS = 64


class BasisCapExceeded(RuntimeError):
    """Raised when the mixed-moment basis outgrows a configured cap."""


class JacobiError(RuntimeError):
    """Jacobi sweeps failed to reach the off-diagonal target."""


@dataclass(frozen=True)
class MixedBasis:
    """Ordered basis of mixed-moment index pairs (alpha, gamma).

    The constant pair of zero multi-indices always sits first; the remaining
    entries are exactly the pairs appearing as a factor of some non-marginal
    kernel term, in lexicographic order.
    """

    x_dim: int
    y_dim: int
    entries: tuple[tuple[MultiIndex, MultiIndex], ...]

    def __post_init__(self) -> None:
        zero = ((0,) * self.x_dim, (0,) * self.y_dim)
        if not self.entries or self.entries[0] != zero:
            raise ValueError("mixed basis must start with the constant pair")

    @property
    def size(self) -> int:
        return len(self.entries)

    def position(self, pair) -> int:
        return self._index[pair]

    @property
    def _index(self) -> dict:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {pair: idx for idx, pair in enumerate(self.entries)}
            self.__dict__["_index_cache"] = cached
        return cached


@dataclass
class QuadraticForm:
    """Sparse symmetric matrix C with u(pi)' C u(pi) equal to the coupling sum."""

    r: int
    k: int
    basis: MixedBasis
    matrix: sp.csr_matrix

    # gather layout: per basis entry, positions of its x and y multi-indices
    x_parts: list[MultiIndex] = field(repr=False, default_factory=list)
    y_parts: list[MultiIndex] = field(repr=False, default_factory=list)
    jx: np.ndarray = field(repr=False, default=None)
    jy: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        xs: dict[MultiIndex, int] = {}
        ys: dict[MultiIndex, int] = {}
        for alpha, gamma in self.basis.entries:
            xs.setdefault(alpha, len(xs))
            ys.setdefault(gamma, len(ys))
        self.x_parts = list(xs)
        self.y_parts = list(ys)
        self.jx = np.fromiter((xs[a] for a, _ in self.basis.entries), dtype=np.int64)
        self.jy = np.fromiter((ys[g] for _, g in self.basis.entries), dtype=np.int64)

    @property
    def size(self) -> int:
        return self.basis.size

    def symmetry_defect(self) -> float:
        return float(abs(self.matrix - self.matrix.T).max())


def build_quadratic_form(exp: KernelExpansion, basis_cap: int = DEFAULT_BASIS_CAP) -> QuadraticForm:
    """Assemble the coupling-term quadratic form over the mixed-moment basis."""
    zero = ((0,) * exp.d_x, (0,) * exp.d_y)
    pairs = {zero}
    for t in exp.terms:
        if not t.marginal_only:
            pairs.add((t.alpha, t.gamma))
            pairs.add((t.beta, t.delta))
    if len(pairs) > basis_cap:
        raise BasisCapExceeded(
            f"mixed basis for (r={exp.r}, k={exp.k}, d_x={exp.d_x}, d_y={exp.d_y}) "
            f"has {len(pairs)} entries, exceeding the cap of {basis_cap}"
        )
    entries = (zero,) + tuple(sorted(pairs - {zero}))
    basis = MixedBasis(exp.d_x, exp.d_y, entries)
    pos = {pair: idx for idx, pair in enumerate(entries)}
    rows, cols, vals = [], [], []
    for t in exp.terms:
        if t.marginal_only:
            continue
        rows.append(pos[(t.alpha, t.gamma)])
        cols.append(pos[(t.beta, t.delta)])
        vals.append(t.coeff)
    raw = sp.coo_matrix((vals, (rows, cols)), shape=(len(entries), len(entries))).tocsr()
    matrix = (raw + raw.T) * 0.5
    return QuadraticForm(r=exp.r, k=exp.k, basis=basis, matrix=matrix)


class QuadraticEvaluator:
    """Evaluation of the coupling quadratic for a fixed pair of supports.

    Precomputes the monomial tables of both atom lists so that the moment
    vector, value, gradient, and the bilinear form along a direction are all
    cheap gathers and one sparse matvec each.
    """

    def __init__(self, q: QuadraticForm, mu, nu):
        if mu.dim != len(q.x_parts[0]) or nu.dim != len(q.y_parts[0]):
            raise ValueError("measure dimensions do not match quadratic form basis")
        self.q = q
        self.mu = mu
        self.nu = nu
        self._xm = monomial_matrix(mu.atoms, q.x_parts)
        self._ym = monomial_matrix(nu.atoms, q.y_parts)
        # H[j, i, l] factors: basis entry j evaluated at atom pair (i, l)
        self._hx = self._xm[:, q.jx]  # (n_x, m0)
        self._hy = self._ym[:, q.jy]  # (n_y, m0)

    def moment_vector(self, plan: np.ndarray) -> np.ndarray:
        return np.einsum("im,il,lm->m", self._hx, np.asarray(plan, dtype=float), self._hy, optimize=True)

    def value_from_moments(self, u: np.ndarray) -> float:
        return float(u @ (self.q.matrix @ u))

    def value(self, plan: np.ndarray) -> float:
        return self.value_from_moments(self.moment_vector(plan))

    def gradient(self, plan: np.ndarray) -> np.ndarray:
        """Matrix of partial derivatives of the coupling sum at the plan."""
        w = 2.0 * (self.q.matrix @ self.moment_vector(plan))
        return np.einsum("im,lm,m->il", self._hx, self._hy, w, optimize=True)

    def bilinear(self, u1: np.ndarray, u2: np.ndarray) -> float:
        return float(u1 @ (self.q.matrix @ u2))


@dataclass(frozen=True)
class SpectralDecomposition:
    """Nonzero eigenvalues and matching orthonormal eigenvector rows."""

    eigvals: np.ndarray
    vectors: np.ndarray  # (J, m0), row i pairs with eigvals[i]

    @property
    def count(self) -> int:
        return len(self.eigvals)

    @property
    def positive_count(self) -> int:
        return int(np.sum(self.eigvals > 0))


def jacobi_eigh(matrix: np.ndarray, off_target: float = JACOBI_OFF_TARGET,
                max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Full spectral decomposition of a symmetric matrix by cyclic Jacobi.

    Sweeps plane rotations in row-cyclic order until the off-diagonal
    Frobenius mass drops below ``off_target`` times the input Frobenius norm.
    Returns (eigenvalues, U) with U orthogonal, rows holding the
    eigenvectors, so that matrix = U.T @ diag(eigenvalues) @ U.

    The sweep kernel is JIT-compiled when numba is available; a vectorized
    numpy fallback (round-robin parallel ordering of disjoint rotations)
    covers environments without it.
    """
    a = np.array(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    m = a.shape[0]
    if m and np.abs(a - a.T).max() > 1e-14 * max(1.0, np.abs(a).max()):
        raise ValueError("matrix must be symmetric")
    u = np.eye(m)
    if m <= 1:
        return a.diagonal().copy(), u
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(m), u
    kernel = _numba_sweeps() or _numpy_sweeps
    sweeps = kernel(a, u, off_target * norm, max_sweeps)
    if sweeps < 0:
        raise JacobiError(f"no convergence after {max_sweeps} sweeps on a {m}x{m} matrix")
    return a.diagonal().copy(), u


_NUMBA_KERNEL = None


def _numba_sweeps():
    global _NUMBA_KERNEL
    if _NUMBA_KERNEL is not None:
        return _NUMBA_KERNEL or None
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is an optional accelerator
        _NUMBA_KERNEL = False
        return None

    @njit(cache=True)
    def sweeps(a, u, off_limit, max_sweeps):
        m = a.shape[0]
        for sweep in range(max_sweeps):
            off = 0.0
            for i in range(m):
                for j in range(i + 1, m):
                    off += 2.0 * a[i, j] * a[i, j]
            if np.sqrt(off) <= off_limit:
                return sweep
            for p in range(m - 1):
                for q in range(p + 1, m):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if tau >= 0.0:
                        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                    else:
                        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    for l in range(m):
                        alp = a[p, l]
                        alq = a[q, l]
                        a[p, l] = c * alp - s * alq
                        a[q, l] = s * alp + c * alq
                    for l in range(m):
                        alp = a[l, p]
                        alq = a[l, q]
                        a[l, p] = c * alp - s * alq
                        a[l, q] = s * alp + c * alq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for l in range(m):
                        ulp = u[p, l]
                        ulq = u[q, l]
                        u[p, l] = c * ulp - s * ulq
                        u[q, l] = s * ulp + c * ulq
        return -1

    _NUMBA_KERNEL = sweeps
    return sweeps


def _numpy_sweeps(a: np.ndarray, u: np.ndarray, off_limit: float, max_sweeps: int) -> int:
    m = a.shape[0]
    players = list(range(m if m % 2 == 0 else m + 1))
    dummy = None if m % 2 == 0 else m
    for sweep in range(max_sweeps):
        off_sq = np.linalg.norm(a) ** 2 - np.linalg.norm(a.diagonal()) ** 2
        if np.sqrt(max(off_sq, 0.0)) <= off_limit:
            return sweep
        order = players[:]
        for _round in range(len(players) - 1):
            half = len(order) // 2
            p = np.array(order[:half])
            q = np.array(order[half:][::-1])
            if dummy is not None:
                keep = (p != dummy) & (q != dummy)
                p, q = p[keep], q[keep]
            _rotate_pairs(a, u, np.minimum(p, q), np.maximum(p, q))
            order = [order[0]] + [order[-1]] + order[1:-1]
        np.copyto(a, (a + a.T) * 0.5)
    return -1


def _rotate_pairs(a: np.ndarray, u: np.ndarray, p: np.ndarray, q: np.ndarray) -> None:
    apq = a[p, q]
    live = np.abs(apq) > 0.0
    if not live.any():
        return
    p, q, apq = p[live], q[live], apq[live]
    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
    t[tau == 0] = 1.0
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    cc, ss = c[:, None], s[:, None]
    rows_p, rows_q = a[p, :].copy(), a[q, :].copy()
    a[p, :] = cc * rows_p - ss * rows_q
    a[q, :] = ss * rows_p + cc * rows_q
    cols_p, cols_q = a[:, p].copy(), a[:, q].copy()
    a[:, p] = cols_p * cc.T - cols_q * ss.T
    a[:, q] = cols_p * ss.T + cols_q * cc.T
    a[p, q] = 0.0
    a[q, p] = 0.0
    u_p, u_q = u[p, :].copy(), u[q, :].copy()
    u[p, :] = cc * u_p - ss * u_q
    u[q, :] = ss * u_p + cc * u_q


def eigendecompose(
    q: QuadraticForm,
    zero_tol: float = DEFAULT_ZERO_TOL,
    dense_cap: int = DEFAULT_DENSE_CAP,
) -> SpectralDecomposition:
    """Spectral precursor of the cost family: nonzero eigenpairs of C.

    Eigenvalues with magnitude at most ``zero_tol`` times the largest are
    dropped as numerical zeros.  Ordering is positives descending, then
    negatives ascending, with exact ties broken by lexicographically smallest
    eigenvector; each vector's sign is fixed so its first sizable component
    is positive.
    """
    if q.size > dense_cap:
        raise BasisCapExceeded(
            f"basis size {q.size} exceeds the dense eigendecomposition cap of {dense_cap}"
        )
    lam, vecs = jacobi_eigh(q.matrix.toarray())
    top = np.abs(lam).max() if len(lam) else 0.0
    if top == 0.0:
        return SpectralDecomposition(np.zeros(0), np.zeros((0, q.size)))
    keep = np.abs(lam) > zero_tol * top
    lam, vecs = lam[keep], vecs[keep]
    vecs = _fix_signs(vecs)
    pos = _order_block([i for i in range(len(lam)) if lam[i] > 0], lam, vecs, descending=True)
    neg = _order_block([i for i in range(len(lam)) if lam[i] < 0], lam, vecs, descending=False)
    order = pos + neg
    return SpectralDecomposition(lam[order].copy(), vecs[order].copy())


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for i in range(out.shape[0]):
        nz = np.flatnonzero(np.abs(out[i]) > 1e-12)
        if len(nz) and out[i, nz[0]] < 0:
            out[i] = -out[i]
    return out


def _order_block(indices, lam, vecs, descending: bool):
    def key(i):
        head = -lam[i] if descending else lam[i]
        return (head, tuple(vecs[i]))

    return sorted(indices, key=key)


@dataclass
class DualCostFamily:
    """Signed polynomials, split index, and parameter boxes for the minimax.

    ``weights`` holds the polynomial coefficients over the mixed basis, rows
    already scaled by sqrt(|eigenvalue|); rows before ``ell`` carry positive
    eigenvalues, the rest negative.  Boxes are per-coordinate half-widths,
    equal to half the exact supremum of each polynomial over the support
    product used at build time.
    """

    r: int
    k: int
    basis: MixedBasis
    eigvals: np.ndarray
    ell: int
    weights: np.ndarray
    basis_sup: np.ndarray
    box_plus: np.ndarray
    box_minus: np.ndarray

    @property
    def count(self) -> int:
        return len(self.eigvals)

    @property
    def x_dim(self) -> int:
        return self.basis.x_dim

    @property
    def y_dim(self) -> int:
        return self.basis.y_dim

    def poly_as_dict(self, i: int, tol: float = 0.0) -> dict:
        row = self.weights[i]
        return {
            pair: float(c)
            for pair, c in zip(self.basis.entries, row)
            if abs(c) > tol
        }

    def evaluate_polys(self, x_atoms, y_atoms) -> np.ndarray:
        """Values P[i, a, b] of every polynomial on the grid product."""
        q = self._gather
        xm = monomial_matrix(x_atoms, q["x_parts"])[:, q["jx"]]
        ym = monomial_matrix(y_atoms, q["y_parts"])[:, q["jy"]]
        return np.einsum("pm,am,bm->pab", self.weights, xm, ym, optimize=True)

    @property
    def _gather(self) -> dict:
        cached = self.__dict__.get("_gather_cache")
        if cached is None:
            xs: dict[MultiIndex, int] = {}
            ys: dict[MultiIndex, int] = {}
            for alpha, gamma in self.basis.entries:
                xs.setdefault(alpha, len(xs))
                ys.setdefault(gamma, len(ys))
            cached = {
                "x_parts": list(xs),
                "y_parts": list(ys),
                "jx": np.fromiter((xs[a] for a, _ in self.basis.entries), dtype=np.int64),
                "jy": np.fromiter((ys[g] for _, g in self.basis.entries), dtype=np.int64),
            }
            self.__dict__["_gather_cache"] = cached
        return cached

    def combine(self, u, v) -> np.ndarray:
        """Coefficient row of the cost c_{u,v} over the mixed basis."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.shape != (self.ell,) or v.shape != (self.count - self.ell,):
            raise ValueError(
                f"parameter shapes {u.shape}, {v.shape} do not match split "
                f"({self.ell}, {self.count - self.ell})"
            )
        return u @ self.weights[: self.ell] - v @ self.weights[self.ell :]

    def cost_matrix(self, u, v, x_atoms, y_atoms) -> np.ndarray:
        row = self.combine(u, v)
        q = self._gather
        xm = monomial_matrix(x_atoms, q["x_parts"])[:, q["jx"]]
        ym = monomial_matrix(y_atoms, q["y_parts"])[:, q["jy"]]
        return np.einsum("m,am,bm->ab", row, xm, ym, optimize=True)

    def clamp(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        u = np.clip(np.asarray(u, dtype=float), -self.box_plus, self.box_plus)
        v = np.clip(np.asarray(v, dtype=float), -self.box_minus, self.box_minus)
        return u, v

    def inside_boxes(self, u, v, slack: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        ok_u = np.all(np.abs(u) <= self.box_plus * (1 + slack) + slack)
        ok_v = np.all(np.abs(v) <= self.box_minus * (1 + slack) + slack)
        return bool(ok_u and ok_v)

    def parametric_lipschitz(self) -> float:
        """Bound L with sup |c_theta - c_theta'| <= L ||theta - theta'||_2."""
        c_basis = float(self.basis_sup.max()) if self.count else 0.0
        return max(1.0, c_basis * np.sqrt(max(self.count, 1)))

    def to_json_dict(self) -> dict:
        return {
            "r": self.r,
            "k": self.k,
            "d_x": self.x_dim,
            "d_y": self.y_dim,
            "count": int(self.count),
            "ell": int(self.ell),
            "eigvals": self.eigvals.tolist(),
            "basis": [[list(a), list(g)] for a, g in self.basis.entries],
            "polys": [
                {f"{list(a)}|{list(g)}": c for (a, g), c in self.poly_as_dict(i).items()}
                for i in range(self.count)
            ],
            "basis_sup": self.basis_sup.tolist(),
            "box_plus": self.box_plus.tolist(),
            "box_minus": self.box_minus.tolist(),
        }


def build_cost_family(
    q: QuadraticForm,
    supp_x,
    supp_y,
    zero_tol: float = DEFAULT_ZERO_TOL,
    dense_cap: int = DEFAULT_DENSE_CAP,
    spectral: SpectralDecomposition | None = None,
) -> DualCostFamily:
    """Assemble polynomials, split index, and boxes from the quadratic form.

    ``supp_x`` and ``supp_y`` are the atom lists over whose product the
    polynomial suprema (hence the boxes) are computed exactly; pass the union
    of supports when one family must serve several measures.
    """
    supp_x = np.atleast_2d(np.asarray(supp_x, dtype=float))
    supp_y = np.atleast_2d(np.asarray(supp_y, dtype=float))
    if supp_x.size == 0 or supp_y.size == 0:
        raise ValueError("supports must be nonempty")
    if spectral is None:
        spectral = eigendecompose(q, zero_tol=zero_tol, dense_cap=dense_cap)
    weights = np.sqrt(np.abs(spectral.eigvals))[:, None] * spectral.vectors
    family = DualCostFamily(
        r=q.r,
        k=q.k,
        basis=q.basis,
        eigvals=spectral.eigvals.copy(),
        ell=spectral.positive_count,
        weights=weights,
        basis_sup=np.zeros(spectral.count),
        box_plus=np.zeros(spectral.positive_count),
        box_minus=np.zeros(spectral.count - spectral.positive_count),
    )
    if spectral.count:
        values = family.evaluate_polys(supp_x, supp_y)
        sup = np.abs(values).max(axis=(1, 2))
        family.basis_sup = sup
        family.box_plus = sup[: family.ell] / 2.0
        family.box_minus = sup[family.ell :] / 2.0
    return family


def cost_eval(fam: DualCostFamily, u, v, x, y, strict: bool = False) -> float:
    """Pointwise value of the combined cost at one (x, y) pair.

    Parameters outside the boxes are clamped unless ``strict`` is set, in
    which case they raise.
    """
    if strict and not fam.inside_boxes(u, v):
        raise ValueError("parameters lie outside the dual boxes")
    u, v = fam.clamp(u, v)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return float(fam.cost_matrix(u, v, x, y)[0, 0])


def transform_potential(fam: DualCostFamily, theta, f, x_grid, y_grid) -> np.ndarray:
    """Family-level transform: inf over the x grid of cost minus potential."""
    u, v = theta
    cost = fam.cost_matrix(u, v, x_grid, y_grid)
    return transport.c_transform(cost, f)
