"""Exact monomial expansion of the even-order comparison kernel.

The kernel (|x-x'|^{2k} - |y-y'|^{2k})^{2r} expands, via the binomial theorem
over the outer power and the multinomial theorem over each norm power, into a
finite sum of products of two mixed monomials

    coeff * (x^alpha y^gamma) * (x'^beta y'^delta).

Integrated against a coupling pi (in both variable pairs) each term becomes a
product of two mixed moments.  Terms whose two factors each depend on only one
marginal are "marginal-only"; their sum is the marginal functional.  The rest
form a quadratic function of the coupling whose infimum is the transport part.

All coefficients are computed in exact integer arithmetic and converted to
floats once when the table is materialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .measures import DiscreteMeasure

__all__ = [
    "MultiIndex",
    "KernelTerm",
    "KernelExpansion",
    "TermCapExceeded",
    "expand_norm_power",
    "expand_kernel",
    "marginal_value",
    "marginal_value_from_moments",
    "coupling_value_direct",
    "objective_value",
    "gw_objective_bruteforce",
    "monomial_matrix",
    "kernel_direct",
]

MultiIndex = tuple[int, ...]

DEFAULT_TERM_CAP = 2_000_000


class TermCapExceeded(RuntimeError):
    """Raised when an expansion would exceed the configured term budget."""


def _zero(d: int) -> MultiIndex:
    return (0,) * d


def expand_norm_power(d: int, k: int) -> dict[tuple[MultiIndex, MultiIndex], int]:
    """Integer coefficient table of |x - x'|^{2k} in the basis x^alpha x'^beta.

    Built as the (k-1)-fold sparse convolution of the quadratic base table;
    every key satisfies |alpha| + |beta| = 2k with alpha_i + beta_i even.
    """
    if d < 1 or k < 1:
        raise ValueError("need d >= 1 and k >= 1")
    base: dict[tuple[MultiIndex, MultiIndex], int] = {}
    for i in range(d):
        e2 = tuple(2 if j == i else 0 for j in range(d))
        e1 = tuple(1 if j == i else 0 for j in range(d))
        base[(e2, _zero(d))] = base.get((e2, _zero(d)), 0) + 1
        base[(e1, e1)] = base.get((e1, e1), 0) - 2
        base[(_zero(d), e2)] = base.get((_zero(d), e2), 0) + 1
    table = base
    for _ in range(k - 1):
        table = _convolve(table, base)
    return table


def _convolve(t1, t2):
    out: dict[tuple[MultiIndex, MultiIndex], int] = {}
    for (a1, b1), c1 in t1.items():
        for (a2, b2), c2 in t2.items():
            key = (
                tuple(x + y for x, y in zip(a1, a2)),
                tuple(x + y for x, y in zip(b1, b2)),
            )
            out[key] = out.get(key, 0) + c1 * c2
    return {key: c for key, c in out.items() if c != 0}


def _powers(table, d: int, top: int, cap: int | None = None):
    """All sparse powers table^0 .. table^top.

    A cap on intermediate table sizes aborts pathological configurations
    before the quadratic convolution work is spent.
    """
    out = [{(_zero(d), _zero(d)): 1}]
    for _ in range(top):
        if cap is not None and len(out[-1]) * len(table) > 64 * cap:
            raise TermCapExceeded(
                f"norm-power table in dimension {d} outgrows the term cap of {cap}"
            )
        out.append(_convolve(out[-1], table))
    return out


@dataclass(frozen=True)
class KernelTerm:
    """One monomial term of the expanded kernel.

    ``s`` is the binomial layer (power of the x-side norm factor), the four
    multi-indices are the exponents of x, x', y, y', and ``marginal_only``
    records whether both mixed-moment factors collapse to marginal moments.
    """

    s: int
    alpha: MultiIndex
    beta: MultiIndex
    gamma: MultiIndex
    delta: MultiIndex
    coeff: float
    marginal_only: bool

    def degree(self) -> int:
        return sum(self.alpha) + sum(self.beta) + sum(self.gamma) + sum(self.delta)


def _is_marginal_only(alpha, beta, gamma, delta) -> bool:
    first = sum(alpha) == 0 or sum(gamma) == 0
    second = sum(beta) == 0 or sum(delta) == 0
    return first and second


@dataclass
class KernelExpansion:
    """Merged term table of the kernel for fixed (r, k, d_x, d_y).

    Treat instances as immutable; evaluation helpers are pure.  The internal
    index arrays map every term's two factors into shared lists of x-side and
    y-side multi-indices so that moment evaluation is a gather.
    """

    r: int
    k: int
    d_x: int
    d_y: int
    terms: list[KernelTerm]

    # struct-of-arrays evaluation caches, built in __post_init__
    x_indices: list[MultiIndex] = field(repr=False, default_factory=list)
    y_indices: list[MultiIndex] = field(repr=False, default_factory=list)
    _ia1: np.ndarray = field(repr=False, default=None)
    _ig1: np.ndarray = field(repr=False, default=None)
    _ia2: np.ndarray = field(repr=False, default=None)
    _ig2: np.ndarray = field(repr=False, default=None)
    _coeff: np.ndarray = field(repr=False, default=None)
    _marginal: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        xs: dict[MultiIndex, int] = {}
        ys: dict[MultiIndex, int] = {}
        for t in self.terms:
            for a in (t.alpha, t.beta):
                xs.setdefault(a, len(xs))
            for g in (t.gamma, t.delta):
                ys.setdefault(g, len(ys))
        self.x_indices = sorted(xs)
        self.y_indices = sorted(ys)
        xpos = {a: i for i, a in enumerate(self.x_indices)}
        ypos = {g: i for i, g in enumerate(self.y_indices)}
        n = len(self.terms)
        self._ia1 = np.fromiter((xpos[t.alpha] for t in self.terms), dtype=np.int64, count=n)
        self._ig1 = np.fromiter((ypos[t.gamma] for t in self.terms), dtype=np.int64, count=n)
        self._ia2 = np.fromiter((xpos[t.beta] for t in self.terms), dtype=np.int64, count=n)
        self._ig2 = np.fromiter((ypos[t.delta] for t in self.terms), dtype=np.int64, count=n)
        self._coeff = np.fromiter((t.coeff for t in self.terms), dtype=float, count=n)
        self._marginal = np.fromiter((t.marginal_only for t in self.terms), dtype=bool, count=n)

    @property
    def term_count(self) -> int:
        return len(self.terms)

    def max_degree(self) -> int:
        return max(t.degree() for t in self.terms)

    # -- evaluation helpers -----------------------------------------------

    def x_moments(self, m: DiscreteMeasure) -> np.ndarray:
        return m.weights @ monomial_matrix(m.atoms, self.x_indices)

    def y_moments(self, m: DiscreteMeasure) -> np.ndarray:
        return m.weights @ monomial_matrix(m.atoms, self.y_indices)

    def mixed_moments(self, plan: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
        """Matrix A with A[a, g] = sum_ij plan_ij x_i^a y_j^g."""
        xm = monomial_matrix(mu.atoms, self.x_indices)
        ym = monomial_matrix(nu.atoms, self.y_indices)
        return xm.T @ np.asarray(plan, dtype=float) @ ym

    def evaluate(self, x, xp, y, yp) -> float:
        """Term-sum value of the kernel at a single point tuple."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        yp = np.atleast_2d(np.asarray(yp, dtype=float))
        mx = monomial_matrix(x, self.x_indices)[0]
        mxp = monomial_matrix(xp, self.x_indices)[0]
        my = monomial_matrix(y, self.y_indices)[0]
        myp = monomial_matrix(yp, self.y_indices)[0]
        vals = (
            self._coeff
            * mx[self._ia1]
            * my[self._ig1]
            * mxp[self._ia2]
            * myp[self._ig2]
        )
        return float(vals.sum())

    def to_json_dict(self) -> dict:
        return {
            "r": self.r,
            "k": self.k,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "term_count": self.term_count,
            "terms": [
                {
                    "s": t.s,
                    "alpha": list(t.alpha),
                    "beta": list(t.beta),
                    "gamma": list(t.gamma),
                    "delta": list(t.delta),
                    "coeff": t.coeff,
                    "marginal_only": t.marginal_only,
                }
                for t in self.terms
            ],
        }


def expand_kernel(
    r: int, k: int, d_x: int, d_y: int, term_cap: int = DEFAULT_TERM_CAP
) -> KernelExpansion:
    """Full merged expansion of the kernel for the given orders and dimensions.

    Raises TermCapExceeded before materializing anything if the merged term
    count would exceed ``term_cap`` (combinatorial growth in 2k, 2r and the
    dimensions).
    """
    if min(r, k, d_x, d_y) < 1:
        raise ValueError("need r, k, d_x, d_y all >= 1")
    try:
        pow_x = _powers(expand_norm_power(d_x, k), d_x, 2 * r, cap=term_cap)
        pow_y = _powers(expand_norm_power(d_y, k), d_y, 2 * r, cap=term_cap)
    except TermCapExceeded as exc:
        raise TermCapExceeded(
            f"expansion for (r={r}, k={k}, d_x={d_x}, d_y={d_y}) aborted: {exc}"
        ) from None
    total = sum(len(pow_x[s]) * len(pow_y[2 * r - s]) for s in range(2 * r + 1))
    if total > term_cap:
        raise TermCapExceeded(
            f"expansion for (r={r}, k={k}, d_x={d_x}, d_y={d_y}) has {total} terms, "
            f"exceeding the cap of {term_cap}"
        )
    terms: list[KernelTerm] = []
    for s in range(2 * r + 1):
        sign_binom = (-1) ** s * comb(2 * r, s)
        for (alpha, beta), px in sorted(pow_x[s].items()):
            for (gamma, delta), qy in sorted(pow_y[2 * r - s].items()):
                terms.append(
                    KernelTerm(
                        s=s,
                        alpha=alpha,
                        beta=beta,
                        gamma=gamma,
                        delta=delta,
                        coeff=float(sign_binom * px * qy),
                        marginal_only=_is_marginal_only(alpha, beta, gamma, delta),
                    )
                )
    return KernelExpansion(r=r, k=k, d_x=d_x, d_y=d_y, terms=terms)


def monomial_matrix(atoms: np.ndarray, indices) -> np.ndarray:
    """Matrix M with M[i, j] = atoms_i ^ indices_j, chunked over indices."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    n = atoms.shape[0]
    exps = np.asarray(list(indices), dtype=np.int64)
    if exps.size == 0:
        return np.ones((n, 0))
    out = np.empty((n, len(exps)))
    # chunk to bound the (n, chunk, d) intermediate
    chunk = max(1, int(4_000_000 / max(1, n * atoms.shape[1])))
    for lo in range(0, len(exps), chunk):
        hi = min(lo + chunk, len(exps))
        out[:, lo:hi] = np.prod(
            atoms[:, None, :] ** exps[None, lo:hi, :], axis=2
        )
    return out


def marginal_value(exp: KernelExpansion, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Sum of the marginal-only terms, evaluated from marginal moments."""
    _check_dims(exp, mu, nu)
    mx = exp.x_moments(mu)
    my = exp.y_moments(nu)
    return _marginal_sum(exp, mx, my)


def marginal_value_from_moments(exp: KernelExpansion, x_moment, y_moment) -> float:
    """Marginal-only sum with moments supplied by callables (population use).

    ``x_moment(alpha)`` and ``y_moment(gamma)`` must return exact moments for
    every multi-index the expansion touches.
    """
    mx = np.array([x_moment(a) for a in exp.x_indices], dtype=float)
    my = np.array([y_moment(g) for g in exp.y_indices], dtype=float)
    return _marginal_sum(exp, mx, my)


def _marginal_sum(exp: KernelExpansion, mx: np.ndarray, my: np.ndarray) -> float:
    # marginal-only factors satisfy M_{alpha,gamma} = M^X_alpha * M^Y_gamma
    # because at least one of the two indices is zero (and M_0 = 1)
    sel = exp._marginal
    vals = (
        exp._coeff[sel]
        * mx[exp._ia1[sel]]
        * my[exp._ig1[sel]]
        * mx[exp._ia2[sel]]
        * my[exp._ig2[sel]]
    )
    return float(vals.sum())


def coupling_value_direct(
    exp: KernelExpansion, plan, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> float:
    """Sum of the non-marginal terms at the given coupling matrix."""
    _check_dims(exp, mu, nu)
    A = exp.mixed_moments(plan, mu, nu)
    flat = A.ravel()
    w = A.shape[1]
    sel = ~exp._marginal
    vals = (
        exp._coeff[sel]
        * flat[exp._ia1[sel] * w + exp._ig1[sel]]
        * flat[exp._ia2[sel] * w + exp._ig2[sel]]
    )
    return float(vals.sum())


def objective_value(
    exp: KernelExpansion, plan, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> float:
    """All-terms value (marginal plus coupling) at the given coupling matrix."""
    _check_dims(exp, mu, nu)
    A = exp.mixed_moments(plan, mu, nu)
    flat = A.ravel()
    w = A.shape[1]
    vals = (
        exp._coeff
        * flat[exp._ia1 * w + exp._ig1]
        * flat[exp._ia2 * w + exp._ig2]
    )
    return float(vals.sum())


def kernel_direct(x, xp, y, yp, r: int, k: int) -> float:
    """Direct kernel value (|x-x'|^{2k} - |y-y'|^{2k})^{2r}; expansion oracle."""
    dx = float(np.sum((np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) ** 2))
    dy = float(np.sum((np.asarray(y, dtype=float) - np.asarray(yp, dtype=float)) ** 2))
    return (dx**k - dy**k) ** (2 * r)


def gw_objective_bruteforce(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    plan,
    r: int,
    k: int,
    marginal_tol: float = 1e-10,
) -> float:
    """Quadruple-sum objective at a fixed coupling; the ground-truth oracle.

    Computes sum over (i, i', j, j') of pi_ij pi_i'j' (D_ii'^k - E_jj'^k)^{2r}
    with D, E the squared-distance matrices, chunked so that supports of a
    few thousand atoms stay within memory.
    """
    plan = np.asarray(plan, dtype=float)
    if plan.shape != (mu.n, nu.n):
        raise ValueError(f"plan shape {plan.shape} does not match supports {(mu.n, nu.n)}")
    row_err = np.abs(plan.sum(axis=1) - mu.weights).max()
    col_err = np.abs(plan.sum(axis=0) - nu.weights).max()
    if max(row_err, col_err) > marginal_tol:
        raise ValueError(
            f"plan marginals deviate by {max(row_err, col_err):.3e} (> {marginal_tol})"
        )
    dxk = _sq_dists(mu.atoms) ** k
    dyk = _sq_dists(nu.atoms) ** k
    total = 0.0
    # chunk over the first index to bound the 4-d broadcast
    chunk = max(1, int(5_000_000 / max(1, mu.n * nu.n * nu.n)))
    for lo in range(0, mu.n, chunk):
        hi = min(lo + chunk, mu.n)
        block = (dxk[lo:hi, :, None, None] - dyk[None, None, :, :]) ** (2 * r)
        total += float(np.einsum("ij,IJ,iIjJ->", plan[lo:hi], plan, block))
    return total


def _sq_dists(atoms: np.ndarray) -> np.ndarray:
    diff = atoms[:, None, :] - atoms[None, :, :]
    return (diff**2).sum(axis=2)


def _check_dims(exp: KernelExpansion, mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    if mu.dim != exp.d_x or nu.dim != exp.d_y:
        raise ValueError(
            f"measure dimensions ({mu.dim}, {nu.dim}) do not match expansion "
            f"({exp.d_x}, {exp.d_y})"
        )
