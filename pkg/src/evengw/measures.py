"""Finitely supported probability measures on Euclidean space.

This module provides the measure container used everywhere else, seeded
sampling for the experiment distributions, exact moment evaluation, and the
centering / rescaling normalization applied before any functional is
evaluated.

Randomness: every stochastic routine takes an explicit integer seed and is
backed by numpy's PCG64 generator, so identical (spec, n, seed) triples give
bit-identical output for a fixed numpy version.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiscreteMeasure",
    "NormalizationRecord",
    "DistributionSpec",
    "empirical_from_samples",
    "merge_duplicate_atoms",
    "center",
    "normalize_pair",
    "sample",
    "moment",
    "population_measure",
    "population_moment",
    "derive_seed",
    "parse_distribution",
]

WEIGHT_TOL = 1e-12

_KINDS = ("uniform-ball", "uniform-cube", "two-point", "point-mass")


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiscreteMeasure:
    """A probability measure with finitely many weighted atoms in R^dim.

    Invariants enforced at construction: weights are nonnegative, sum to one
    within 1e-12, and every atom has exactly ``dim`` coordinates.  Instances
    are immutable (arrays are marked read-only) and safe to share across
    threads.
    """

    dim: int
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if self.dim < 1:
            raise ValueError(f"dimension must be positive, got {self.dim}")
        if atoms.ndim != 2 or atoms.shape[1] != self.dim:
            raise ValueError(
                f"atoms must be an (n, {self.dim}) array, got shape {atoms.shape}"
            )
        if len(weights) != len(atoms):
            raise ValueError(
                f"{len(atoms)} atoms but {len(weights)} weights"
            )
        if len(atoms) == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1 within {WEIGHT_TOL}")
        object.__setattr__(self, "atoms", _readonly(atoms))
        object.__setattr__(self, "weights", _readonly(weights))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def support_diameter(self) -> float:
        """Exact diameter of the support, by exhaustive pair scan."""
        diff = self.atoms[:, None, :] - self.atoms[None, :, :]
        return float(np.sqrt((diff**2).sum(axis=2)).max())

    def support_radius(self) -> float:
        return float(np.sqrt((self.atoms**2).sum(axis=1)).max())

    def translated(self, shift) -> "DiscreteMeasure":
        return DiscreteMeasure(self.dim, self.atoms + np.asarray(shift, dtype=float), self.weights)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return DiscreteMeasure(self.dim, self.atoms * factor, self.weights)

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "atoms": self.atoms.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DiscreteMeasure":
        try:
            return cls(int(doc["dim"]), np.asarray(doc["atoms"], dtype=float), np.asarray(doc["weights"], dtype=float))
        except KeyError as exc:
            raise ValueError(f"measure document missing field {exc}") from exc

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "DiscreteMeasure":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    @classmethod
    def from_csv(cls, path, dim: int | None = None) -> "DiscreteMeasure":
        """Read one atom per row.

        If ``dim`` is given and rows carry dim+1 numbers, the final column is
        taken as weights (normalized check applies); otherwise all columns
        are coordinates and weights are uniform.
        """
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.reader(fh):
                rec = [cell for cell in rec if cell.strip()]
                if rec:
                    rows.append([float(cell) for cell in rec])
        if not rows:
            raise ValueError(f"no data rows in {path}")
        width = len(rows[0])
        if any(len(row) != width for row in rows):
            raise ValueError(f"inconsistent column counts in {path}")
        data = np.asarray(rows, dtype=float)
        if dim is not None and width == dim + 1:
            atoms, weights = data[:, :dim], data[:, dim]
        elif dim is None or width == dim:
            atoms, weights = data, np.full(len(data), 1.0 / len(data))
        else:
            raise ValueError(
                f"{path}: rows have {width} columns, expected {dim} or {dim + 1}"
            )
        return cls(atoms.shape[1], atoms, weights)


@dataclass(frozen=True)
class NormalizationRecord:
    """How a measure was translated and rescaled; enough to invert the map.

    ``shift`` is the subtracted mean, ``scale`` the positive divisor applied
    after the shift, and ``original_radius`` the pair-diameter bound R that
    produced the scale (0.0 when no rescaling was involved).  ``degenerate``
    marks the R = 0 case where both supports are single points.
    """

    shift: np.ndarray
    scale: float
    original_radius: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "shift", _readonly(np.asarray(self.shift, dtype=float).ravel()))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.shift) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.scale + self.shift


@dataclass(frozen=True)
class DistributionSpec:
    """Named sampling distribution for experiments.

    kind:
      * ``uniform-ball``  uniform on the closed ball of the given radius
      * ``uniform-cube``  uniform on the cube [-radius, radius]^dim
      * ``two-point``     mass p at radius * e1, mass 1-p at the origin
      * ``point-mass``    the Dirac mass at the origin
    """

    kind: str
    dim: int
    radius: float = 1.0
    p: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; choose from {_KINDS}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.kind == "two-point" and not 0.0 <= self.p <= 1.0:
            raise ValueError("two-point mass p must lie in [0, 1]")

    def __str__(self) -> str:
        if self.kind == "two-point":
            return f"{self.kind}:d={self.dim},r={self.radius:g},p={self.p:g}"
        if self.kind == "point-mass":
            return f"{self.kind}:d={self.dim}"
        return f"{self.kind}:d={self.dim},r={self.radius:g}"


def parse_distribution(text: str) -> DistributionSpec:
    """Parse ``kind:d=2,r=1.5,p=0.25`` style specifications (CLI format)."""
    head, _, tail = text.partition(":")
    kind = head.strip()
    kwargs: dict = {}
    if tail.strip():
        for piece in tail.split(","):
            key, _, val = piece.partition("=")
            key = key.strip().lower()
            if not val:
                raise ValueError(f"bad distribution field {piece!r} in {text!r}")
            if key in ("d", "dim"):
                kwargs["dim"] = int(val)
            elif key in ("r", "radius", "h"):
                kwargs["radius"] = float(val)
            elif key == "p":
                kwargs["p"] = float(val)
            else:
                raise ValueError(f"unknown distribution field {key!r} in {text!r}")
    if "dim" not in kwargs:
        raise ValueError(f"distribution {text!r} must declare d=<dim>")
    return DistributionSpec(kind, **kwargs)


def derive_seed(*parts: int) -> int:
    """Deterministic child seed from an ordered tuple of integers.

    Used to partition seed space across trials and across the two sample
    streams of an experiment; distinct part tuples give independent PCG64
    streams.
    """
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def empirical_from_samples(points) -> DiscreteMeasure:
    """Uniform measure on the given points; duplicates kept as separate atoms."""
    atoms = np.atleast_2d(np.asarray(points, dtype=float))
    if atoms.size == 0:
        raise ValueError("empirical measure needs at least one sample")
    n = len(atoms)
    return DiscreteMeasure(atoms.shape[1], atoms, np.full(n, 1.0 / n))


def merge_duplicate_atoms(m: DiscreteMeasure) -> DiscreteMeasure:
    """Canonicalize by summing weights of byte-identical atoms.

    The measure as a measure is unchanged; only the atom list shrinks.  Atom
    order of the output is lexicographic.
    """
    uniq, inverse = np.unique(m.atoms, axis=0, return_inverse=True)
    weights = np.zeros(len(uniq))
    np.add.at(weights, inverse.ravel(), m.weights)
    return DiscreteMeasure(m.dim, uniq, weights / weights.sum())


def center(m: DiscreteMeasure) -> tuple[DiscreteMeasure, NormalizationRecord]:
    """Subtract the weighted mean; scale is left at one."""
    shift = m.mean()
    centered = DiscreteMeasure(m.dim, m.atoms - shift, m.weights)
    return centered, NormalizationRecord(shift=shift, scale=1.0, original_radius=0.0)


def normalize_pair(
    mu: DiscreteMeasure, nu: DiscreteMeasure
) -> tuple[DiscreteMeasure, DiscreteMeasure, NormalizationRecord, NormalizationRecord]:
    """Center both measures and rescale by twice the larger support diameter.

    The outputs are centered with all atoms inside the closed unit ball.  If
    both supports are single points (R = 0) the centered measures are
    returned with scale one and the records flag the degenerate case.
    """
    radius = max(mu.support_diameter(), nu.support_diameter())
    degenerate = radius == 0.0
    scale = 1.0 if degenerate else 2.0 * radius
    shift_mu, shift_nu = mu.mean(), nu.mean()
    mu_out = DiscreteMeasure(mu.dim, (mu.atoms - shift_mu) / scale, mu.weights)
    nu_out = DiscreteMeasure(nu.dim, (nu.atoms - shift_nu) / scale, nu.weights)
    rec_mu = NormalizationRecord(shift_mu, scale, radius, degenerate)
    rec_nu = NormalizationRecord(shift_nu, scale, radius, degenerate)
    return mu_out, nu_out, rec_mu, rec_nu


def sample(dist: DistributionSpec, n: int, seed: int) -> DiscreteMeasure:
    """Draw n i.i.d. points from the named distribution (uniform weights)."""
    if n < 1:
        raise ValueError(f"sample size must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    d = dist.dim
    if dist.kind == "point-mass":
        points = np.zeros((n, d))
    elif dist.kind == "uniform-cube":
        points = rng.uniform(-dist.radius, dist.radius, size=(n, d))
    elif dist.kind == "uniform-ball":
        direction = rng.standard_normal(size=(n, d))
        norms = np.sqrt((direction**2).sum(axis=1, keepdims=True))
        norms[norms == 0] = 1.0
        radii = dist.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
        points = direction / norms * radii
    elif dist.kind == "two-point":
        hits = rng.uniform(0.0, 1.0, size=n) < dist.p
        points = np.zeros((n, d))
        points[hits, 0] = dist.radius
    else:  # pragma: no cover - guarded by DistributionSpec validation
        raise ValueError(f"unknown distribution kind {dist.kind!r}")
    return empirical_from_samples(points)


def population_measure(dist: DistributionSpec) -> DiscreteMeasure:
    """The distribution itself as a discrete measure, when finitely supported."""
    d = dist.dim
    if dist.kind == "point-mass":
        return DiscreteMeasure(d, np.zeros((1, d)), np.ones(1))
    if dist.kind == "two-point":
        atoms = np.zeros((2, d))
        atoms[1, 0] = dist.radius
        return DiscreteMeasure(d, atoms, np.array([1.0 - dist.p, dist.p]))
    raise ValueError(f"{dist.kind} has no finite support")


def population_moment(dist: DistributionSpec, alpha) -> float:
    """Closed-form population moment E[x^alpha] where available.

    Supported kinds: point-mass, two-point, uniform-cube.  The uniform ball
    has no implementation here; estimate it by sampling instead.
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != dist.dim:
        raise ValueError(f"multi-index length {len(alpha)} != dim {dist.dim}")
    if any(a < 0 for a in alpha):
        raise ValueError("multi-index entries must be nonnegative")
    if dist.kind == "point-mass":
        return 1.0 if sum(alpha) == 0 else 0.0
    if dist.kind == "two-point":
        if any(a > 0 for a in alpha[1:]):
            return 1.0 - dist.p if sum(alpha) == 0 else 0.0
        if alpha[0] == 0:
            return 1.0
        return dist.p * dist.radius ** alpha[0]
    if dist.kind == "uniform-cube":
        out = 1.0
        for a in alpha:
            if a % 2 == 1:
                return 0.0
            out *= dist.radius**a / (a + 1)
        return out
    raise ValueError(f"no closed-form moments for {dist.kind}")


def moment(m: DiscreteMeasure, alpha) -> float:
    """Weighted moment sum_i w_i * atoms_i^alpha with z^alpha = prod z_j^alpha_j."""
    alpha = np.asarray(alpha, dtype=int)
    if alpha.shape != (m.dim,):
        raise ValueError(f"multi-index length {alpha.shape} != dim ({m.dim},)")
    if np.any(alpha < 0):
        raise ValueError("multi-index entries must be nonnegative")
    mono = np.prod(m.atoms ** alpha[None, :], axis=1)
    return float(m.weights @ mono)
