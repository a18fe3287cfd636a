"""Exact optimal transport between equal-size empirical measures."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform average of ``N`` Dirac masses in ``R^d``.

    ``points`` is stored as a read-only ``(N, d)`` float array. Point order is
    kept (it is the particle labelling) but carries no meaning for the measure.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be a non-empty (N, d) array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self):
        return self.N

    def __repr__(self):
        return f"EmpiricalMeasure(N={self.N}, d={self.d})"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j + 1}" for j in range(self.d)])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> EmpiricalMeasure:
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        if not rows:
            raise ValueError(f"{path}: empty file")
        return cls(np.array([[float(v) for v in r] for r in rows[1:] if r]))

    def to_json(self) -> list[list[float]]:
        return self.points.tolist()


@dataclass(frozen=True, eq=False)
class Assignment:
    """Bijection ``i -> perm[i]`` from the points of one measure to another."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.intp).ravel()
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("perm is not a permutation of 0..N-1")
        perm.setflags(write=False)
        object.__setattr__(self, "perm", perm)

    @classmethod
    def identity(cls, n: int) -> Assignment:
        return cls(np.arange(n))

    @property
    def N(self) -> int:
        return self.perm.size

    def compose(self, first: Assignment) -> Assignment:
        """Return ``self o first`` (apply ``first``, then ``self``)."""
        return Assignment(self.perm[first.perm])

    def inverse(self) -> Assignment:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return Assignment(inv)


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.N != nu.N:
        raise ValueError(f"size mismatch: {mu.N} != {nu.N}")
    if mu.d != nu.d:
        raise ValueError(f"dimension mismatch: {mu.d} != {nu.d}")


def cost_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return dist * dist if p == 2 else dist**p


def plan_cost(mu: EmpiricalMeasure, nu: EmpiricalMeasure, plan: Assignment, p: float) -> float:
    """``(1/N) sum_i |x_i - y_perm(i)|^p`` for a given plan."""
    dist = np.linalg.norm(mu.points - nu.points[plan.perm], axis=1)
    return float(np.mean(dist * dist if p == 2 else dist**p))


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> tuple[float, Assignment]:
    """Exact ``W_p`` between two uniform empirical measures of equal size.

    Solved as a linear assignment problem on the cost ``|x_i - y_j|^p``.
    Returns the distance and an optimal assignment; when several permutations
    are optimal the solver's deterministic choice is returned.
    """
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    _check_pair(mu, nu)
    C = cost_matrix(mu, nu, p)
    _, cols = linear_sum_assignment(C)
    cost = float(np.mean(C[np.arange(mu.N), cols]))
    return cost ** (1.0 / p), Assignment(cols)


def wasserstein_pp(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> tuple[float, Assignment]:
    """Like :func:`wasserstein` but returns ``W_p^p`` (no root taken)."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    _check_pair(mu, nu)
    C = cost_matrix(mu, nu, p)
    _, cols = linear_sum_assignment(C)
    return float(np.mean(C[np.arange(mu.N), cols])), Assignment(cols)


def moment(mu: EmpiricalMeasure, p: float = 2.0) -> float:
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.mean(norms**p) ** (1.0 / p))


def lp_distance(X: np.ndarray, Y: np.ndarray, p: float = 2.0) -> float:
    """``((1/N) sum_i |X_i - Y_i|^p)^(1/p)`` for point lists with common indexing."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X, Y = X[:, None], Y[:, None]
    return float(np.mean(np.linalg.norm(X - Y, axis=1) ** p) ** (1.0 / p))


def mccann_interpolate(mu: EmpiricalMeasure, nu: EmpiricalMeasure, plan: Assignment, t: float) -> EmpiricalMeasure:
    """Points ``(1-t) x_i + t y_perm(i)``; a geodesic point when ``plan`` is W2-optimal."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    _check_pair(mu, nu)
    if plan.N != mu.N:
        raise ValueError("plan size does not match the measures")
    if t == 0.0:
        return mu
    return EmpiricalMeasure((1.0 - t) * mu.points + t * nu.points[plan.perm])


def same_support(mu: EmpiricalMeasure, nu: EmpiricalMeasure, atol: float = 0.0) -> bool:
    """True when the two measures coincide as multisets of points."""
    if mu.N != nu.N or mu.d != nu.d:
        return False
    a = mu.points[np.lexsort(mu.points.T[::-1])]
    b = nu.points[np.lexsort(nu.points.T[::-1])]
    return bool(np.all(np.abs(a - b) <= atol))
