"""Reconstruct particle curves from a path of empirical measures.

Consecutive measures of a dyadically sampled path are matched by optimal
permutations; composing those permutations labels the points so that each
label traces one polyline. The resulting uniform measure on curves has the
given measures as its time marginals at every sample time.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transport import Assignment, EmpiricalMeasure, wasserstein


@dataclass(frozen=True, eq=False)
class MarginalPath:
    """Measures sampled at ``t_n = n T 2^-M``, ``n = 0..2^M``."""

    T: float
    M: int
    measures: tuple

    def __post_init__(self):
        meas = tuple(self.measures)
        if self.M < 0 or int(self.M) != self.M:
            raise ValueError(f"M must be a nonnegative integer, got {self.M}")
        if len(meas) != 2**self.M + 1:
            raise ValueError(f"level M={self.M} needs {2**self.M + 1} measures, got {len(meas)}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        N, d = meas[0].N, meas[0].d
        for n, mu in enumerate(meas):
            if mu.N != N:
                raise ValueError(f"particle count changes at sample {n}: {mu.N} != {N}")
            if mu.d != d:
                raise ValueError(f"dimension changes at sample {n}")
        object.__setattr__(self, "measures", meas)

    @property
    def N(self) -> int:
        return self.measures[0].N

    @property
    def d(self) -> int:
        return self.measures[0].d

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(2**self.M + 1) / 2**self.M

    @classmethod
    def from_states(cls, T: float, states) -> MarginalPath:
        """Path from an array of shape ``(2^M + 1, N, d)``."""
        states = np.asarray(states, dtype=float)
        n = states.shape[0] - 1
        M = int(round(np.log2(n))) if n > 0 else 0
        if 2**M != n:
            raise ValueError(f"number of samples minus one must be a power of two, got {n}")
        return cls(T, M, tuple(EmpiricalMeasure(s) for s in states))

    def coarsen(self) -> MarginalPath:
        if self.M == 0:
            raise ValueError("cannot coarsen a level-0 path")
        return MarginalPath(self.T, self.M - 1, self.measures[::2])

    @classmethod
    def from_csv(cls, path) -> MarginalPath:
        """Read rows ``t, slot, x1..xd``; slot order inside a time carries no meaning."""
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        if not rows or rows[0][:2] != ["t", "slot"]:
            raise ValueError(f"{path}: expected header 't,slot,x1,...'")
        by_t = defaultdict(list)
        for r in rows[1:]:
            if r:
                by_t[float(r[0])].append((int(r[1]), [float(v) for v in r[2:]]))
        ts = sorted(by_t)
        T = ts[-1]
        n = len(ts) - 1
        expect = T * np.arange(n + 1) / max(n, 1)
        if n < 1 or not np.allclose(ts, expect, rtol=0, atol=1e-12 * max(1.0, T)):
            raise ValueError(f"{path}: times are not a uniform dyadic grid")
        states = [np.array([x for _, x in sorted(by_t[t])]) for t in ts]
        return cls.from_states(T, states)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "slot"] + [f"x{j + 1}" for j in range(self.d)])
            for t, mu in zip(self.times, self.measures):
                for i, x in enumerate(mu.points):
                    w.writerow([repr(float(t)), i] + [repr(float(v)) for v in x])


@dataclass(frozen=True, eq=False)
class SuperpositionMeasure:
    """``N`` equally weighted polylines; ``vertices`` has shape ``(N, 2^M + 1, d)``."""

    times: np.ndarray
    vertices: np.ndarray
    permutations: tuple = field(default=())

    @property
    def N(self) -> int:
        return self.vertices.shape[0]

    def marginal(self, n: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.vertices[:, n])

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices, axis=1), axis=2).sum(axis=1)

    def at(self, t: float) -> np.ndarray:
        """Positions of all curves at time ``t`` (linear interpolation)."""
        out = np.empty((self.N, self.vertices.shape[2]))
        for i in range(self.N):
            for j in range(self.vertices.shape[2]):
                out[i, j] = np.interp(t, self.times, self.vertices[i, :, j])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["curve", "t"] + [f"x{j + 1}" for j in range(self.vertices.shape[2])])
            for i in range(self.N):
                for t, x in zip(self.times, self.vertices[i]):
                    w.writerow([i, repr(float(t))] + [repr(float(v)) for v in x])


def superpose(path: MarginalPath, p: float = 1.0) -> SuperpositionMeasure:
    """Curves through the path built from optimal ``W_p`` matchings (``p=1`` by default).

    Curve ``i`` starts at point ``i`` of the first measure and passes through
    point ``sigma^{0,n}(i)`` of measure ``n``, where ``sigma^{0,n}`` composes
    the consecutive optimal permutations.
    """
    plans = [wasserstein(path.measures[n - 1], path.measures[n], p)[1] for n in range(1, 2**path.M + 1)]
    composed = [Assignment.identity(path.N)]
    for plan in plans:
        composed.append(plan.compose(composed[-1]))
    verts = np.stack([mu.points[s.perm] for mu, s in zip(path.measures, composed)], axis=1)
    return SuperpositionMeasure(path.times, verts, tuple(composed))


@dataclass
class LengthIdentity:
    lhs: float
    rhs: float
    gap: float


def path_length_identity(path: MarginalPath, eta: SuperpositionMeasure) -> LengthIdentity:
    """Mean polyline length of ``eta`` against the path's ``W_1`` length."""
    lhs = float(np.mean(eta.lengths()))
    rhs = float(sum(wasserstein(path.measures[n - 1], path.measures[n], 1)[0] for n in range(1, len(path.measures))))
    return LengthIdentity(lhs, rhs, lhs - rhs)


def _lex_key(curve: np.ndarray) -> tuple:
    return tuple(curve.ravel().tolist())


def refine_consistency(coarse: MarginalPath, fine: MarginalPath, p: float = 1.0) -> float:
    """Sup deviation between reconstructions at levels ``M`` and ``M+1`` on shared nodes.

    Coarse curves are visited in lexicographic order of their vertices and
    each is paired with the nearest unused fine curve at ``t = 0`` (ties go to
    the lexicographically smallest fine curve).
    """
    if fine.M != coarse.M + 1 or not np.isclose(fine.T, coarse.T) or fine.N != coarse.N:
        raise ValueError("fine path must be one dyadic level above the coarse path")
    for n, mu in enumerate(coarse.measures):
        other = fine.measures[2 * n]
        a = mu.points[np.lexsort(mu.points.T[::-1])]
        b = other.points[np.lexsort(other.points.T[::-1])]
        if not np.array_equal(a, b):
            raise ValueError(f"grids are not nested: measures differ at coarse node {n}")
    gc = superpose(coarse, p).vertices
    gf = superpose(fine, p).vertices[:, ::2]
    order_c = sorted(range(gc.shape[0]), key=lambda i: _lex_key(gc[i]))
    order_f = sorted(range(gf.shape[0]), key=lambda i: _lex_key(gf[i]))
    free = list(order_f)
    dev = 0.0
    for i in order_c:
        dists = [np.linalg.norm(gc[i, 0] - gf[j, 0]) for j in free]
        j = free.pop(int(np.argmin(dists)))
        dev = max(dev, float(np.max(np.linalg.norm(gc[i] - gf[j], axis=1))))
    return dev


@dataclass
class VelocityField:
    """Central-difference slopes at interior vertices.

    ``velocities[i, n]`` is the slope of curve ``i`` at ``times[n]``; conflicts
    list ``(n, curves)`` where several curves share a point with different slopes.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    conflicts: list


def extract_velocity(eta: SuperpositionMeasure, atol: float = 1e-12, slope_tol: float = 1e-9) -> VelocityField:
    if eta.vertices.shape[1] < 3:
        raise ValueError("need at least three vertices per curve")
    V = eta.vertices
    dt = np.diff(eta.times)
    slopes = (V[:, 2:] - V[:, :-2]) / (dt[1:] + dt[:-1])[None, :, None]
    pos = V[:, 1:-1]
    conflicts = []
    for n in range(pos.shape[1]):
        P, S = pos[:, n], slopes[:, n]
        near = np.linalg.norm(P[:, None] - P[None], axis=2) <= atol
        differ = np.linalg.norm(S[:, None] - S[None], axis=2) > slope_tol * max(1.0, float(np.abs(S).max()))
        hit = np.triu(near & differ, k=1)
        if hit.any():
            members = sorted(set(np.nonzero(hit)[0]) | set(np.nonzero(hit)[1]))
            conflicts.append((n + 1, tuple(int(i) for i in members)))
    return VelocityField(eta.times[1:-1], pos, slopes, conflicts)
