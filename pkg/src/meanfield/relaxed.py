"""Relaxed (Young-measure) controls, chattering, and finite partition averages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import (
    PiecewiseConstantControl,
    TimeGrid,
    TrajectoryBundle,
    _as_states,
    _check_grids,
    _rk4,
    _trapezoid,
)
from .system import ControlSet, ControlSystem
from .transport import EmpiricalMeasure

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Finitely atomic relaxed control.

    ``atoms`` has shape ``(K, N, A, m)`` and ``weights`` shape ``(K, N, A)``;
    entry ``(k, i)`` is the mixture ``sum_j weights[k, i, j] * delta(atoms[k, i, j])``.
    Entries with fewer than ``A`` atoms are padded with zero-weight atoms.
    Atom order is the construction order and is what :func:`chatter` follows.
    """

    grid: TimeGrid
    atoms: np.ndarray
    weights: np.ndarray
    control_set: ControlSet

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        w = np.array(self.weights, dtype=float)
        K, m = self.grid.K, self.control_set.m
        if atoms.ndim != 4 or atoms.shape[0] != K or atoms.shape[3] != m:
            raise ValueError(f"atoms must have shape (K={K}, N, A, m={m}), got {atoms.shape}")
        if w.shape != atoms.shape[:3]:
            raise ValueError(f"weights shape {w.shape} does not match atoms {atoms.shape[:3]}")
        if np.any(w < 0) or not np.isfinite(w).all():
            raise ValueError("weights must be finite and nonnegative")
        if np.max(np.abs(w.sum(axis=2) - 1.0)) > WEIGHT_TOL:
            raise ValueError("weights of every entry must sum to 1")
        if not self.control_set.contains(atoms).all():
            raise ValueError("atoms leave the control set")
        atoms.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @property
    def N(self) -> int:
        return self.atoms.shape[1]

    @property
    def A(self) -> int:
        return self.atoms.shape[2]

    @classmethod
    def from_control(cls, control: PiecewiseConstantControl) -> RelaxedControl:
        """Dirac relaxed control ``delta(u(t))``."""
        v = control.values
        return cls(control.grid, v[:, :, None, :], np.ones(v.shape[:2] + (1,)), control.control_set)

    @classmethod
    def from_entries(cls, grid: TimeGrid, entries, control_set: ControlSet, max_atoms: int | None = None) -> RelaxedControl:
        """Build from nested ``entries[k][i] = (atoms, weights)`` lists."""
        K = len(entries)
        N = len(entries[0]) if K else 0
        A = max(len(e[1]) for row in entries for e in row)
        if max_atoms is not None and A > max_atoms:
            raise ValueError(f"an entry has {A} atoms, more than the allowed {max_atoms}")
        atoms = np.empty((K, N, A, control_set.m))
        w = np.zeros((K, N, A))
        for k, row in enumerate(entries):
            if len(row) != N:
                raise ValueError("every cell must list the same number of particles")
            for i, (a, wt) in enumerate(row):
                a = np.asarray(a, dtype=float).reshape(-1, control_set.m)
                n = len(wt)
                if a.shape[0] != n:
                    raise ValueError(f"entry ({k}, {i}): {a.shape[0]} atoms but {n} weights")
                atoms[k, i, :n] = a
                atoms[k, i, n:] = a[0]
                w[k, i, :n] = wt
        return cls(grid, atoms, w, control_set)

    def barycenter(self) -> PiecewiseConstantControl:
        """Ordinary control at the per-entry mean atom ``sum_j w_j u_j``."""
        mean = np.einsum("kij,kijm->kim", self.weights, self.atoms)
        return PiecewiseConstantControl(self.grid, self.control_set.project(mean), self.control_set)

    def refine(self, m: int) -> RelaxedControl:
        """The same control on a grid with every cell split into ``m`` subcells."""
        if int(m) != m or m < 1:
            raise ValueError(f"m must be a positive integer, got {m}")
        rep = np.repeat(np.arange(self.grid.K), m)
        return RelaxedControl(self.grid.refine(m), self.atoms[rep], self.weights[rep], self.control_set)

    def to_json(self) -> dict:
        entries = []
        for k in range(self.grid.K):
            row = []
            for i in range(self.N):
                keep = self.weights[k, i] > 0
                row.append({"atoms": self.atoms[k, i][keep].tolist(), "weights": self.weights[k, i][keep].tolist()})
            entries.append(row)
        return {"T": self.grid.T, "K": self.grid.K, "control_set": self.control_set.to_json(), "entries": entries}

    @classmethod
    def from_json(cls, obj: dict, max_atoms: int | None = None) -> RelaxedControl:
        grid = TimeGrid(float(obj["T"]), int(obj["K"]))
        if len(obj["entries"]) != grid.K:
            raise ValueError(f"expected {grid.K} cells of entries, got {len(obj['entries'])}")
        entries = [[(e["atoms"], e["weights"]) for e in row] for row in obj["entries"]]
        return cls.from_entries(grid, entries, ControlSet.from_json(obj["control_set"]), max_atoms)


def _mix(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # sum over atoms in index order
    out = weights[:, 0, None] * values[:, 0] if values.ndim == 3 else weights[:, 0] * values[:, 0]
    for j in range(1, weights.shape[1]):
        out = out + (weights[:, j, None] * values[:, j] if values.ndim == 3 else weights[:, j] * values[:, j])
    return out


def relaxed_integrate(system: ControlSystem, X0, sigma: RelaxedControl, substeps: int = 4) -> TrajectoryBundle:
    """Integrate with the averaged field ``sum_j w_j f(x, u_j, mu)``."""
    X0 = _as_states(X0, system.d)
    if sigma.N != X0.shape[0]:
        raise ValueError(f"relaxed control has {sigma.N} particles, X0 has {X0.shape[0]}")
    atoms, w = sigma.atoms, sigma.weights

    def field(k, X):
        mu = EmpiricalMeasure(X)
        vals = np.stack([system.f(X, atoms[k, :, j], mu) for j in range(sigma.A)], axis=1)
        return _mix(vals, w[k])

    return TrajectoryBundle(sigma.grid, _rk4(X0, sigma.grid, substeps, field))


def relaxed_cost_terms(system: ControlSystem, bundle: TrajectoryBundle, sigma: RelaxedControl) -> tuple[float, float]:
    _check_grids(bundle, sigma.grid, sigma.N)
    atoms, w = sigma.atoms, sigma.weights

    def integrand(k, X):
        mu = EmpiricalMeasure(X)
        vals = np.stack([system.running_cost(X, atoms[k, :, j], mu) for j in range(sigma.A)], axis=1)
        return _mix(vals, w[k])

    running = _trapezoid(sigma.grid, integrand, bundle.states)
    XT = bundle.states[-1]
    terminal = float(np.mean(system.terminal_cost(XT, EmpiricalMeasure(XT))))
    return running, terminal


def relaxed_cost(system: ControlSystem, bundle: TrajectoryBundle, sigma: RelaxedControl) -> float:
    running, terminal = relaxed_cost_terms(system, bundle, sigma)
    return running + terminal


def apportion(weights, m: int) -> np.ndarray:
    """Largest-remainder apportionment of ``m`` seats; ties go to the first index."""
    w = np.asarray(weights, dtype=float)
    quota = m * w
    seats = np.floor(quota + 1e-12).astype(int)
    seats = np.minimum(seats, m)
    left = m - int(seats.sum())
    if left > 0:
        rem = quota - seats
        order = sorted(range(w.size), key=lambda j: (-rem[j], j))
        for j in order[:left]:
            seats[j] += 1
    elif left < 0:
        # only reachable through rounding slack; take seats back from the smallest remainders
        rem = quota - seats
        order = sorted(range(w.size), key=lambda j: (rem[j], -j))
        for j in order:
            if left == 0:
                break
            if seats[j] > 0:
                seats[j] -= 1
                left += 1
    return seats


def chatter(sigma: RelaxedControl, m: int) -> PiecewiseConstantControl:
    """Ordinary control switching between atoms with time fractions ``~ w_j``.

    Every cell is split into ``m`` equal subcells and atom ``j`` receives a
    consecutive block of ``apportion(w, m)[j]`` subcells, in atom order.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    K, N = sigma.grid.K, sigma.N
    out = np.empty((K * m, N, sigma.control_set.m))
    for k in range(K):
        for i in range(N):
            seats = apportion(sigma.weights[k, i], m)
            idx = np.repeat(np.arange(sigma.A), seats)
            out[k * m:(k + 1) * m, i] = sigma.atoms[k, i, idx]
    return PiecewiseConstantControl(sigma.grid.refine(m), out, sigma.control_set)


@dataclass(frozen=True, eq=False)
class PartitionProjection:
    """Cell averages of a function on the uniform partition of ``[0, 1]`` into ``N`` cells."""

    N: int
    values: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.clip(np.floor(x * self.N).astype(int), 0, self.N - 1)
        return self.values[k]


def _eval(g: Callable, x: np.ndarray) -> np.ndarray:
    v = np.asarray(g(x), dtype=float)
    return v.reshape(x.size, -1)


def partition_project(g: Callable, N: int, samples_per_cell: int = 64) -> PartitionProjection:
    """Average ``g`` over ``[(k-1)/N, k/N)`` with the composite midpoint rule.

    ``g`` maps an array of points of ``[0, 1]`` to values of shape ``(n,)`` or ``(n, q)``.
    """
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    n = N * samples_per_cell
    x = (np.arange(n) + 0.5) / n
    vals = _eval(g, x).reshape(N, samples_per_cell, -1).mean(axis=1)
    return PartitionProjection(int(N), vals)


def l1_error(g: Callable, proj: PartitionProjection, samples_per_cell: int = 1024) -> float:
    """Midpoint-rule estimate of ``int_0^1 |g^N - g|``."""
    n = proj.N * samples_per_cell
    x = (np.arange(n) + 0.5) / n
    diff = _eval(g, x) - proj.values[np.repeat(np.arange(proj.N), samples_per_cell)]
    return float(np.mean(np.linalg.norm(diff, axis=1)))
