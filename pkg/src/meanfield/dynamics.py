"""Coupled N-particle dynamics and the discretized Lagrangian cost."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .system import ControlSet, ControlSystem
from .transport import EmpiricalMeasure


class BlowUpError(FloatingPointError):
    """Raised when the state stops being finite during integration."""

    def __init__(self, time: float, node: int):
        super().__init__(f"non-finite state at t={time:.6g} (grid node {node})")
        self.time = time
        self.node = node


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")

    @property
    def h(self) -> float:
        return self.T / self.K

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)

    def refine(self, m: int) -> TimeGrid:
        return TimeGrid(self.T, self.K * m)


@dataclass(frozen=True, eq=False)
class PiecewiseConstantControl:
    """Per-cell, per-particle control values of shape ``(K, N, m)``."""

    grid: TimeGrid
    values: np.ndarray
    control_set: ControlSet

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 3 or vals.shape[0] != self.grid.K or vals.shape[2] != self.control_set.m:
            raise ValueError(
                f"control values must have shape (K={self.grid.K}, N, m={self.control_set.m}), got {vals.shape}"
            )
        if not self.control_set.contains(vals).all():
            raise ValueError("control values leave the control set")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, u, control_set: ControlSet) -> PiecewiseConstantControl:
        u = np.asarray(u, dtype=float)
        return cls(grid, np.broadcast_to(u, (grid.K,) + u.shape).copy(), control_set)

    def to_json(self) -> dict:
        return {
            "T": self.grid.T,
            "K": self.grid.K,
            "control_set": self.control_set.to_json(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> PiecewiseConstantControl:
        return cls(TimeGrid(float(obj["T"]), int(obj["K"])), np.asarray(obj["values"]), ControlSet.from_json(obj["control_set"]))


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Particle states at the grid nodes, shape ``(K+1, N, d)``."""

    grid: TimeGrid
    states: np.ndarray

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])

    def to_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["t", "particle"] + [f"x{j + 1}" for j in range(self.d)])
        for k, t in enumerate(self.grid.nodes):
            for i in range(self.N):
                w.writerow([repr(float(t)), i] + [repr(float(v)) for v in self.states[k, i]])


def _as_states(X0, d: int) -> np.ndarray:
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim == 1 and d == 1:
        X0 = X0[:, None]
    if X0.ndim != 2 or X0.shape[1] != d:
        raise ValueError(f"X0 must have shape (N, {d}), got {X0.shape}")
    if not np.isfinite(X0).all():
        raise ValueError("X0 must be finite")
    return X0


def _rk4(X0: np.ndarray, grid: TimeGrid, substeps: int, cell_field: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """Classical RK4 with all particles advanced synchronously.

    ``cell_field(k, X)`` is the velocity of every particle in cell ``k`` given
    the full state ``X``; it is called once per stage so each stage sees a
    coherent empirical measure.
    """
    if int(substeps) != substeps or substeps < 1:
        raise ValueError(f"substeps must be a positive integer, got {substeps}")
    dt = grid.h / substeps
    out = np.empty((grid.K + 1,) + X0.shape)
    out[0] = X0
    X = X0.copy()

    def stage(k, Y, t):
        if not np.isfinite(Y).all():
            raise BlowUpError(t, k)
        V = np.asarray(cell_field(k, Y), dtype=float)
        if not np.isfinite(V).all():
            raise BlowUpError(t, k)
        return V

    for k in range(grid.K):
        t0 = k * grid.h
        for s in range(substeps):
            t = t0 + s * dt
            k1 = stage(k, X, t)
            k2 = stage(k, X + 0.5 * dt * k1, t)
            k3 = stage(k, X + 0.5 * dt * k2, t)
            k4 = stage(k, X + dt * k3, t)
            X = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(X).all():
            raise BlowUpError((k + 1) * grid.h, k + 1)
        out[k + 1] = X
    return out


def integrate(system: ControlSystem, X0, control: PiecewiseConstantControl, substeps: int = 4) -> TrajectoryBundle:
    """Solve ``dX_i/dt = f(X_i, u_i(t), mu_t)`` on the control's grid with RK4."""
    X0 = _as_states(X0, system.d)
    if control.N != X0.shape[0]:
        raise ValueError(f"control has {control.N} particles, X0 has {X0.shape[0]}")
    if control.control_set.m != system.m:
        raise ValueError("control dimension does not match the system")
    vals = control.values

    def field(k, X):
        return system.f(X, vals[k], EmpiricalMeasure(X))

    return TrajectoryBundle(control.grid, _rk4(X0, control.grid, substeps, field))


def _trapezoid(grid: TimeGrid, integrand: Callable[[int, np.ndarray], np.ndarray], states: np.ndarray) -> float:
    total = 0.0
    for k in range(grid.K):
        a = np.mean(integrand(k, states[k]))
        b = np.mean(integrand(k, states[k + 1]))
        total += 0.5 * grid.h * (a + b)
    return float(total)


def _check_grids(bundle: TrajectoryBundle, grid: TimeGrid, N: int) -> None:
    if bundle.grid != grid:
        raise ValueError(f"grid mismatch: bundle {bundle.grid} vs control {grid}")
    if bundle.N != N:
        raise ValueError("particle count mismatch between bundle and control")


def cost_terms(system: ControlSystem, bundle: TrajectoryBundle, control: PiecewiseConstantControl) -> tuple[float, float]:
    """Running and terminal parts of the particle-averaged cost."""
    _check_grids(bundle, control.grid, control.N)
    vals = control.values

    def integrand(k, X):
        return system.running_cost(X, vals[k], EmpiricalMeasure(X))

    running = _trapezoid(control.grid, integrand, bundle.states)
    XT = bundle.states[-1]
    terminal = float(np.mean(system.terminal_cost(XT, EmpiricalMeasure(XT))))
    return running, terminal


def cost(system: ControlSystem, bundle: TrajectoryBundle, control: PiecewiseConstantControl) -> float:
    running, terminal = cost_terms(system, bundle, control)
    return running + terminal


@dataclass
class AprioriReport:
    passed: bool
    bound_rhs: float
    sup_norm: float
    bound_slack: float
    lipschitz_rhs_rate: float
    lipschitz_slack: float
    C: float


def apriori_check(bundle: TrajectoryBundle, system: ControlSystem, X0, C: float | None = None) -> AprioriReport:
    """Compare a trajectory with the Gronwall-type a priori estimates.

    With ``C`` the growth constant of ``f`` (the system's declared one unless
    given), checks ``sup_t ||X_t||_p <= e^{2CT} (||X0||_p + CT)`` and, for each
    grid step, ``||X_{t+h} - X_t||_p <= h (C + 2C e^{2CT} (||X0||_p + CT))``.
    """
    X0 = _as_states(X0, system.d)
    C = float(system.C_growth if C is None else C)
    p, T = system.p, bundle.grid.T

    def lp(A):
        return float(np.mean(np.linalg.norm(A, axis=-1) ** p) ** (1.0 / p))

    n0 = lp(X0)
    rhs = np.exp(2 * C * T) * (n0 + C * T)
    sup_norm = max(lp(S) for S in bundle.states)
    rate = C + 2 * C * rhs
    h = bundle.grid.h
    steps = [lp(bundle.states[k + 1] - bundle.states[k]) for k in range(bundle.grid.K)]
    lip_slack = min(h * rate - s for s in steps)
    bound_slack = rhs - sup_norm
    return AprioriReport(
        passed=bool(bound_slack >= 0 and lip_slack >= 0),
        bound_rhs=float(rhs),
        sup_norm=sup_norm,
        bound_slack=float(bound_slack),
        lipschitz_rhs_rate=float(rate),
        lipschitz_slack=float(lip_slack),
        C=C,
    )
