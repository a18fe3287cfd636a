"""Value estimation by direct transcription and the barycenter benchmarks."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng
from .dynamics import PiecewiseConstantControl, TimeGrid, _as_states, cost, integrate
from .system import ControlSystem, make_barycenter_system
from .transport import Assignment, EmpiricalMeasure, mccann_interpolate, wasserstein_pp

COUNTEREXAMPLE_VALUE = 1.0 / 24.0


def counterexample_value(T: float = 1.0) -> float:
    """Continuum value of the segment-to-square instance: ``W_2^2 / (1 + T)`` with ``W_2^2 = 1/12``."""
    return (1.0 / 12.0) / (1.0 + T)


@dataclass(frozen=True)
class OptimizerConfig:
    starts: int = 4
    max_iters: int = 200
    step: float = 1.0
    backtrack: float = 0.5
    fd_eps: Optional[float] = None
    tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        for nm in ("starts", "max_iters", "step", "tol"):
            if not getattr(self, nm) > 0:
                raise ValueError(f"{nm} must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.fd_eps is not None and not self.fd_eps > 0:
            raise ValueError("fd_eps must be positive")


@dataclass
class StartResult:
    value: float
    control: PiecewiseConstantControl
    history: list
    stationarity: list
    converged: bool
    iterations: int


@dataclass
class ValueReport:
    value: float
    control: PiecewiseConstantControl
    starts: list
    converged: bool
    wall_time: float

    @property
    def histories(self) -> list:
        return [s.history for s in self.starts]

    def history_rows(self):
        for s, res in enumerate(self.starts):
            for it, (v, g) in enumerate(zip(res.history, res.stationarity)):
                yield s, it, v, g


def _trusted_control(grid, values, control_set) -> PiecewiseConstantControl:
    # finite-difference probes may step just outside U; skip the membership check
    ctrl = object.__new__(PiecewiseConstantControl)
    object.__setattr__(ctrl, "grid", grid)
    object.__setattr__(ctrl, "values", values)
    object.__setattr__(ctrl, "control_set", control_set)
    return ctrl


def fd_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, eps=None, scheme: str = "central") -> np.ndarray:
    """Finite-difference gradient of ``fun`` at ``x``.

    The default step is ``eps_mach^(1/3) * max(1, |x_j|)`` per entry.
    ``scheme`` is ``"central"`` or ``"forward"``.
    """
    x = np.asarray(x, dtype=float)
    if eps is None:
        steps = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x))
    else:
        steps = np.broadcast_to(np.asarray(eps, dtype=float), x.shape)
    g = np.empty_like(x)
    f0 = fun(x) if scheme == "forward" else None
    flat, gflat, sflat = x.reshape(-1), g.reshape(-1), steps.reshape(-1)
    for j in range(flat.size):
        e = sflat[j]
        xp = flat.copy()
        xp[j] += e
        if scheme == "central":
            xm = flat.copy()
            xm[j] -= e
            gflat[j] = (fun(xp.reshape(x.shape)) - fun(xm.reshape(x.shape))) / (2 * e)
        elif scheme == "forward":
            gflat[j] = (fun(xp.reshape(x.shape)) - f0) / e
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return g


class _Problem:
    def __init__(self, system, X0, grid, substeps, fd_eps):
        self.system, self.X0, self.grid = system, X0, grid
        self.substeps, self.fd_eps = substeps, fd_eps
        self.U = system.control_set

    def evaluate(self, values):
        ctrl = _trusted_control(self.grid, values, self.U)
        bundle = integrate(self.system, self.X0, ctrl, self.substeps)
        return cost(self.system, bundle, ctrl), ctrl, bundle

    def value(self, values) -> float:
        return self.evaluate(values)[0]

    def gradient(self, values, ctrl, bundle) -> np.ndarray:
        if self.system.gradient is not None:
            return np.asarray(self.system.gradient(self.X0, ctrl, bundle), dtype=float)
        return fd_gradient(self.value, values, self.fd_eps)


def _descend(prob: _Problem, u0: np.ndarray, config: OptimizerConfig) -> StartResult:
    """Projected gradient descent with backtracking in the ``L^2(dt x P^N)`` metric."""
    N, h = u0.shape[1], prob.grid.h
    weight = h / N  # measure of one (cell, particle) entry
    U = prob.U
    u = U.project(u0)
    J, ctrl, bundle = prob.evaluate(u)
    history, stat_hist = [], []
    s = config.step
    converged = False
    it = 0
    for it in range(config.max_iters):
        G = prob.gradient(u, ctrl, bundle) / weight
        stat = float(np.max(np.abs(u - U.project(u - G)))) if u.size else 0.0
        history.append(J)
        stat_hist.append(stat)
        if stat <= config.tol:
            converged = True
            break
        accepted = False
        while s > 1e-14:
            un = U.project(u - s * G)
            du = un - u
            Jn, cn, bn = prob.evaluate(un)
            if Jn <= J + weight * float(np.sum(G * du)) + weight * float(np.sum(du * du)) / (2 * s):
                accepted = True
                break
            s *= config.backtrack
        if not accepted:
            break
        u, J, ctrl, bundle = un, Jn, cn, bn
        s = min(config.step, s / config.backtrack)
    final = PiecewiseConstantControl(prob.grid, u, U)
    return StartResult(J, final, history, stat_hist, converged, it)


def estimate_value(
    system: ControlSystem,
    X0,
    grid: TimeGrid,
    config: OptimizerConfig = OptimizerConfig(),
    substeps: int = 4,
    warm_start: Optional[PiecewiseConstantControl] = None,
) -> ValueReport:
    """Best cost found over piecewise-constant controls on ``grid`` (an upper bound on the value).

    Start 0 is ``warm_start`` if given, otherwise the control closest to zero;
    the remaining ``config.starts - 1`` starts are uniform random controls.
    Gradients come from ``system.gradient`` or central finite differences.
    """
    t0 = time.perf_counter()
    X0 = _as_states(X0, system.d)
    N = X0.shape[0]
    U = system.control_set
    shape = (grid.K, N, U.m)
    if warm_start is not None:
        if warm_start.values.shape != shape or warm_start.grid != grid:
            raise ValueError("warm start does not match the grid / particle count")
        first = np.array(warm_start.values)
    else:
        first = np.broadcast_to(U.anchor(), shape).copy()
    inits = [first] + [U.sample(_rng.stream(config.seed, "start", s), shape[:2]) for s in range(1, config.starts)]
    prob = _Problem(system, X0, grid, substeps, config.fd_eps)

    workers = min(_rng.max_workers(), len(inits))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda u: _descend(prob, u, config), inits))
    else:
        results = [_descend(prob, u, config) for u in inits]
    best = min(range(len(results)), key=lambda s: (results[s].value, s))
    return ValueReport(
        value=results[best].value,
        control=results[best].control,
        starts=results,
        converged=any(r.converged for r in results),
        wall_time=time.perf_counter() - t0,
    )


@dataclass
class BarycenterReference:
    value: float
    controls: np.ndarray
    midpoint: EmpiricalMeasure
    plan: Assignment
    required_radius: float


def barycenter_reference(mu0: EmpiricalMeasure, nu: EmpiricalMeasure, T: float = 1.0) -> BarycenterReference:
    """Closed-form optimum of the N-particle barycenter problem.

    With ``pi`` the optimal W2 assignment and ``D_i = y_pi(i) - x_i``, constant
    controls ``D_i / (1 + T)`` are optimal and the value is ``W_2^2 / (1 + T)``;
    for ``T = 1`` that is ``W_2^2 / 2`` with terminal measure the geodesic midpoint.
    The controls are admissible only if the ball radius is at least ``required_radius``.
    """
    if mu0.N != nu.N:
        raise ValueError(f"size mismatch: {mu0.N} != {nu.N}")
    if not T > 0:
        raise ValueError("T must be positive")
    w2sq, plan = wasserstein_pp(mu0, nu, 2)
    delta = nu.points[plan.perm] - mu0.points
    controls = delta / (1.0 + T)
    mid = mccann_interpolate(mu0, nu, plan, T / (1.0 + T))
    return BarycenterReference(
        value=w2sq / (1.0 + T),
        controls=controls,
        midpoint=mid,
        plan=plan,
        required_radius=float(np.max(np.linalg.norm(controls, axis=1))),
    )


def counterexample_instance(k: int) -> tuple[EmpiricalMeasure, EmpiricalMeasure]:
    """``N = k^2`` points on the segment ``{1/2} x [0, 1]`` and the ``k x k`` cell centres of the unit square."""
    if int(k) != k or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k}")
    N = k * k
    seg = np.column_stack([np.full(N, 0.5), (np.arange(N) + 0.5) / N])
    c = (np.arange(k) + 0.5) / k
    gx, gy = np.meshgrid(c, c)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    return EmpiricalMeasure(seg), EmpiricalMeasure(grid)


def splitting_diagnostic(mu0: EmpiricalMeasure, targets: np.ndarray) -> float:
    """Largest distance between the matched targets of neighbouring segment points."""
    order = np.argsort(mu0.points[:, 1], kind="stable")
    t = np.asarray(targets)[order]
    return float(np.max(np.linalg.norm(np.diff(t, axis=0), axis=1)))


@dataclass
class CounterexampleReport:
    k: int
    N: int
    value: float
    discrete_reference: float
    continuum_value: float
    splitting: float
    converged: bool
    wall_time: float

    @property
    def relative_error(self) -> float:
        return abs(self.value - self.continuum_value) / self.continuum_value


def counterexample_demo(
    k: int, grid: TimeGrid = TimeGrid(1.0, 4), config: OptimizerConfig = OptimizerConfig(), R: float = 1.0, substeps: int = 1
) -> CounterexampleReport:
    mu0, nu = counterexample_instance(k)
    t0 = time.perf_counter()
    system = make_barycenter_system(nu, R)
    rep = estimate_value(system, mu0.points, grid, config, substeps)
    ref = barycenter_reference(mu0, nu, grid.T)
    return CounterexampleReport(
        k=k,
        N=mu0.N,
        value=rep.value,
        discrete_reference=ref.value,
        continuum_value=counterexample_value(grid.T),
        splitting=splitting_diagnostic(mu0, nu.points[ref.plan.perm]),
        converged=rep.converged,
        wall_time=time.perf_counter() - t0,
    )


@dataclass
class GammaRow:
    N: int
    value: float
    discrete_reference: float
    reference: float
    relative_error: float
    runtime: float


@dataclass
class GammaTable:
    benchmark: str
    rows: list = field(default_factory=list)

    def to_csv(self, fh, include_runtime: bool = False) -> None:
        w = csv.writer(fh)
        head = ["N", "value", "discrete_reference", "reference", "relative_error"]
        w.writerow(head + (["runtime"] if include_runtime else []))
        for r in self.rows:
            vals = [r.N] + [repr(float(v)) for v in (r.value, r.discrete_reference, r.reference, r.relative_error)]
            w.writerow(vals + ([repr(r.runtime)] if include_runtime else []))


def _instance(kind: str, N: int, seed: int, T: float) -> tuple[EmpiricalMeasure, EmpiricalMeasure, float | None]:
    if kind == "counterexample":
        k = int(round(np.sqrt(N)))
        if k * k != N:
            raise ValueError(f"counterexample needs square N, got {N}")
        mu0, nu = counterexample_instance(k)
        return mu0, nu, counterexample_value(T)
    rng = _rng.stream(seed, f"gamma-{kind}", N)
    if kind == "identical":
        pts = EmpiricalMeasure(rng.uniform(0, 1, size=(N, 2)))
        return pts, pts, 0.0
    if kind == "barycenter":
        return EmpiricalMeasure(rng.uniform(0, 1, size=(N, 2))), EmpiricalMeasure(rng.uniform(0, 1, size=(N, 2))), None
    raise ValueError(f"unknown benchmark {kind!r}")


def gamma_sweep(
    kind: str,
    Ns,
    grid: TimeGrid = TimeGrid(1.0, 4),
    config: OptimizerConfig = OptimizerConfig(),
    R: float = 1.0,
    substeps: int = 1,
) -> GammaTable:
    """Value estimates along increasing particle counts.

    ``kind`` is ``"counterexample"`` (reference is the continuum value 1/24),
    ``"identical"`` (``mu0 = nu``, reference 0) or ``"barycenter"`` (random
    pairs, reference is the discrete closed form). The relative error is taken
    against the reference, or is the absolute error when the reference is 0.
    """
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("N list must be strictly increasing")
    table = GammaTable(kind)

    def row(N):
        t0 = time.perf_counter()
        mu0, nu, ref = _instance(kind, N, config.seed, grid.T)
        rep = estimate_value(make_barycenter_system(nu, R), mu0.points, grid, config, substeps)
        disc = barycenter_reference(mu0, nu, grid.T).value
        ref = disc if ref is None else ref
        err = abs(rep.value - ref) / abs(ref) if ref != 0 else abs(rep.value - ref)
        return GammaRow(N, rep.value, disc, ref, err, time.perf_counter() - t0)

    workers = min(_rng.max_workers(), len(Ns))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            table.rows = list(ex.map(row, Ns))
    else:
        table.rows = [row(N) for N in Ns]
    return table
