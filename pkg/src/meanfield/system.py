"""Control systems ``(U, f, C, C_T)`` and sampled checks of their regularity."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng
from .transport import EmpiricalMeasure, moment, wasserstein, wasserstein_pp


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Compact convex control set in ``R^m``: a box or a closed ball.

    Use :meth:`box` / :meth:`ball` to build one. All methods act on arrays
    whose last axis is the control coordinate.
    """

    kind: str
    m: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    @classmethod
    def box(cls, lower, upper) -> ControlSet:
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()) or np.any(lo > hi):
            raise ValueError("box bounds must be finite with lower <= upper")
        return cls("box", lo.size, lower=lo, upper=hi)

    @classmethod
    def ball(cls, center, radius: float) -> ControlSet:
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if c.ndim != 1 or not np.isfinite(c).all():
            raise ValueError("ball center must be a finite 1-d array")
        if not (np.isfinite(radius) and radius >= 0):
            raise ValueError(f"ball radius must be finite and >= 0, got {radius}")
        return cls("ball", c.size, center=c, radius=float(radius))

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.all((u >= self.lower) & (u <= self.upper), axis=-1)
        return np.linalg.norm(u - self.center, axis=-1) <= self.radius

    def project(self, u) -> np.ndarray:
        """Euclidean projection; the result always satisfies :meth:`contains`."""
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        v = u - self.center
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        scale = np.where(n > self.radius, self.radius / np.where(n > 0, n, 1.0), 1.0)
        out = self.center + v * scale
        # radial rescaling can land one ulp outside the ball
        # (the step must exceed the ulp of the center coordinates, not only of the radius)
        ulp = np.finfo(float).eps * (float(np.max(np.abs(self.center))) + self.radius)
        for i in range(16):
            bad = ~self.contains(out)
            if not bad.any():
                break
            w = out[bad] - self.center
            nw = np.linalg.norm(w, axis=-1, keepdims=True)
            shrink = np.clip(1.0 - 4 * 2**i * ulp / np.where(nw > 0, nw, 1.0), 0.0, 1.0)
            out[bad] = self.center + w * shrink
        return out

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        """Uniform samples from the set."""
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, size=shape + (self.m,))
        g = rng.standard_normal(shape + (self.m,))
        g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
        r = self.radius * rng.uniform(size=shape + (1,)) ** (1.0 / self.m)
        return self.project(self.center + r * g)

    def anchor(self) -> np.ndarray:
        """The point of the set closest to the origin (the "do nothing" control)."""
        return self.project(np.zeros(self.m))

    def to_json(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}

    @classmethod
    def from_json(cls, obj: dict) -> ControlSet:
        if obj["kind"] == "box":
            return cls.box(obj["lower"], obj["upper"])
        if obj["kind"] == "ball":
            return cls.ball(obj["center"], obj["radius"])
        raise ValueError(f"unknown control set kind {obj['kind']!r}")


Field = Callable[[np.ndarray, np.ndarray, EmpiricalMeasure], np.ndarray]
RunningCost = Callable[[np.ndarray, np.ndarray, EmpiricalMeasure], np.ndarray]
TerminalCost = Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """A mean-field control system with its declared regularity constants.

    The callables are evaluated on batches of particles: ``f(X, U, mu)`` takes
    ``X`` of shape ``(n, d)`` and ``U`` of shape ``(n, m)`` and returns
    ``(n, d)``; ``running_cost(X, U, mu)`` and ``terminal_cost(X, mu)`` return
    ``(n,)``. ``mu`` is the current empirical measure of the whole population.

    ``gradient``, when set, maps ``(X0, control, bundle)`` to the gradient of
    the discretized cost with respect to ``control.values``; the optimizer
    falls back to finite differences otherwise. ``population``, when set, is
    the only measure size the callables accept.
    """

    d: int
    control_set: ControlSet
    f: Field
    running_cost: RunningCost
    terminal_cost: TerminalCost
    L: float = 1.0
    C_growth: float = 1.0
    D_cost: float = 1.0
    p: float = 2.0
    affine_in_u: bool = False
    name: str = "custom"
    gradient: Optional[Callable] = None
    population: Optional[int] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("state dimension must be >= 1")
        for nm in ("L", "C_growth", "D_cost"):
            v = getattr(self, nm)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"declared constant {nm} must be positive, got {v}")
        if not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")

    @property
    def m(self) -> int:
        return self.control_set.m


def _sqnorm(a: np.ndarray) -> np.ndarray:
    return np.einsum("...j,...j->...", a, a)


def make_barycenter_system(nu: EmpiricalMeasure, R: float, p: float = 2.0) -> ControlSystem:
    """``f = u``, ``C = |u|^2``, ``C_T = W_2^2(mu, nu)`` with ``U`` the ball of radius ``R``.

    The minimal cost from ``mu0`` over a unit horizon is ``W_2^2(mu0, nu) / 2``
    once ``R`` is large enough; see :func:`meanfield.optimize.barycenter_reference`.
    """
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if p < 2:
        raise ValueError("the W_2^2 terminal cost needs p >= 2 for its growth bound")
    d = nu.d

    def f(X, U, mu):
        return np.array(U, dtype=float, copy=True)

    def running(X, U, mu):
        return _sqnorm(U)

    def terminal(X, mu):
        w2sq, _ = wasserstein_pp(mu, nu, 2)
        return np.full(np.shape(X)[0], w2sq)

    def gradient(X0, control, bundle):
        # generalized gradient with the terminal assignment frozen
        h, N = control.grid.h, control.values.shape[1]
        XT = bundle.states[-1]
        _, plan = wasserstein_pp(EmpiricalMeasure(XT), nu, 2)
        resid = XT - nu.points[plan.perm]
        return (2.0 * h / N) * (control.values + resid[None, :, :])

    D = max(R * R, 2.0, 2.0 * moment(nu, 2) ** 2)
    return ControlSystem(
        d=d,
        control_set=ControlSet.ball(np.zeros(d), R),
        f=f,
        running_cost=running,
        terminal_cost=terminal,
        L=1.0,
        C_growth=float(R),
        D_cost=D,
        p=p,
        affine_in_u=True,
        population=nu.N,
        name="barycenter",
        gradient=gradient,
        params={"R": float(R), "nu": nu},
    )


def make_attraction_system(d: int, R: float = 1.0, strength: float = 1.0, p: float = 2.0) -> ControlSystem:
    """Consensus dynamics ``f = -strength (x - mean(mu)) + u`` on the ball of radius ``R``.

    Costs: ``C = |u|^2 + strength |x - mean(mu)|^p`` and ``C_T = |x|^p``.
    """
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if not strength > 0:
        raise ValueError(f"strength must be positive, got {strength}")
    s = float(strength)

    def f(X, U, mu):
        return -s * (X - mu.mean()) + U

    def running(X, U, mu):
        dev = np.linalg.norm(X - mu.mean(), axis=-1)
        return _sqnorm(U) + s * dev**p

    def terminal(X, mu):
        return np.linalg.norm(X, axis=-1) ** p

    return ControlSystem(
        d=d,
        control_set=ControlSet.ball(np.zeros(d), R),
        f=f,
        running_cost=running,
        terminal_cost=terminal,
        L=2.0 * s,
        C_growth=max(s, R),
        D_cost=max(R * R, s * 2.0 ** (p - 1), 1.0),
        p=p,
        affine_in_u=True,
        name="attraction",
        params={"R": float(R), "strength": s},
    )


def make_decoupled_system(
    d: int, R: float = 1.0, running: str = "quadratic", terminal: str = "zero", p: float = 2.0
) -> ControlSystem:
    """Independent particles ``f = u``; costs chosen from ``"zero"``/``"quadratic"``."""
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if running not in ("zero", "quadratic") or terminal not in ("zero", "quadratic"):
        raise ValueError("running/terminal must be 'zero' or 'quadratic'")

    def f(X, U, mu):
        return np.array(U, dtype=float, copy=True)

    def run_cost(X, U, mu):
        return _sqnorm(U) if running == "quadratic" else np.zeros(np.shape(X)[0])

    def term_cost(X, mu):
        return np.linalg.norm(X, axis=-1) ** p if terminal == "quadratic" else np.zeros(np.shape(X)[0])

    return ControlSystem(
        d=d,
        control_set=ControlSet.ball(np.zeros(d), R),
        f=f,
        running_cost=run_cost,
        terminal_cost=term_cost,
        L=1.0,
        C_growth=float(R),
        D_cost=max(R * R, 1.0),
        p=p,
        affine_in_u=True,
        name="decoupled",
        params={"R": float(R), "running": running, "terminal": terminal},
    )


@dataclass
class AssumptionReport:
    samples: int
    lipschitz_ratio: float = 0.0
    f_growth_ratio: float = 0.0
    running_growth_ratio: float = 0.0
    terminal_growth_ratio: float = 0.0
    affinity_residual: float = 0.0
    convexity_violations: int = 0
    lipschitz_ok: bool = True
    f_growth_ok: bool = True
    cost_growth_ok: bool = True
    affinity_ok: bool = True
    convexity_ok: bool = True

    @property
    def passed(self) -> bool:
        return all((self.lipschitz_ok, self.f_growth_ok, self.cost_growth_ok, self.affinity_ok, self.convexity_ok))


def check_assumptions(
    system: ControlSystem,
    samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
    bounds: tuple[float, float] = (-10.0, 10.0),
    max_atoms: int = 6,
) -> AssumptionReport:
    """Probe the Lipschitz, growth and convexity requirements on random samples.

    States are drawn uniformly from ``bounds`` in every coordinate, measures
    have between 1 and ``max_atoms`` points (exactly ``system.population`` if
    set). Half of the Lipschitz pairs are local perturbations so that
    non-global Lipschitz behaviour is exposed.
    Sample ``i`` only depends on ``(seed, i)``: the reported maxima are
    nondecreasing in ``samples``. Violations are reported, never raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    lo, hi = map(float, bounds)
    d, p, U = system.d, system.p, system.control_set
    rep = AssumptionReport(samples=samples)

    for i in range(samples):
        rng = _rng.stream(seed, "check_assumptions", i)
        n = system.population or int(rng.integers(1, max_atoms + 1))
        x = rng.uniform(lo, hi, size=(1, d))
        mu = EmpiricalMeasure(rng.uniform(lo, hi, size=(n, d)))
        if i % 2:
            scale = 10.0 ** rng.uniform(-3, 0) * (hi - lo) / 2
            y = x + scale * rng.uniform(-1, 1, size=(1, d))
            nu = EmpiricalMeasure(mu.points + scale * rng.uniform(-1, 1, size=(n, d)))
        else:
            y = rng.uniform(lo, hi, size=(1, d))
            nu = EmpiricalMeasure(rng.uniform(lo, hi, size=(n, d)))
        u = U.sample(rng, 1)
        v = U.sample(rng, 1)

        fx = np.asarray(system.f(x, u, mu), dtype=float)
        fy = np.asarray(system.f(y, u, nu), dtype=float)
        wp, _ = wasserstein(mu, nu, p)
        dist = (np.linalg.norm(x - y) ** p + wp**p) ** (1.0 / p)
        if dist > 0:
            rep.lipschitz_ratio = max(rep.lipschitz_ratio, float(np.linalg.norm(fx - fy) / dist))

        mp = moment(mu, p)
        rep.f_growth_ratio = max(rep.f_growth_ratio, float(np.linalg.norm(fx) / (1 + np.linalg.norm(x) + mp)))
        cap = 1 + np.linalg.norm(x) ** p + mp**p
        cu = float(np.asarray(system.running_cost(x, u, mu))[0])
        ct = float(np.asarray(system.terminal_cost(x, mu))[0])
        rep.running_growth_ratio = max(rep.running_growth_ratio, cu / cap)
        rep.terminal_growth_ratio = max(rep.terminal_growth_ratio, ct / cap)
        if cu < -tol or ct < -tol:
            rep.cost_growth_ok = False

        if system.affine_in_u:
            mid = 0.5 * (u + v)
            fv = np.asarray(system.f(x, v, mu), dtype=float)
            fm = np.asarray(system.f(x, mid, mu), dtype=float)
            rep.affinity_residual = max(rep.affinity_residual, float(np.linalg.norm(fm - 0.5 * (fx + fv))))
            cv = float(np.asarray(system.running_cost(x, v, mu))[0])
            cm = float(np.asarray(system.running_cost(x, mid, mu))[0])
            if cm > 0.5 * (cu + cv) + tol:
                rep.convexity_violations += 1

    rep.lipschitz_ok = rep.lipschitz_ratio <= system.L + tol
    rep.f_growth_ok = rep.f_growth_ratio <= system.C_growth + tol
    rep.cost_growth_ok = rep.cost_growth_ok and max(rep.running_growth_ratio, rep.terminal_growth_ratio) <= system.D_cost + tol
    rep.affinity_ok = rep.affinity_residual <= tol
    rep.convexity_ok = rep.convexity_violations == 0
    return rep
