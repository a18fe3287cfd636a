from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as spi

from meanfield.dynamics import PiecewiseConstantControl, TimeGrid, cost, integrate
from meanfield.optimize import OptimizerConfig, estimate_value
from meanfield.relaxed import (
    RelaxedControl,
    apportion,
    chatter,
    l1_error,
    partition_project,
    relaxed_cost,
    relaxed_cost_terms,
    relaxed_integrate,
)
from meanfield.system import ControlSet, make_attraction_system, make_barycenter_system
from meanfield.transport import EmpiricalMeasure, wasserstein_pp


def two_atom(system, grid, N, w, seed):
    rng = np.random.default_rng(seed)
    atoms = system.control_set.sample(rng, (grid.K, N, 2))
    weights = np.broadcast_to(np.asarray(w, dtype=float), (grid.K, N, 2))
    return RelaxedControl(grid, atoms, weights, system.control_set)


def test_dirac_matches_ordinary():
    sys = make_attraction_system(2)
    rng = np.random.default_rng(0)
    grid = TimeGrid(1.0, 5)
    X0 = rng.normal(size=(4, 2))
    ctrl = PiecewiseConstantControl(grid, sys.control_set.sample(rng, (5, 4)), sys.control_set)
    sigma = RelaxedControl.from_control(ctrl)
    a, b = integrate(sys, X0, ctrl), relaxed_integrate(sys, X0, sigma)
    np.testing.assert_array_equal(a.states, b.states)
    assert relaxed_cost(sys, b, sigma) == cost(sys, a, ctrl)


def test_symmetric_mixture_barycenter():
    rng = np.random.default_rng(1)
    nu = EmpiricalMeasure(rng.normal(size=(3, 2)))
    sys = make_barycenter_system(nu, 1.0)
    grid = TimeGrid(1.0, 4)
    u = np.array([0.6, -0.3])
    atoms = np.broadcast_to(np.stack([u, -u]), (4, 3, 2, 2))
    sigma = RelaxedControl(grid, atoms, np.full((4, 3, 2), 0.5), sys.control_set)
    X0 = rng.normal(size=(3, 2))
    b = relaxed_integrate(sys, X0, sigma)
    for k in range(5):
        np.testing.assert_array_equal(b.states[k], X0)
    total = relaxed_cost(sys, b, sigma)
    expect = float(u @ u) + wasserstein_pp(EmpiricalMeasure(X0), nu, 2)[0]
    assert total == pytest.approx(expect, rel=1e-13)


def test_affinity_collapse():
    sys = make_attraction_system(2)
    grid = TimeGrid(1.0, 6)
    sigma = two_atom(sys, grid, 5, (1 / 3, 2 / 3), 2)
    X0 = np.random.default_rng(3).normal(size=(5, 2))
    a = relaxed_integrate(sys, X0, sigma)
    b = integrate(sys, X0, sigma.barycenter())
    assert np.abs(a.states - b.states).max() <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_convexity_gap(seed, w):
    sys = make_attraction_system(2)
    grid = TimeGrid(1.0, 3)
    sigma = two_atom(sys, grid, 4, (w, 1 - w), seed)
    X0 = np.random.default_rng(seed).normal(size=(4, 2))
    bary = sigma.barycenter()
    jr = relaxed_cost(sys, relaxed_integrate(sys, X0, sigma), sigma)
    jb = cost(sys, integrate(sys, X0, bary), bary)
    assert jr >= jb - 1e-12
    if np.abs(sigma.atoms[..., 0, :] - sigma.atoms[..., 1, :]).max() > 1e-6:
        assert jr > jb


def test_relaxed_cost_grid_mismatch():
    sys = make_attraction_system(1)
    sigma = two_atom(sys, TimeGrid(1.0, 2), 2, (0.5, 0.5), 0)
    b = relaxed_integrate(sys, np.zeros((2, 1)), sigma)
    with pytest.raises(ValueError):
        relaxed_cost_terms(sys, b, two_atom(sys, TimeGrid(1.0, 3), 2, (0.5, 0.5), 0))


def test_weight_and_atom_validation():
    cs = ControlSet.ball([0.0], 1.0)
    grid = TimeGrid(1.0, 1)
    with pytest.raises(ValueError):
        RelaxedControl(grid, np.zeros((1, 1, 2, 1)), np.array([[[0.5, 0.6]]]), cs)
    with pytest.raises(ValueError):
        RelaxedControl(grid, np.zeros((1, 1, 2, 1)), np.array([[[1.5, -0.5]]]), cs)
    with pytest.raises(ValueError):
        RelaxedControl(grid, np.full((1, 1, 1, 1), 2.0), np.ones((1, 1, 1)), cs)
    ok = RelaxedControl(grid, np.zeros((1, 1, 2, 1)), np.array([[[0.5, 0.5 + 5e-13]]]), cs)
    assert ok.A == 2
    with pytest.raises(ValueError):
        RelaxedControl.from_entries(grid, [[([[0.1], [0.2], [0.3]], [0.2, 0.3, 0.5])]], cs, max_atoms=2)


def test_json_round_trip_with_padding():
    cs = ControlSet.box([-1.0], [1.0])
    grid = TimeGrid(2.0, 2)
    entries = [
        [([[0.5]], [1.0]), ([[-1.0], [1.0]], [0.25, 0.75])],
        [([[0.0], [0.2], [0.4]], [0.2, 0.3, 0.5]), ([[1.0]], [1.0])],
    ]
    sigma = RelaxedControl.from_entries(grid, entries, cs)
    assert sigma.A == 3
    back = RelaxedControl.from_json(json.loads(json.dumps(sigma.to_json())))
    np.testing.assert_array_equal(back.weights, sigma.weights)
    np.testing.assert_array_equal(back.atoms[back.weights > 0], sigma.atoms[sigma.weights > 0])


def test_chatter_single_atom():
    cs = ControlSet.box([-1.0, -1.0], [1.0, 1.0])
    grid = TimeGrid(1.0, 3)
    ctrl = PiecewiseConstantControl(grid, np.random.default_rng(0).uniform(-1, 1, (3, 2, 2)), cs)
    for m in (1, 2, 5):
        out = chatter(RelaxedControl.from_control(ctrl), m)
        assert out.grid.K == 3 * m
        np.testing.assert_array_equal(out.values, np.repeat(ctrl.values, m, axis=0))


def test_chatter_half_half():
    cs = ControlSet.box([-1.0], [1.0])
    sigma = RelaxedControl.from_entries(TimeGrid(1.0, 1), [[([[-1.0], [1.0]], [0.5, 0.5])]], cs)
    out = chatter(sigma, 4)
    assert out.values[:, 0, 0].tolist() == [-1.0, -1.0, 1.0, 1.0]
    assert out.values.mean() == 0.0


def test_chatter_third_two_thirds():
    cs = ControlSet.box([0.0], [1.0])
    sigma = RelaxedControl.from_entries(TimeGrid(1.0, 1), [[([[0.0], [1.0]], [1 / 3, 2 / 3])]], cs)
    out = chatter(sigma, 3)
    assert out.values[:, 0, 0].tolist() == [0.0, 1.0, 1.0]
    assert apportion([1 / 3, 2 / 3], 3).tolist() == [1, 2]


def test_chatter_rejects_m():
    cs = ControlSet.box([0.0], [1.0])
    sigma = RelaxedControl.from_entries(TimeGrid(1.0, 1), [[([[0.0]], [1.0])]], cs)
    with pytest.raises(ValueError):
        chatter(sigma, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda w: sum(w) > 1e-3), st.integers(1, 64))
def test_apportion_fraction_error(w, m):
    w = np.asarray(w) / np.sum(w)
    seats = apportion(w, m)
    assert seats.sum() == m and (seats >= 0).all()
    assert np.abs(seats / m - w).max() <= 1.0 / m + 1e-12


def test_apportion_tie_goes_first():
    assert apportion([0.5, 0.5], 1).tolist() == [1, 0]
    assert apportion([1 / 3, 1 / 3, 1 / 3], 2).tolist() == [1, 1, 0]


def test_refine_keeps_cost_resolution():
    sys = make_attraction_system(2)
    sigma = two_atom(sys, TimeGrid(1.0, 2), 3, (0.4, 0.6), 5)
    fine = sigma.refine(4)
    assert fine.grid.K == 8
    np.testing.assert_array_equal(fine.atoms[4:8], np.repeat(sigma.atoms[1:2], 4, axis=0))


def test_value_not_above_relaxed_candidates():
    rng = np.random.default_rng(11)
    nu = EmpiricalMeasure(rng.uniform(0, 1, (4, 2)))
    X0 = rng.uniform(0, 1, (4, 2))
    sys = make_barycenter_system(nu, 1.5)
    grid = TimeGrid(1.0, 4)
    V = estimate_value(sys, X0, grid, OptimizerConfig(starts=2, max_iters=300)).value
    for seed in range(5):
        sigma = two_atom(sys, grid, 4, (0.3, 0.7), seed)
        jr = relaxed_cost(sys, relaxed_integrate(sys, X0, sigma), sigma)
        c = chatter(sigma, 32)
        gap = abs(cost(sys, integrate(sys, X0, c), c) - jr)
        assert V <= jr + gap + 1e-9


def test_partition_constant():
    proj = partition_project(lambda x: np.full_like(x, 2.5), 7)
    np.testing.assert_array_equal(proj.values[:, 0], np.full(7, 2.5))


def test_partition_identity_two_cells():
    proj = partition_project(lambda x: x, 2)
    np.testing.assert_allclose(proj.values[:, 0], [0.25, 0.75], rtol=0, atol=1e-15)
    assert proj(np.array([0.1, 0.5, 0.99, 1.0])).ravel().tolist() == [0.25, 0.75, 0.75, 0.75]


def test_partition_vector_valued():
    proj = partition_project(lambda x: np.column_stack([x, 1 - x]), 4)
    assert proj.values.shape == (4, 2)
    np.testing.assert_allclose(proj.values.sum(axis=1), 1.0)


def test_partition_rejects_N():
    with pytest.raises(ValueError):
        partition_project(np.sin, 0)


def sin_l1_oracle(N):
    # exact cell averages, then adaptive quadrature of |g^N - g| per cell
    total = 0.0
    for k in range(N):
        a, b = k / N, (k + 1) / N
        avg = (np.cos(2 * np.pi * a) - np.cos(2 * np.pi * b)) / (2 * np.pi) * N
        total += spi.quad(lambda x: abs(avg - np.sin(2 * np.pi * x)), a, b, limit=200)[0]
    return total


@pytest.mark.parametrize("N", [4, 8, 16, 32, 64, 128, 256])
def test_partition_sin_error(N):
    g = lambda x: np.sin(2 * np.pi * x)
    err = l1_error(g, partition_project(g, N))
    assert err <= np.pi / N
    assert err == pytest.approx(sin_l1_oracle(N), rel=1e-4)


@pytest.mark.parametrize("g", [np.abs, lambda x: np.abs(x - 0.3), lambda x: np.minimum(x, 0.6) * 2])
def test_partition_halving(g):
    errs = [l1_error(g, partition_project(g, N)) for N in (8, 16, 32, 64)]
    for a, b in zip(errs, errs[1:]):
        assert 0.4 <= b / a <= 0.6
