import numpy as np
import pytest

from eulerheat.fields import DepositionKernel, GridFields, PeriodicGrid, deposit
from eulerheat.loops import LoopEnsemble, graph_loop, winding_line
from eulerheat.pde import (BlowupError, ReducedState, compute_momentum, conservative_residual, max_stable_dt,
                           reduced_velocity, solve, step_nonconservative, to_fields)

EPS = 0.05


def graph_b(grid, t=0.0, eps=EPS):
    x = grid.mesh()
    return np.stack([np.ones(grid.shape), 2 * np.pi * eps * np.cos(2 * np.pi * x[0]) * np.exp(-4 * np.pi**2 * t)])


def graph_error(n, T=0.01, cfl=0.9):
    g = PeriodicGrid(2, n)
    states = list(solve(ReducedState(g, graph_b(g)), T, T, cfl=cfl))
    return np.max(np.abs(states[-1].b - graph_b(g, T)))


@pytest.mark.parametrize("b0", [[1.0, 0.0], [0.3, -0.7], [1.0, 0.5]])
def test_constant_b_is_fixed_point(b0):
    g = PeriodicGrid(2, 16)
    b = np.stack([np.full(g.shape, c) for c in b0])
    rho = 1.0 + 0.1 * np.sin(2 * np.pi * g.mesh()[1])
    final = list(solve(ReducedState(g, b, rho), 0.01, 0.005))[-1]
    np.testing.assert_array_equal(final.b, b)
    np.testing.assert_array_equal(final.rho, rho)


def test_line_along_density_gradient_is_stationary():
    """b = e1 over rho varying in x1: v = 0, so rho is not transported either."""
    g = PeriodicGrid(2, 32)
    b = np.stack([np.ones(g.shape), np.zeros(g.shape)])
    rho = 1.0 + 0.1 * np.sin(2 * np.pi * g.mesh()[0])
    assert np.max(np.abs(reduced_velocity(b, g))) == 0.0
    final = list(solve(ReducedState(g, b, rho), 0.02, 0.01))[-1]
    np.testing.assert_array_equal(final.rho, rho)
    np.testing.assert_array_equal(final.b, b)


def test_graph_decay_second_order_in_h():
    """dt follows the h^2 stability bound, so O(h^2 + dt) error quarters per refinement."""
    errs = [graph_error(n) for n in (32, 64)]
    assert errs[0] == pytest.approx(6.109e-5, rel=0.01)
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.3)


def test_graph_decay_first_component_untouched():
    g = PeriodicGrid(2, 32)
    final = list(solve(ReducedState(g, graph_b(g)), 0.01, 0.005))[-1]
    np.testing.assert_array_equal(final.b[0], 1.0)


def test_dt_above_bound_rejected():
    g = PeriodicGrid(2, 16)
    state = ReducedState(g, graph_b(g))
    limit = max_stable_dt(state)
    peak = 1 + (2 * np.pi * EPS * np.cos(np.pi / 16)) ** 2  # nearest cell centre to the crest
    assert limit == pytest.approx(g.h**2 / (4 * peak), rel=1e-12)
    step_nonconservative(state, limit)
    with pytest.raises(ValueError, match="stability bound"):
        step_nonconservative(state, 1.01 * limit)


def test_viscosity_tightens_bound():
    g = PeriodicGrid(2, 16)
    state = ReducedState(g, graph_b(g))
    assert max_stable_dt(state, nu=1.0) < max_stable_dt(state)


def test_zero_b_has_no_bound():
    g = PeriodicGrid(2, 8)
    assert max_stable_dt(ReducedState(g, np.zeros((2, 8, 8)))) == np.inf


def test_blowup_detected():
    g = PeriodicGrid(2, 8)
    b = np.full((2, 8, 8), 1e154)
    b[:, 0, 0] = -1e154
    state = ReducedState(g, b)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(BlowupError):
        step_nonconservative(state, max_stable_dt(state))


def test_state_validation():
    g = PeriodicGrid(2, 8)
    with pytest.raises(ValueError, match="shape"):
        ReducedState(g, np.zeros((2, 8, 9)))
    with pytest.raises(ValueError, match="non-finite"):
        ReducedState(g, np.full((2, 8, 8), np.nan))
    with pytest.raises(ValueError, match="nonnegative"):
        ReducedState(g, np.zeros((2, 8, 8)), -np.ones((8, 8)))


def test_solve_requires_whole_intervals():
    g = PeriodicGrid(2, 8)
    with pytest.raises(ValueError, match="whole number"):
        list(solve(ReducedState(g, np.zeros((2, 8, 8))), 0.01, 0.003))


def test_to_fields_metadata_and_products():
    g = PeriodicGrid(2, 16)
    rho = np.full(g.shape, 2.0)
    f = to_fields(ReducedState(g, graph_b(g), rho, 0.5), nu=0.1)
    assert f.meta == {"source": "pde", "nu": 0.1}
    assert f.t == 0.5
    np.testing.assert_array_equal(f.B, 2.0 * graph_b(g))
    with pytest.raises(ValueError, match="no density"):
        to_fields(ReducedState(g, graph_b(g)))


def test_momentum_vanishes_for_straight_field():
    g = PeriodicGrid(2, 16)
    rho = 1.0 + 0.3 * np.cos(2 * np.pi * g.mesh()[1])
    B = np.stack([rho, np.zeros(g.shape)])
    assert np.max(np.abs(compute_momentum(rho, B, g))) < 1e-12


def test_momentum_shift_equivariant_and_homogeneous():
    rng = np.random.default_rng(3)
    g = PeriodicGrid(2, 16)
    rho = rng.uniform(0.5, 1.5, g.shape)
    B = rng.normal(size=(2,) + g.shape)
    P = compute_momentum(rho, B, g)
    shifted = compute_momentum(np.roll(rho, 3, axis=0), np.roll(B, 3, axis=1), g)
    np.testing.assert_allclose(shifted, np.roll(P, 3, axis=1), atol=1e-12)
    # P is quadratic in B and of degree -1 in rho
    np.testing.assert_allclose(compute_momentum(2 * rho, 2 * B, g), 2 * P, atol=1e-10)


def test_momentum_matches_deposited_P():
    """Grid momentum from (rho, B) tracks the deposited P at second order in h."""
    ens = LoopEnsemble.single(graph_loop(EPS))
    errs = []
    for n in (64, 128):
        g = PeriodicGrid(2, n)
        f = deposit(ens, 0.01, g, DepositionKernel("gaussian", 2.0 * n / 64), 4 * n)
        errs.append(np.max(np.abs(compute_momentum(f.rho, f.B, g) - f.P)) / np.max(np.abs(f.P)))
    assert errs[0] == pytest.approx(0.2465, rel=0.01)
    assert errs[0] / errs[1] == pytest.approx(4.0, abs=0.3)


def test_conservative_residual_stationary_line():
    g = PeriodicGrid(2, 32)
    line = deposit(LoopEnsemble.single(winding_line([1, 0], [0, 0.5])), 0.0, g, DepositionKernel(), 128)
    frames = [GridFields(g, line.rho, line.B, line.P, t) for t in (0.0, 0.01, 0.02, 0.03)]
    ind, cont = conservative_residual(frames)
    assert ind <= 1e-10 and cont <= 1e-10


def test_conservative_residual_second_order_gaussian():
    ens = LoopEnsemble.single(graph_loop(EPS))
    res = []
    for n in (64, 128):
        g = PeriodicGrid(2, n)
        ker = DepositionKernel("gaussian", 2.0 * n / 64)
        res.append(conservative_residual([deposit(ens, t, g, ker, 4 * n) for t in (0.01 - 1e-5, 0.01, 0.01 + 1e-5)]))
    # B^1 equals rho for a graph, so both equations carry the same residual
    assert res[0][0] == pytest.approx(res[0][1], rel=1e-12)
    assert res[0][0] / res[1][0] == pytest.approx(4.0, abs=0.3)


def test_conservative_residual_constant_b_pde():
    g = PeriodicGrid(2, 16)
    b = np.stack([np.ones(g.shape), np.full(g.shape, 0.5)])
    rho = 1.0 + 0.1 * np.sin(2 * np.pi * g.mesh()[0])
    frames = [to_fields(s) for s in solve(ReducedState(g, b, rho), 0.02, 0.01)]
    assert conservative_residual(frames) == (0.0, 0.0)


def test_conservative_residual_input_checks():
    g = PeriodicGrid(2, 8)
    f = GridFields(g, np.ones(g.shape), np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(ValueError, match="three"):
        conservative_residual([f, f])
    frames = [GridFields(g, f.rho, f.B, f.P, t) for t in (0.0, 0.1, 0.3)]
    with pytest.raises(ValueError, match="uniformly"):
        conservative_residual(frames)
    other = GridFields(PeriodicGrid(2, 16), np.ones((16, 16)), np.zeros((2, 16, 16)), np.zeros((2, 16, 16)), 0.2)
    with pytest.raises(ValueError, match="different grids"):
        conservative_residual(frames[:2] + [other])
