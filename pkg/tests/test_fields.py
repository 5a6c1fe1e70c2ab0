import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eulerheat.fields import (DepositionKernel, GridFields, PeriodicGrid, cauchy_schwarz_gap, deposit,
                              deposit_samples, divergence_residual, load_snapshot, save_snapshot)
from eulerheat.loops import LoopEnsemble, WindingLoop, evolve_exact, graph_loop, sample, winding_line

EPS = 0.05
KERNELS = [DepositionKernel("bspline2", 1.5), DepositionKernel("gaussian", 1.0), DepositionKernel("gaussian", 2.5)]


def line_ensemble():
    return LoopEnsemble.single(winding_line([1, 0], [0.0, 0.5]))


def random_ensemble(seed, n_loops=3):
    rng = np.random.default_rng(seed)
    loops = []
    for i in range(n_loops):
        modes = {k: (rng.normal(size=2) + 1j * rng.normal(size=2)) * 0.03 / k for k in (1, 2)}
        loops.append(WindingLoop.from_modes(rng.integers(-1, 2, size=2), rng.uniform(size=2), modes))
    w = rng.uniform(0.2, 1.0, size=n_loops)
    return LoopEnsemble(tuple(loops), w / w.sum())


def test_grid_basics():
    g = PeriodicGrid(2, 16)
    assert g.h == 1 / 16
    np.testing.assert_allclose(g.centers()[:2], [1 / 32, 3 / 32])
    assert g.mesh().shape == (2, 16, 16)
    with pytest.raises(ValueError):
        PeriodicGrid(2, 4)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: f"{k.kind}-{k.width}")
def test_kernel_nonnegative_and_truncated(kernel):
    u = np.linspace(-12, 12, 2001)
    w = kernel.profile(u)
    assert np.all(w >= 0)
    assert np.all(w[np.abs(u) > kernel.radius] == 0)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: f"{k.kind}-{k.width}")
def test_line_mass_circulation_momentum(kernel):
    f = deposit(line_ensemble(), 0.0, PeriodicGrid(2, 32), kernel, 128)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(f.circulation(), [1.0, 0.0], atol=1e-12)
    assert np.max(np.abs(f.P)) == 0.0
    assert divergence_residual(f)[0] < 1e-10


def test_weighted_windings():
    ens = LoopEnsemble((winding_line([1, 0], [0, 0.3]), winding_line([0, 1], [0.6, 0])), np.array([0.3, 0.7]))
    f = deposit(ens, 0.0, PeriodicGrid(2, 32), DepositionKernel(), 128)
    np.testing.assert_allclose(f.circulation(), [0.3, 0.7], atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), n=st.sampled_from([16, 32]), t=st.floats(0, 0.02))
def test_invariants_random_ensembles(seed, n, t):
    ens = random_ensemble(seed)
    f = deposit(ens, t, PeriodicGrid(2, n), DepositionKernel(), 4 * n)
    assert np.all(f.rho >= 0)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(f.circulation(), ens.circulation(), atol=1e-12)
    lhs, rhs = cauchy_schwarz_gap(ens, f, t)
    assert lhs <= rhs + 1e-12


def test_deposit_is_linear():
    a, b = random_ensemble(1, 1), random_ensemble(2, 1)
    grid, ker = PeriodicGrid(2, 32), DepositionKernel()
    union = LoopEnsemble(a.loops + b.loops, np.array([0.25, 0.75]))
    fu = deposit(union, 0.01, grid, ker, 128)
    fa = deposit(a, 0.01, grid, ker, 128)
    fb = deposit(b, 0.01, grid, ker, 128)
    for name in ("rho", "B", "P"):
        np.testing.assert_allclose(getattr(fu, name), 0.25 * getattr(fa, name) + 0.75 * getattr(fb, name),
                                   rtol=0, atol=1e-12)


def test_threads_bit_identical():
    ens = random_ensemble(4, 5)
    grid, ker = PeriodicGrid(2, 32), DepositionKernel()
    one = deposit(ens, 0.0, grid, ker, 128, threads=1)
    four = deposit(ens, 0.0, grid, ker, 128, threads=4)
    for name in ("rho", "B", "P"):
        np.testing.assert_array_equal(getattr(one, name), getattr(four, name))


def test_m_precondition():
    with pytest.raises(ValueError, match="too small"):
        deposit(line_ensemble(), 0.0, PeriodicGrid(2, 32), DepositionKernel(), 64)


def test_nan_sample_rejected():
    smp = sample(graph_loop(EPS), 64)
    smp.lifted.setflags(write=True)
    smp.lifted[3, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        deposit_samples([smp], [1.0], PeriodicGrid(2, 16), DepositionKernel())


def test_graph_cauchy_schwarz_converges():
    """Saturation gap of the single graph loop shrinks like h^2 (frozen reference values)."""
    ens = LoopEnsemble.single(graph_loop(EPS))
    gaps = []
    for n in (64, 128):
        f = deposit(ens, 0.0, PeriodicGrid(2, n), DepositionKernel(), 4 * n)
        lhs, rhs = cauchy_schwarz_gap(ens, f, 0.0)
        assert rhs == pytest.approx(1 + 2 * np.pi**2 * EPS**2, rel=1e-14)
        gaps.append(rhs - lhs)
    assert gaps[0] == pytest.approx(1.16e-4, rel=0.02)
    assert gaps[0] / gaps[1] == pytest.approx(4.0, abs=0.2)


def test_line_saturation_exact():
    ens = line_ensemble()
    f = deposit(ens, 0.0, PeriodicGrid(2, 32), DepositionKernel(), 128)
    lhs, rhs = cauchy_schwarz_gap(ens, f, 0.0)
    assert lhs == pytest.approx(1.0, abs=1e-10)
    assert rhs == 1.0


def test_opposed_lines_cancel():
    ens = LoopEnsemble((winding_line([1, 0], [0, 0.5]), winding_line([-1, 0], [0, 0.5])), np.array([0.5, 0.5]))
    f = deposit(ens, 0.0, PeriodicGrid(2, 32), DepositionKernel(), 128)
    lhs, rhs = cauchy_schwarz_gap(ens, f, 0.0)
    assert lhs < 1e-20
    assert rhs == 1.0


def test_far_parallel_lines_saturate():
    ens = LoopEnsemble((winding_line([1, 0], [0, 0.25]), winding_line([1, 0], [0, 0.75])), np.array([0.5, 0.5]))
    f = deposit(ens, 0.0, PeriodicGrid(2, 32), DepositionKernel(), 128)
    lhs, rhs = cauchy_schwarz_gap(ens, f, 0.0)
    assert rhs - lhs < 1e-12


def test_constant_B_divergence_free():
    g = PeriodicGrid(2, 16)
    f = GridFields(g, np.ones(g.shape), np.stack([np.full(g.shape, 0.3), np.full(g.shape, -1.0)]), np.zeros((2, 16, 16)))
    assert divergence_residual(f) == (0.0, 0.0)


def test_divergence_gaussian_second_order():
    ens = LoopEnsemble.single(graph_loop(EPS))
    rel = []
    for n in (64, 128):
        f = deposit(ens, 0.0, PeriodicGrid(2, n), DepositionKernel("gaussian", 2.0 * n / 64), 4 * n)
        rel.append(divergence_residual(f)[1])
    assert rel[0] / rel[1] == pytest.approx(4.0, abs=0.5)


def test_continuity_from_deposits():
    """Time-differenced deposits satisfy d_t rho + div P = 0 to O(dt^2 + h^2)."""
    ens = LoopEnsemble.single(graph_loop(EPS))
    errs = []
    for n in (32, 64):
        g = PeriodicGrid(2, n)
        ker = DepositionKernel("gaussian", 2.0 * n / 32)
        dt = 1e-5
        fm, f0, fp = (deposit(ens, t, g, ker, 8 * n) for t in (0.01 - dt, 0.01, 0.01 + dt))
        res = (fp.rho - fm.rho) / (2 * dt) + g.ddx(f0.P[0], 0) + g.ddx(f0.P[1], 1)
        errs.append(np.max(np.abs(res)) / np.max(np.abs(f0.P)))
    assert errs[0] / errs[1] > 3.0


def test_snapshot_roundtrip(tmp_path):
    f = deposit(random_ensemble(0), 0.005, PeriodicGrid(2, 16), DepositionKernel(), 64)
    f.meta["note"] = "x"
    path = save_snapshot(tmp_path / "s.npz", f, step=3)
    g = load_snapshot(path)
    assert g.t == f.t and g.grid == f.grid
    assert g.meta["step"] == 3 and g.meta["note"] == "x"
    for name in ("rho", "B", "P"):
        np.testing.assert_array_equal(getattr(g, name), getattr(f, name))


def test_snapshot_rejects_foreign(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.array('{"format": "other"}'))
    with pytest.raises(ValueError, match="not an eulerheat snapshot"):
        load_snapshot(tmp_path / "x.npz")


def test_three_dimensional_deposit():
    line = WindingLoop.from_modes([0, 0, 1], [0.5, 0.5, 0.0], {1: [0.02 / 2j, 0.0, 0.0]})
    f = deposit(LoopEnsemble.single(line), 0.0, PeriodicGrid(3, 16), DepositionKernel(), 64)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(f.circulation(), [0, 0, 1], atol=1e-12)


def test_evolved_graph_energy_matches_parseval():
    ens = LoopEnsemble.single(graph_loop(EPS))
    t = 0.01
    f = deposit(ens, t, PeriodicGrid(2, 128), DepositionKernel(), 512)
    lhs, rhs = cauchy_schwarz_gap(ens, f, t)
    assert rhs == pytest.approx(1 + 2 * np.pi**2 * EPS**2 * np.exp(-8 * np.pi**2 * t), rel=1e-14)
    assert abs(rhs - lhs) < 1e-4
    assert evolve_exact(graph_loop(EPS), t).K == 1
