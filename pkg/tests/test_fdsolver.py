import numpy as np
import pytest

from bs_oracle import bs_call
from itoarb import fdsolver
from itoarb.fdsolver import PdeGrid, evaluate, solve, solve_undiscounted
from itoarb.pricing import CallSpec

SPEC = CallSpec(100.0, 1.0, 0.2, 0.0)


# ---------------------------------------------------------------- grid type


def test_grid_validation():
    with pytest.raises(ValueError, match="log-uniform"):
        PdeGrid(np.linspace(50.0, 200.0, 65), np.linspace(0.0, 1.0, 65))
    with pytest.raises(ValueError, match="positive"):
        PdeGrid(np.geomspace(1.0, 200.0, 65) - 1.0, np.linspace(0.0, 1.0, 65))
    with pytest.raises(ValueError, match="uniform"):
        PdeGrid(np.geomspace(50.0, 200.0, 65), np.linspace(0.0, 1.0, 65) ** 2)
    with pytest.raises(ValueError, match="coarse"):
        PdeGrid(np.geomspace(50.0, 200.0, 8), np.linspace(0.0, 1.0, 65))


def test_grid_strike_interior():
    with pytest.raises(ValueError, match="inside"):
        PdeGrid.for_call(SPEC, x_min=110.0, x_max=300.0)


def test_grid_resolution_floor():
    g = PdeGrid(np.geomspace(50.0, 200.0, 32), np.linspace(0.0, 1.0, 128))
    with pytest.raises(ValueError, match="64"):
        solve(SPEC, g)


def test_grid_strike_midcell():
    g = PdeGrid.for_call(SPEC, n_x=257, n_t=256)
    lx = np.log(g.x_nodes)
    frac = (np.log(SPEC.strike) - lx[0]) / (lx[1] - lx[0])
    assert frac - np.floor(frac) == pytest.approx(0.5, abs=1e-9)


# ---------------------------------------------------------------- classical


def test_classical_atm_value():
    g = PdeGrid.for_call(SPEC, n_x=257, n_t=256)
    res = solve(SPEC, g)
    atm = float(evaluate(res, 0.0, 100.0))
    assert atm == pytest.approx(7.9656, abs=5e-3)
    assert atm == pytest.approx(bs_call(100.0, 100.0, 0.2, 1.0), abs=5e-3)


def test_terminal_slice_exact_and_lower_boundary_zero():
    g = PdeGrid.for_call(SPEC, n_x=129, n_t=128)
    res = solve(SPEC, g)
    np.testing.assert_array_equal(
        res.surface[-1], np.maximum(g.x_nodes - SPEC.strike, 0.0)
    )
    np.testing.assert_array_equal(res.surface[:, 0], 0.0)


def test_positivity():
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    res = solve(spec, PdeGrid.for_call(spec, n_x=257, n_t=256))
    assert res.surface.min() >= 0.0


def test_refinement_ratio_vs_richardson():
    # halving both steps shrinks the probe error by about 4x
    for rho, lo, hi in ((0.0, 3.0, 5.0), (0.02, 2.5, 5.0)):
        spec = CallSpec(100.0, 1.0, 0.2, rho)
        vals = {}
        for n in (128, 256, 512):
            g = PdeGrid.for_call(spec, n_x=n + 1, n_t=n)
            vals[n] = float(evaluate(solve(spec, g), 0.0, 100.0))
        extrap = vals[512] + (vals[512] - vals[256]) / 3.0
        ratio = abs(vals[128] - extrap) / abs(vals[256] - extrap)
        assert lo < ratio < hi


def test_rho_lowers_prices_everywhere():
    # comparison principle for the source: larger rho, lower surface
    g = PdeGrid.for_call(SPEC, n_x=257, n_t=256)
    surfs = []
    for rho in (0.0, 0.02, 0.04):
        spec = CallSpec(100.0, 1.0, 0.2, rho)
        surfs.append(solve(spec, g).surface)
    eps = 1e-9 * SPEC.strike
    assert np.all(surfs[1] <= surfs[0] + eps)
    assert np.all(surfs[2] <= surfs[1] + eps)


def test_solver_determinism():
    spec = CallSpec(100.0, 1.0, 0.2, 0.01)
    g = PdeGrid.for_call(spec, n_x=129, n_t=128)
    a = solve(spec, g).surface
    b = solve(spec, g).surface
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- undiscounted


def test_zero_rate_identical_to_discounted():
    spec = CallSpec(100.0, 1.0, 0.2, 0.015, rate=0.0)
    g = PdeGrid.for_call(spec, n_x=129, n_t=128)
    np.testing.assert_array_equal(
        solve(spec, g).surface, solve_undiscounted(spec, g).surface
    )


def test_undiscounted_classical_rate_oracle():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0, rate=0.05)
    g = PdeGrid.for_call(spec, n_x=257, n_t=256, coverage=0.35)
    res = solve_undiscounted(spec, g)
    got = float(evaluate(res, 0.0, 100.0))
    ref = float(bs_call(100.0, 100.0 * np.exp(0.05), 0.2, 1.0, rate=0.05))
    assert got == pytest.approx(ref, abs=0.01)


def test_undiscounted_terminal_payoff():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0, rate=0.05)
    g = PdeGrid.for_call(spec, n_x=129, n_t=128)
    res = solve_undiscounted(spec, g)
    k_eff = 100.0 * np.exp(0.05)
    np.testing.assert_array_equal(
        res.surface[-1], np.maximum(g.x_nodes - k_eff, 0.0)
    )


def test_change_of_variables_consistency():
    r = 0.05
    for rho in (0.0, 0.02):
        spec = CallSpec(100.0, 1.0, 0.2, rho, rate=r)
        g = PdeGrid.for_call(spec, n_x=257, n_t=256, coverage=0.4)
        disc = solve(spec, g)
        undisc = solve_undiscounted(spec, g)
        for t in (0.25, 0.5, 0.75):
            s = np.linspace(85.0, 120.0, 15)
            psi = evaluate(undisc, t, s)
            mapped = np.exp(r * t) * np.asarray(evaluate(disc, t, np.exp(-r * t) * s))
            assert np.max(np.abs(psi - mapped)) < 1e-2


# ---------------------------------------------------------------- robustness


def test_step_halving_gives_up_eventually():
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = CallSpec(100.0, 1.0, 0.2, 1e8)
    g = PdeGrid.for_call(spec, n_x=65, n_t=64)
    with pytest.raises(RuntimeError, match="halvings"):
        solve(spec, g)


def test_evaluate_guards():
    g = PdeGrid.for_call(SPEC, n_x=129, n_t=128)
    res = solve(SPEC, g)
    with pytest.raises(ValueError, match="t outside"):
        evaluate(res, 2.0, 100.0)
    with pytest.raises(ValueError, match="x outside"):
        evaluate(res, 0.5, 1e9)
    with pytest.raises(ValueError, match="no solved surface"):
        evaluate(g, 0.5, 100.0)


def test_surface_immutable_input():
    g = PdeGrid.for_call(SPEC, n_x=129, n_t=128)
    res = solve(SPEC, g)
    assert g.surface is None  # input grid untouched
    assert res is not g
